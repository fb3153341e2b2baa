#include "peel/forward.hpp"

#include <cmath>

namespace peel {

Tensor apply_activation(const Activation& act, const Tensor& x) {
    return act.kind == Activation::relu ? relu(x) : prelu(x, act.a);
}

Tensor activation_vjp(const Activation& act, const Tensor& x,
                      const Tensor& grad_out) {
    return act.kind == Activation::relu ? relu_vjp(x, grad_out)
                                        : prelu_vjp(x, grad_out, act.a);
}

static Tensor skip_apply(const ConvLayer& ws, const Tensor& x) {
    if (ws.identity && !ws.has_bias) return x; // value copy
    return conv_apply(ws, x);
}

Tensor resblock_forward(const Tensor& x, const ResBlockSpec& block) {
    const Tensor hidden = conv_apply(block.w1, x);
    const Tensor activated = apply_activation(block.act, hidden);
    const Tensor main_out = conv_apply(block.w2, activated);
    const Tensor skip_out = skip_apply(block.ws, x);
    return axpy(1.0, skip_out, main_out);
}

static Tensor stem_layer_forward(const StemLayer& s, const Tensor& x,
                                 std::vector<std::size_t>* argmax_out) {
    switch (s.kind) {
        case StemKind::conv:
            return conv_apply(s.conv, x);
        case StemKind::relu:
            return relu(x);
        case StemKind::prelu:
            return prelu(x, s.prelu_a);
        case StemKind::maxpool: {
            MaxPoolResult r = maxpool(x, s.pool.k_h, s.pool.k_w,
                                      s.pool.stride_h, s.pool.stride_w);
            if (argmax_out) *argmax_out = std::move(r.argmax);
            return std::move(r.y);
        }
        case StemKind::batchnorm: {
            const BatchNormLayer& bn = s.bn;
            const std::size_t C = x.dims[0], HW = x.dims[1] * x.dims[2];
            if (bn.gamma.size() != C)
                throw shape_error("batchnorm channel mismatch");
            Tensor y = x;
            for (std::size_t c = 0; c < C; ++c) {
                const double scale = bn.gamma[c] / std::sqrt(bn.var[c] + bn.eps);
                const double shift = bn.beta[c] - bn.mean[c] * scale;
                for (std::size_t i = 0; i < HW; ++i)
                    y.data[c * HW + i] = x.data[c * HW + i] * scale + shift;
            }
            return y;
        }
    }
    throw validation_error("unknown stem layer kind");
}

StemEval stem_forward(const Tensor& x, const NetworkSpec& net) {
    StemEval eval;
    eval.pool_argmax.resize(net.stem.size());
    Tensor cur = x;
    for (std::size_t i = 0; i < net.stem.size(); ++i) {
        eval.layer_inputs.push_back(cur);
        cur = stem_layer_forward(net.stem[i], cur, &eval.pool_argmax[i]);
    }
    eval.out = std::move(cur);
    return eval;
}

Tensor stem_vjp(const StemEval& eval, const NetworkSpec& net,
                const Tensor& grad_out) {
    Tensor g = grad_out;
    for (std::size_t ri = net.stem.size(); ri-- > 0;) {
        const StemLayer& s = net.stem[ri];
        const Tensor& in = eval.layer_inputs[ri];
        switch (s.kind) {
            case StemKind::conv:
                g = conv_apply_adjoint(s.conv, g,
                                       {in.dims[0], in.dims[1], in.dims[2]});
                break;
            case StemKind::relu:
                g = relu_vjp(in, g);
                break;
            case StemKind::prelu:
                g = prelu_vjp(in, g, s.prelu_a);
                break;
            case StemKind::maxpool:
                g = maxpool_vjp(eval.pool_argmax[ri], g,
                                {in.dims[0], in.dims[1], in.dims[2]});
                break;
            case StemKind::batchnorm: {
                const BatchNormLayer& bn = s.bn;
                const std::size_t C = in.dims[0], HW = in.dims[1] * in.dims[2];
                Tensor gg = g;
                for (std::size_t c = 0; c < C; ++c) {
                    const double scale = bn.gamma[c] / std::sqrt(bn.var[c] + bn.eps);
                    for (std::size_t i = 0; i < HW; ++i)
                        gg.data[c * HW + i] *= scale;
                }
                g = std::move(gg);
                break;
            }
        }
    }
    return g;
}

TapTrace network_forward(const Tensor& x, const NetworkSpec& net) {
    if (x.dims.size() != 3 || x.dims[0] != net.input_dims[0] ||
        x.dims[1] != net.input_dims[1] || x.dims[2] != net.input_dims[2])
        throw shape_error("network input dims " + dims_to_string(x.dims) +
                          " do not match declared " +
                          dims_to_string({net.input_dims[0], net.input_dims[1],
                                          net.input_dims[2]}));
    TapTrace trace;
    trace.phi0 = stem_forward(x, net).out;
    Tensor cur = trace.phi0;
    trace.taps.reserve(net.blocks.size());
    for (const auto& block : net.blocks) {
        cur = resblock_forward(cur, block);
        trace.taps.push_back(cur);
    }
    return trace;
}

} // namespace peel
