#include "peel/shallowinv.hpp"

#include <chrono>
#include <cmath>

#include "peel/blockinv.hpp" // adam_step
#include "peel/rng.hpp"

namespace peel {

void validate_shallow_config(const ShallowConfig& cfg) {
    if (cfg.lalpha < 0.0 || cfg.lvbeta < 0.0)
        throw validation_error("regularizer weights must be nonnegative");
    if (cfg.alpha < 1.0) throw validation_error("alpha must be >= 1");
    if (!(cfg.beta > 0.0)) throw validation_error("beta must be positive");
    if (!(cfg.lr > 0.0)) throw validation_error("learning rate must be positive");
    if (cfg.epochs < 1) throw validation_error("epochs must be positive");
    if (!(cfg.box_lo < cfg.box_hi))
        throw validation_error("pixel box must have positive width");
    if (cfg.beta1 < 0.0 || cfg.beta1 >= 1.0 || cfg.beta2 < 0.0 || cfg.beta2 >= 1.0)
        throw validation_error("adam betas must lie in [0, 1)");
    if (!(cfg.eps_adam > 0.0))
        throw validation_error("adam epsilon must be positive");
}

double alpha_norm(const Tensor& x, double alpha) {
    double acc = 0.0;
    for (double v : x.data) acc += std::pow(std::abs(v), alpha);
    return acc;
}

Tensor alpha_norm_grad(const Tensor& x, double alpha) {
    Tensor g = Tensor::zeros(x.dims);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = x.data[i];
        if (v == 0.0) continue; // |.|^alpha has gradient 0 at 0 for alpha >= 1
        const double mag = alpha * std::pow(std::abs(v), alpha - 1.0);
        g.data[i] = v > 0.0 ? mag : -mag;
    }
    return g;
}

namespace {

void require_image(const Tensor& x) {
    if (x.rank() != 3)
        throw shape_error("tv_norm expects a rank-3 image, got " +
                          dims_to_string(x.dims));
    if (x.dims[1] < 2 || x.dims[2] < 2)
        throw shape_error("tv_norm needs both spatial extents >= 2, got " +
                          dims_to_string(x.dims));
}

} // namespace

double tv_norm(const Tensor& x, double beta) {
    require_image(x);
    const std::size_t C = x.dims[0], H = x.dims[1], W = x.dims[2];
    double acc = 0.0;
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < H; ++i)
            for (std::size_t j = 0; j < W; ++j) {
                const double dh =
                    j + 1 < W ? x.at(c, i, j + 1) - x.at(c, i, j) : 0.0;
                const double dv =
                    i + 1 < H ? x.at(c, i + 1, j) - x.at(c, i, j) : 0.0;
                acc += std::pow(dh * dh + dv * dv, beta / 2.0);
            }
    return acc;
}

Tensor tv_norm_grad(const Tensor& x, double beta) {
    require_image(x);
    const std::size_t C = x.dims[0], H = x.dims[1], W = x.dims[2];
    Tensor g = Tensor::zeros(x.dims);
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < H; ++i)
            for (std::size_t j = 0; j < W; ++j) {
                const double dh =
                    j + 1 < W ? x.at(c, i, j + 1) - x.at(c, i, j) : 0.0;
                const double dv =
                    i + 1 < H ? x.at(c, i + 1, j) - x.at(c, i, j) : 0.0;
                const double ss = dh * dh + dv * dv;
                if (ss == 0.0) continue; // flat neighborhood: no pull
                const double f = beta * std::pow(ss, beta / 2.0 - 1.0);
                if (j + 1 < W) {
                    g.at(c, i, j + 1) += f * dh;
                    g.at(c, i, j) -= f * dh;
                }
                if (i + 1 < H) {
                    g.at(c, i + 1, j) += f * dv;
                    g.at(c, i, j) -= f * dv;
                }
            }
    return g;
}

ShallowEval shallow_objective(const Tensor& x, const Tensor& target,
                              const NetworkSpec& net,
                              const ShallowConfig& cfg) {
    const double tn = sqnorm(target);
    if (tn == 0.0) throw validation_error("target features have zero norm");
    StemEval ev = stem_forward(x, net);
    if (!ev.out.same_dims(target))
        throw shape_error("stem output dims " + dims_to_string(ev.out.dims) +
                          " do not match target dims " +
                          dims_to_string(target.dims));
    Tensor diff = ev.out;
    for (std::size_t i = 0; i < diff.size(); ++i) diff.data[i] -= target.data[i];

    ShallowEval out;
    out.fidelity = sqnorm(diff) / tn;
    out.value = out.fidelity;
    if (!std::isfinite(out.fidelity)) {
        // Overflowed forward pass: report the non-finite value with a dummy
        // gradient so driver loops can classify the run as diverged.
        out.grad = Tensor::zeros(x.dims);
        return out;
    }
    for (double& v : diff.data) v *= 2.0 / tn;
    out.grad = stem_vjp(ev, net, diff);
    if (cfg.lalpha != 0.0) {
        out.value += cfg.lalpha * alpha_norm(x, cfg.alpha);
        Tensor ga = alpha_norm_grad(x, cfg.alpha);
        for (std::size_t i = 0; i < ga.size(); ++i)
            out.grad.data[i] += cfg.lalpha * ga.data[i];
    }
    if (cfg.lvbeta != 0.0) {
        out.value += cfg.lvbeta * tv_norm(x, cfg.beta);
        Tensor gt = tv_norm_grad(x, cfg.beta);
        for (std::size_t i = 0; i < gt.size(); ++i)
            out.grad.data[i] += cfg.lvbeta * gt.data[i];
    }
    return out;
}

ShallowInversion invert_shallow(const Tensor& target, const NetworkSpec& net,
                                const ShallowConfig& cfg,
                                const ShallowObserver& observer) {
    validate_shallow_config(cfg);
    require_finite(target, "stem target features");
    if (sqnorm(target) == 0.0)
        throw validation_error("target features have zero norm");
    for (std::size_t i = 0; i < net.stem.size(); ++i)
        if (net.stem[i].kind == StemKind::batchnorm)
            throw unsupported_structure_error(
                "stem layer " + std::to_string(i) +
                " is a batch-norm; fold it into its conv before inverting");

    const auto t_start = std::chrono::steady_clock::now();

    Tensor x = Tensor::zeros({net.input_dims[0], net.input_dims[1],
                              net.input_dims[2]});
    {
        GaussianRng rng(cfg.seed);
        rng.fill_normal(x, 0.5 * (cfg.box_lo + cfg.box_hi), 1.0);
    }
    auto clamp_box = [&](Tensor& t) {
        for (double& v : t.data) {
            if (v < cfg.box_lo) v = cfg.box_lo;
            else if (v > cfg.box_hi) v = cfg.box_hi;
        }
    };
    clamp_box(x);
    Tensor m = Tensor::zeros(x.dims);
    Tensor v = Tensor::zeros(x.dims);

    ShallowInversion out;
    for (long t = 1; t <= cfg.epochs; ++t) {
        ShallowEval ev = shallow_objective(x, target, net, cfg);
        if (!std::isfinite(ev.value))
            throw diverged_error("stem inversion diverged at step " +
                                     std::to_string(t),
                                 t);
        out.report.trace.push_back(ev.value);
        adam_step(x, m, v, ev.grad, t, cfg.lr, cfg.beta1, cfg.beta2,
                  cfg.eps_adam);
        clamp_box(x);
        out.report.epochs_run = t;
        if (observer) observer(x, t);
    }

    ShallowEval last = shallow_objective(x, target, net, cfg);
    out.report.final_objective = last.value;
    out.report.final_fidelity = last.fidelity;
    out.x_star = std::move(x);
    out.report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
            .count();
    return out;
}

} // namespace peel
