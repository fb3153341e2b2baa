#include "peel/pipeline.hpp"

#include <cmath>
#include <string>

#include "peel/rng.hpp"

namespace peel {

namespace {

double rel_error(const Tensor& got, const Tensor& want) {
    double nu = 0.0, de = 0.0;
    for (std::size_t i = 0; i < got.size(); ++i) {
        const double d = got.data[i] - want.data[i];
        nu += d * d;
        de += want.data[i] * want.data[i];
    }
    return std::sqrt(nu / de);
}

} // namespace

PeelRun peel_network(const Tensor& y_deep, const NetworkSpec& net,
             const PenaltyConfig& block_cfg, const ShallowConfig& shallow_cfg,
             const TapTrace* truth) {
    const auto out_dims = validate_network(net);
    if (y_deep.rank() != 3 || y_deep.dims[0] != out_dims[0] ||
        y_deep.dims[1] != out_dims[1] || y_deep.dims[2] != out_dims[2])
        throw shape_error("deep features " + dims_to_string(y_deep.dims) +
                          " do not match network output " +
                          dims_to_string({out_dims[0], out_dims[1],
                                          out_dims[2]}));
    if (net.blocks.empty())
        throw validation_error("network has no residual blocks to invert");
    if (truth && truth->taps.size() != net.blocks.size())
        throw validation_error("forward trace holds " +
                               std::to_string(truth->taps.size()) +
                               " taps but the network has " +
                               std::to_string(net.blocks.size()) + " blocks");

    const std::vector<std::array<std::size_t, 3>> ins = block_input_dims(net);
    PeelRun run;
    Tensor cur = y_deep;
    for (std::size_t l = net.blocks.size(); l-- > 0;) {
        PenaltyConfig cfg = block_cfg;
        cfg.seed = mix_seed(block_cfg.seed, static_cast<std::uint64_t>(l));
        PeelStage stage;
        stage.block = l + 1;
        try {
            stage.inv = invert_block(cur, net.blocks[l], ins[l], cfg);
        } catch (const diverged_error& e) {
            throw diverged_error("block " + std::to_string(l + 1) + ": " +
                                     e.what(),
                                 e.step);
        } catch (const shape_error& e) {
            throw shape_error("block " + std::to_string(l + 1) + ": " +
                              e.what());
        } catch (const validation_error& e) {
            throw validation_error("block " + std::to_string(l + 1) + ": " +
                                   e.what());
        }
        if (truth) {
            const Tensor& want = l == 0 ? truth->phi0 : truth->taps[l - 1];
            stage.truth_error = rel_error(stage.inv.x_hat, want);
        }
        cur = stage.inv.x_hat;
        run.stages.push_back(std::move(stage));
    }

    if (net.stem.empty()) {
        run.image = std::move(cur);
        return run;
    }
    try {
        run.shallow = invert_shallow(cur, net, shallow_cfg);
    } catch (const diverged_error& e) {
        throw diverged_error(std::string("shallow stage: ") + e.what(),
                             e.step);
    } catch (const shape_error& e) {
        throw shape_error(std::string("shallow stage: ") + e.what());
    } catch (const validation_error& e) {
        throw validation_error(std::string("shallow stage: ") + e.what());
    }
    run.shallow_ran = true;
    run.image = run.shallow.x_star;
    return run;
}

BlockInversion invert_nonresidual(const Tensor& y, const ConvLayer& w,
                                  const std::array<std::size_t, 3>& in_dims,
                                  const PenaltyConfig& cfg) {
    if (cfg.refine_pattern)
        throw validation_error(
            "pattern refinement applies only to residual-block inversion");
    const auto out = conv_out_dims(w, in_dims);

    // The skip-less objective ||y - p||^2 is the block objective with a zero
    // skip map and an identity W2, so one solver serves both formulations.
    ResBlockSpec synth;
    synth.w1 = w;
    synth.w2.kernel = Tensor::zeros({out[0], out[0], 1, 1});
    for (std::size_t c = 0; c < out[0]; ++c)
        synth.w2.kernel.data[c * out[0] + c] = 1.0;
    synth.w2.geom = ConvGeometry{};
    synth.ws.kernel = Tensor::zeros(w.kernel.dims);
    synth.ws.geom = w.geom;
    synth.act.kind = Activation::relu;
    return invert_block(y, synth, in_dims, cfg);
}

} // namespace peel
