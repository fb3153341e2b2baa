#pragma once

#include <optional>
#include <vector>

#include "peel/blockinv.hpp"
#include "peel/forward.hpp"
#include "peel/modelio.hpp"
#include "peel/shallowinv.hpp"

namespace peel {

// One inverted block inside a full run, deepest first.
struct PeelStage {
    std::size_t block = 0; // 1-based network index of the inverted block
    BlockInversion inv;    // inv.x_hat estimates that block's input
    // Relative error against the true input, when a forward trace was
    // supplied for scoring. A real adversary never has this.
    std::optional<double> truth_error;
};

struct PeelRun {
    std::vector<PeelStage> stages; // ordered N .. 1
    bool shallow_ran = false;      // false iff the stem is empty
    ShallowInversion shallow;      // meaningful when shallow_ran
    Tensor image; // final reconstruction; equals the block-1 estimate when
                  // the stem is empty
};

// Full reconstruction from the deepest feature map: invert blocks N..1,
// feeding each estimate to the next stage, then invert the stem. Block L
// (1-based) draws its start from mix_seed(block_cfg.seed, L-1) so stages
// are independent and the whole run is reproducible from one seed. Errors
// from a stage are rethrown with the block index attached. When `truth`
// is given, each stage also records its error against the real trace.
PeelRun peel_network(const Tensor& y_deep, const NetworkSpec& net,
                     const PenaltyConfig& block_cfg,
                     const ShallowConfig& shallow_cfg,
                     const TapTrace* truth = nullptr);

// Inversion of a single skip-less layer y = relu(W x): same penalty split
// and solver loop, but the data term can see only the positive part p, so
// x is tied to the observation solely through the splitting constraint.
// Kept as a demonstration of why the skip path matters; reconstruction
// quality is expected to degrade. Pattern refinement is not defined for
// this variant and is rejected.
BlockInversion invert_nonresidual(const Tensor& y, const ConvLayer& w,
                                  const std::array<std::size_t, 3>& in_dims,
                                  const PenaltyConfig& cfg);

} // namespace peel
