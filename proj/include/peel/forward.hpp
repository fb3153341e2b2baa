#pragma once

#include <vector>

#include "peel/modelio.hpp"
#include "peel/tensor.hpp"

namespace peel {

// Forward-pass record: the stem output and every block output, all owned
// copies so later processing can never corrupt the observations.
struct TapTrace {
    Tensor phi0;              // stem output (input to block 0)
    std::vector<Tensor> taps; // taps[l] = output of block l
    const Tensor& final_output() const { return taps.back(); }
};

Tensor apply_activation(const Activation& act, const Tensor& x);
Tensor activation_vjp(const Activation& act, const Tensor& x,
                      const Tensor& grad_out);

// y = Ws x + W2 act(W1 x).
Tensor resblock_forward(const Tensor& x, const ResBlockSpec& block);

// Runs stem then every block, recording taps.
TapTrace network_forward(const Tensor& x, const NetworkSpec& net);

// Stem evaluation with per-layer inputs retained, enough to pull a gradient
// back through the stem afterwards.
struct StemEval {
    std::vector<Tensor> layer_inputs; // layer_inputs[i] feeds stem layer i
    std::vector<std::vector<std::size_t>> pool_argmax; // per maxpool layer
    Tensor out;
};

StemEval stem_forward(const Tensor& x, const NetworkSpec& net);

// Adjoint of the stem map at the point recorded in eval.
Tensor stem_vjp(const StemEval& eval, const NetworkSpec& net,
                const Tensor& grad_out);

} // namespace peel
