#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "peel/forward.hpp"
#include "peel/modelio.hpp"
#include "peel/tensor.hpp"

namespace peel {

// Hyperparameters of the stem inversion. The objective is
//   ||phi(x) - target||^2 / ||target||^2
//     + lalpha * sum_i |x_i|^alpha
//     + lvbeta * tv(x, beta)
// minimized by Adam with every iterate clamped to [box_lo, box_hi].
struct ShallowConfig {
    double lalpha = 1e-7;
    double lvbeta = 1e-6;
    double alpha = 6.0;
    double beta = 2.0;
    double lr = 0.1;
    long epochs = 2000;
    std::uint64_t seed = 0;
    double box_lo = 0.0;
    double box_hi = 255.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps_adam = 1e-8;
};

struct ShallowEval {
    double value = 0.0;
    double fidelity = 0.0; // the normalized data term alone
    Tensor grad;
};

struct ShallowReport {
    std::vector<double> trace;
    double final_objective = 0.0;
    double final_fidelity = 0.0;
    long epochs_run = 0;
    // In-memory only; never serialized (outputs stay byte-reproducible).
    double wall_seconds = 0.0;
};

struct ShallowInversion {
    Tensor x_star;
    ShallowReport report;
};

// sum_i |x_i|^alpha and its gradient alpha * sign(x_i) * |x_i|^(alpha-1).
double alpha_norm(const Tensor& x, double alpha);
Tensor alpha_norm_grad(const Tensor& x, double alpha);

// Total variation with forward differences per channel,
//   sum_{c,i,j} (dh^2 + dv^2)^(beta/2),
// where a difference whose forward neighbor falls outside the image
// contributes 0. Requires rank-3 input with both spatial extents >= 2.
double tv_norm(const Tensor& x, double beta);
// Exact analytic gradient; at nonsmooth points (zero local difference with
// beta < 2) the contribution is taken as 0.
Tensor tv_norm_grad(const Tensor& x, double beta);

// Called with the clamped iterate after every epoch.
using ShallowObserver = std::function<void(const Tensor& x, long step)>;

// Objective + gradient at x; the fidelity gradient is pulled back through
// the stem layers' adjoints.
ShallowEval shallow_objective(const Tensor& x, const Tensor& target,
                              const NetworkSpec& net, const ShallowConfig& cfg);

// Inverts the stem map: starts from the box midpoint plus unit Gaussian
// noise (seeded), runs cfg.epochs Adam steps on the objective, clamping to
// the pixel box after every step. Deterministic given cfg.seed. The stem may
// contain only conv / relu / prelu / max-pool layers.
ShallowInversion invert_shallow(const Tensor& target, const NetworkSpec& net,
                                const ShallowConfig& cfg,
                                const ShallowObserver& observer = {});

// Validates ranges; throws validation_error.
void validate_shallow_config(const ShallowConfig& cfg);

} // namespace peel
