#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <vector>

#include "peel/modelio.hpp"
#include "peel/tensor.hpp"

namespace peel {

// Hyperparameters of the penalty solve. lambda1 weighs the complementarity
// penalty, lambda2 the splitting-constraint penalty; lr/epochs drive the
// projected Adam loop.
struct PenaltyConfig {
    double lambda1 = 1000.0;
    double lambda2 = 1000.0;
    double lr = 0.01;
    long epochs = 2000;
    std::uint64_t seed = 0;
    double init_scale = 0.01;
    enum CompMode { scalar, elementwise } comp_mode = scalar;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps_adam = 1e-8;
    // Optional stop once objective < early_stop_tol * ||y||^2 (off by default).
    bool early_stop = false;
    double early_stop_tol = 1e-10;
    // Optional post-loop polish: read the activation pattern off the final
    // split, solve the pattern-restricted linear least-squares in x, re-read
    // the pattern from the solution, and repeat up to refine_rounds times or
    // until the pattern stops changing. The polished triple replaces the loop
    // iterate only if it lowers the objective (off by default).
    bool refine_pattern = false;
    long refine_cg_iters = 600;
    long refine_rounds = 4;
    // Optional restart policy: if the final data residual exceeds
    // restart_tol * ||y||, rerun from a fresh seeded init (derived
    // deterministically from cfg.seed) up to max_restarts more times and keep
    // the attempt with the lowest data residual. Off by default so the
    // single-run behaviour above is untouched. Divergence still throws.
    long max_restarts = 0;
    double restart_tol = 1e-4;
};

// Iterate of one block inversion: the input estimate x (unconstrained) and
// the nonnegative split (p, n) of the hidden preactivation, plus Adam
// moment accumulators and the objective trace.
struct InversionState {
    Tensor x, p, n;
    Tensor m_x, v_x, m_p, v_p, m_n, v_n;
    long step = 0;
    std::vector<double> trace;
};

struct PenaltyEval {
    double value = 0.0;
    Tensor grad_x, grad_p, grad_n;
};

struct InversionReport {
    std::vector<double> trace;
    double final_objective = 0.0;
    double data_residual = 0.0;    // ||y - Ws x - W2 p|| at the final iterate
    double split_violation = 0.0;  // ||W1 x - p + n||
    double complementarity = 0.0;  // comp(p, n) in the configured mode
    long epochs_run = 0;
    // Number of seeded attempts consumed (1 unless the restart policy fired).
    long attempts = 1;
    // Kept in memory for timing checks; never serialized, so written
    // artifacts stay byte-reproducible. Accumulates across restart attempts.
    double wall_seconds = 0.0;
};

struct BlockInversion {
    Tensor x_hat;
    Tensor p_hat, n_hat;
    InversionReport report;
};

// Objective
//   ||y - Ws x - W2 (p - a n)||^2 + lambda1 * comp(p,n)
//     + lambda2 * ||W1 x - p + n||^2
// where a is the prelu slope (0 for relu, making the data term the familiar
// ||y - Ws x - W2 p||^2), comp is (sum_i p_i n_i)^2 in scalar mode and
// sum_i (p_i n_i)^2 in elementwise mode. Gradients are exact analytic
// pullbacks through the convolution adjoints.
PenaltyEval penalty_objective(const InversionState& state, const Tensor& y,
                              const ResBlockSpec& block,
                              const PenaltyConfig& cfg);

// Clamps p and n to the nonnegative orthant; x is untouched.
void project_cone(InversionState& state);

// Called after each projection when installed; used by property tests to
// observe every iterate.
using EpochObserver = std::function<void(const InversionState&)>;

// Runs cfg.epochs iterations of Adam-step-then-project from a seeded start
// (x, p, n drawn i.i.d. N(0, init_scale^2) in that order, then projected).
// in_dims names the block-input dims (output dims alone cannot determine
// them under strided convolution). Deterministic given cfg.seed.
BlockInversion invert_block(const Tensor& y, const ResBlockSpec& block,
                            const std::array<std::size_t, 3>& in_dims,
                            const PenaltyConfig& cfg,
                            const EpochObserver& observer = {});

// One bias-corrected Adam update over a flat tensor (shared with the
// shallow-stage and non-residual solvers).
void adam_step(Tensor& theta, Tensor& m, Tensor& v, const Tensor& grad,
               long t, double lr, double beta1, double beta2, double eps);

// The pattern-restricted polish used by refine_pattern, exposed for tests:
// fixes the activation pattern mask[i] = (p[i] > n[i]), solves
//   min_x ||y - Ws x - W2 (s .* (W1 x))||^2,  s_i = 1 if mask else prelu slope
// by conjugate gradients on the normal equations, and returns the minimizer.
Tensor solve_pattern_lstsq(const Tensor& y, const ResBlockSpec& block,
                           const std::array<std::size_t, 3>& in_dims,
                           const Tensor& p, const Tensor& n, long cg_iters);

// Validates hyperparameter ranges; throws validation_error.
void validate_penalty_config(const PenaltyConfig& cfg);

} // namespace peel
