#include "peel/blockinv.hpp"

#include <chrono>
#include <cmath>

#include "peel/rng.hpp"

namespace peel {

void validate_penalty_config(const PenaltyConfig& cfg) {
    if (cfg.lambda1 < 0.0 || cfg.lambda2 < 0.0)
        throw validation_error("penalty weights must be nonnegative");
    if (!(cfg.lr > 0.0)) throw validation_error("learning rate must be positive");
    if (cfg.epochs < 1) throw validation_error("epochs must be positive");
    if (cfg.init_scale < 0.0)
        throw validation_error("init scale must be nonnegative");
    if (cfg.beta1 < 0.0 || cfg.beta1 >= 1.0 || cfg.beta2 < 0.0 || cfg.beta2 >= 1.0)
        throw validation_error("adam betas must lie in [0, 1)");
    if (!(cfg.eps_adam > 0.0))
        throw validation_error("adam epsilon must be positive");
    if (cfg.max_restarts < 0)
        throw validation_error("max_restarts must be nonnegative");
    if (!(cfg.restart_tol >= 0.0) || !std::isfinite(cfg.restart_tol))
        throw validation_error("restart tolerance must be finite and nonnegative");
}

namespace {

// Skip-branch helpers: identity skips are applied as copies.
Tensor skip_forward(const ConvLayer& ws, const Tensor& x) {
    if (ws.identity && !ws.has_bias) return x;
    return conv_apply(ws, x);
}

Tensor skip_adjoint(const ConvLayer& ws, const Tensor& g,
                    const std::array<std::size_t, 3>& in_dims) {
    if (ws.identity && !ws.has_bias) return g;
    return conv_apply_adjoint(ws, g, in_dims);
}

double prelu_slope(const ResBlockSpec& block) {
    return block.act.kind == Activation::prelu ? block.act.a : 0.0;
}

// y-prediction of the pattern-restricted linear map x -> Ws x + W2 (s .* W1 x).
Tensor pattern_forward(const ResBlockSpec& block, const Tensor& slopes,
                       const Tensor& x) {
    Tensor h = conv_apply(block.w1, x);
    for (std::size_t i = 0; i < h.size(); ++i) h.data[i] *= slopes.data[i];
    Tensor y = conv_apply(block.w2, h);
    Tensor sk = skip_forward(block.ws, x);
    for (std::size_t i = 0; i < y.size(); ++i) y.data[i] += sk.data[i];
    return y;
}

Tensor pattern_adjoint(const ResBlockSpec& block, const Tensor& slopes,
                       const Tensor& g, const std::array<std::size_t, 3>& in_dims,
                       const std::array<std::size_t, 3>& h_dims) {
    Tensor gh = conv_apply_adjoint(block.w2, g, h_dims);
    for (std::size_t i = 0; i < gh.size(); ++i) gh.data[i] *= slopes.data[i];
    Tensor gx = conv_apply_adjoint(block.w1, gh, in_dims);
    Tensor gs = skip_adjoint(block.ws, g, in_dims);
    for (std::size_t i = 0; i < gx.size(); ++i) gx.data[i] += gs.data[i];
    return gx;
}

} // namespace

Tensor solve_pattern_lstsq(const Tensor& y, const ResBlockSpec& block,
                           const std::array<std::size_t, 3>& in_dims,
                           const Tensor& p, const Tensor& n, long cg_iters) {
    if (!p.same_dims(n)) throw shape_error("p and n dims differ");
    const auto h_dims = conv_out_dims(block.w1, in_dims);
    if (p.rank() != 3 || p.dims[0] != h_dims[0] || p.dims[1] != h_dims[1] ||
        p.dims[2] != h_dims[2])
        throw shape_error("split dims " + dims_to_string(p.dims) +
                          " do not match W1 output dims");
    const double a = prelu_slope(block);
    Tensor slopes = Tensor::zeros(p.dims);
    for (std::size_t i = 0; i < slopes.size(); ++i)
        slopes.data[i] = p.data[i] > n.data[i] ? 1.0 : a;

    // Conjugate gradients on the normal equations A^T A x = A^T y from x0 = 0.
    Tensor x = Tensor::zeros({in_dims[0], in_dims[1], in_dims[2]});
    Tensor r = pattern_adjoint(block, slopes, y, in_dims, h_dims);
    Tensor dir = r;
    double rs = sqnorm(r);
    const double rs0 = rs;
    for (long it = 0; it < cg_iters && rs > 1e-30 * (1.0 + rs0); ++it) {
        Tensor ad = pattern_adjoint(block, slopes,
                                    pattern_forward(block, slopes, dir),
                                    in_dims, h_dims);
        const double dad = inner(dir, ad);
        if (!(dad > 0.0) || !std::isfinite(dad)) break;
        const double alpha = rs / dad;
        for (std::size_t i = 0; i < x.size(); ++i) x.data[i] += alpha * dir.data[i];
        for (std::size_t i = 0; i < r.size(); ++i) r.data[i] -= alpha * ad.data[i];
        const double rs2 = sqnorm(r);
        const double beta = rs2 / rs;
        for (std::size_t i = 0; i < dir.size(); ++i)
            dir.data[i] = r.data[i] + beta * dir.data[i];
        rs = rs2;
    }
    return x;
}

PenaltyEval penalty_objective(const InversionState& state, const Tensor& y,
                              const ResBlockSpec& block,
                              const PenaltyConfig& cfg) {
    const Tensor& x = state.x;
    const Tensor& p = state.p;
    const Tensor& n = state.n;
    if (x.rank() != 3 || p.rank() != 3)
        throw shape_error("inversion state tensors must be rank-3");
    if (!p.same_dims(n))
        throw shape_error("p and n dims differ");
    const std::array<std::size_t, 3> x_dims{x.dims[0], x.dims[1], x.dims[2]};
    const std::array<std::size_t, 3> h_dims{p.dims[0], p.dims[1], p.dims[2]};
    const double a = prelu_slope(block);

    // Data term r = y - Ws x - W2 (p - a n).
    Tensor w2_in = p;
    if (a != 0.0)
        for (std::size_t i = 0; i < w2_in.size(); ++i)
            w2_in.data[i] -= a * n.data[i];
    Tensor r = y;
    {
        Tensor skip_out = skip_forward(block.ws, x);
        Tensor main_out = conv_apply(block.w2, w2_in);
        if (!r.same_dims(skip_out) || !r.same_dims(main_out))
            throw shape_error("objective dims mismatch: y " +
                              dims_to_string(y.dims) + ", skip " +
                              dims_to_string(skip_out.dims) + ", main " +
                              dims_to_string(main_out.dims));
        for (std::size_t i = 0; i < r.size(); ++i)
            r.data[i] -= skip_out.data[i] + main_out.data[i];
    }
    double value = sqnorm(r);

    PenaltyEval out;
    out.grad_x = skip_adjoint(block.ws, r, x_dims);
    for (double& v : out.grad_x.data) v *= -2.0;
    Tensor w2t_r = conv_apply_adjoint(block.w2, r, h_dims);
    out.grad_p = w2t_r;
    for (double& v : out.grad_p.data) v *= -2.0;
    out.grad_n = Tensor::zeros({h_dims[0], h_dims[1], h_dims[2]});
    if (a != 0.0)
        for (std::size_t i = 0; i < out.grad_n.size(); ++i)
            out.grad_n.data[i] = 2.0 * a * w2t_r.data[i];

    // Complementarity penalty.
    if (cfg.lambda1 != 0.0) {
        if (cfg.comp_mode == PenaltyConfig::scalar) {
            double c = 0.0;
            for (std::size_t i = 0; i < p.size(); ++i)
                c += p.data[i] * n.data[i];
            value += cfg.lambda1 * c * c;
            const double f = 2.0 * cfg.lambda1 * c;
            for (std::size_t i = 0; i < p.size(); ++i) {
                out.grad_p.data[i] += f * n.data[i];
                out.grad_n.data[i] += f * p.data[i];
            }
        } else {
            double comp = 0.0;
            for (std::size_t i = 0; i < p.size(); ++i) {
                const double pn = p.data[i] * n.data[i];
                comp += pn * pn;
                out.grad_p.data[i] += 2.0 * cfg.lambda1 * pn * n.data[i];
                out.grad_n.data[i] += 2.0 * cfg.lambda1 * pn * p.data[i];
            }
            value += cfg.lambda1 * comp;
        }
    }

    // Splitting penalty s = W1 x - p + n.
    if (cfg.lambda2 != 0.0) {
        Tensor s = conv_apply(block.w1, x);
        if (!s.same_dims(p))
            throw shape_error("W1 output dims " + dims_to_string(s.dims) +
                              " do not match split dims " + dims_to_string(p.dims));
        for (std::size_t i = 0; i < s.size(); ++i)
            s.data[i] += n.data[i] - p.data[i];
        value += cfg.lambda2 * sqnorm(s);
        Tensor w1t_s = conv_apply_adjoint(block.w1, s, x_dims);
        for (std::size_t i = 0; i < out.grad_x.size(); ++i)
            out.grad_x.data[i] += 2.0 * cfg.lambda2 * w1t_s.data[i];
        for (std::size_t i = 0; i < s.size(); ++i) {
            out.grad_p.data[i] -= 2.0 * cfg.lambda2 * s.data[i];
            out.grad_n.data[i] += 2.0 * cfg.lambda2 * s.data[i];
        }
    }

    out.value = value;
    return out;
}

void project_cone(InversionState& state) {
    for (double& v : state.p.data)
        if (v < 0.0) v = 0.0;
    for (double& v : state.n.data)
        if (v < 0.0) v = 0.0;
}

void adam_step(Tensor& theta, Tensor& m, Tensor& v, const Tensor& grad,
               long t, double lr, double beta1, double beta2, double eps) {
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double g = grad.data[i];
        m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * g;
        v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * g * g;
        const double mhat = m.data[i] / bc1;
        const double vhat = v.data[i] / bc2;
        theta.data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
}

namespace {

BlockInversion invert_block_once(const Tensor& y, const ResBlockSpec& block,
                                 const std::array<std::size_t, 3>& in_dims,
                                 const PenaltyConfig& cfg,
                                 const EpochObserver& observer) {
    validate_penalty_config(cfg);
    require_finite(y, "block output features");
    const auto out_dims = block_out_dims(block, in_dims);
    if (y.rank() != 3 || y.dims[0] != out_dims[0] || y.dims[1] != out_dims[1] ||
        y.dims[2] != out_dims[2])
        throw shape_error("features " + dims_to_string(y.dims) +
                          " do not match block output dims " +
                          dims_to_string({out_dims[0], out_dims[1], out_dims[2]}));
    const auto h_dims = conv_out_dims(block.w1, in_dims);

    const auto t_start = std::chrono::steady_clock::now();

    InversionState st;
    st.x = Tensor::zeros({in_dims[0], in_dims[1], in_dims[2]});
    st.p = Tensor::zeros({h_dims[0], h_dims[1], h_dims[2]});
    st.n = Tensor::zeros({h_dims[0], h_dims[1], h_dims[2]});
    {
        GaussianRng rng(cfg.seed);
        rng.fill_normal(st.x, 0.0, cfg.init_scale);
        rng.fill_normal(st.p, 0.0, cfg.init_scale);
        rng.fill_normal(st.n, 0.0, cfg.init_scale);
    }
    project_cone(st);
    st.m_x = Tensor::zeros(st.x.dims);
    st.v_x = Tensor::zeros(st.x.dims);
    st.m_p = Tensor::zeros(st.p.dims);
    st.v_p = Tensor::zeros(st.p.dims);
    st.m_n = Tensor::zeros(st.n.dims);
    st.v_n = Tensor::zeros(st.n.dims);

    const double stop_level = cfg.early_stop_tol * sqnorm(y);
    for (long t = 1; t <= cfg.epochs; ++t) {
        PenaltyEval eval = penalty_objective(st, y, block, cfg);
        if (!std::isfinite(eval.value))
            throw diverged_error("block inversion diverged at step " +
                                     std::to_string(t),
                                 t);
        st.trace.push_back(eval.value);
        if (cfg.early_stop && eval.value <= stop_level) break;
        adam_step(st.x, st.m_x, st.v_x, eval.grad_x, t, cfg.lr, cfg.beta1,
                  cfg.beta2, cfg.eps_adam);
        adam_step(st.p, st.m_p, st.v_p, eval.grad_p, t, cfg.lr, cfg.beta1,
                  cfg.beta2, cfg.eps_adam);
        adam_step(st.n, st.m_n, st.v_n, eval.grad_n, t, cfg.lr, cfg.beta1,
                  cfg.beta2, cfg.eps_adam);
        project_cone(st);
        st.step = t;
        if (observer) observer(st);
    }

    BlockInversion out;
    out.report.trace = std::move(st.trace);
    out.report.epochs_run = st.step;

    // Optional pattern polish: alternate solving the linear problem a fixed
    // activation pattern implies with re-reading the pattern off the solution;
    // keep the best triple only if it beats the loop iterate's objective.
    if (cfg.refine_pattern) {
        InversionState best;
        best.x = st.x;
        best.p = st.p;
        best.n = st.n;
        double best_val = penalty_objective(best, y, block, cfg).value;
        Tensor p_cur = st.p, n_cur = st.n;
        for (long round = 0; round < cfg.refine_rounds; ++round) {
            Tensor x_r = solve_pattern_lstsq(y, block, in_dims, p_cur, n_cur,
                                             cfg.refine_cg_iters);
            Tensor h = conv_apply(block.w1, x_r);
            auto [p_r, n_r] = relu_pair(h);
            bool same_pattern = true;
            for (std::size_t i = 0; i < p_r.size() && same_pattern; ++i)
                same_pattern = (p_r.data[i] > n_r.data[i]) ==
                               (p_cur.data[i] > n_cur.data[i]);
            InversionState cand;
            cand.x = std::move(x_r);
            cand.p = std::move(p_r);
            cand.n = std::move(n_r);
            const double val = penalty_objective(cand, y, block, cfg).value;
            if (std::isfinite(val) && val < best_val) {
                best_val = val;
                best.x = cand.x;
                best.p = cand.p;
                best.n = cand.n;
            }
            p_cur = std::move(cand.p);
            n_cur = std::move(cand.n);
            if (same_pattern) break;
        }
        st.x = std::move(best.x);
        st.p = std::move(best.p);
        st.n = std::move(best.n);
    }

    // Final-iterate diagnostics.
    {
        PenaltyEval eval = penalty_objective(st, y, block, cfg);
        out.report.final_objective = eval.value;
        const double a = prelu_slope(block);
        Tensor w2_in = st.p;
        if (a != 0.0)
            for (std::size_t i = 0; i < w2_in.size(); ++i)
                w2_in.data[i] -= a * st.n.data[i];
        Tensor skip_out = skip_forward(block.ws, st.x);
        Tensor main_out = conv_apply(block.w2, w2_in);
        double rr = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) {
            const double d = y.data[i] - skip_out.data[i] - main_out.data[i];
            rr += d * d;
        }
        out.report.data_residual = std::sqrt(rr);
        Tensor s = conv_apply(block.w1, st.x);
        double ss = 0.0;
        for (std::size_t i = 0; i < s.size(); ++i) {
            const double d = s.data[i] - st.p.data[i] + st.n.data[i];
            ss += d * d;
        }
        out.report.split_violation = std::sqrt(ss);
        if (cfg.comp_mode == PenaltyConfig::scalar) {
            double c = 0.0;
            for (std::size_t i = 0; i < st.p.size(); ++i)
                c += st.p.data[i] * st.n.data[i];
            out.report.complementarity = c * c;
        } else {
            double comp = 0.0;
            for (std::size_t i = 0; i < st.p.size(); ++i) {
                const double pn = st.p.data[i] * st.n.data[i];
                comp += pn * pn;
            }
            out.report.complementarity = comp;
        }
    }

    out.x_hat = std::move(st.x);
    out.p_hat = std::move(st.p);
    out.n_hat = std::move(st.n);
    out.report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
            .count();
    return out;
}

} // namespace

BlockInversion invert_block(const Tensor& y, const ResBlockSpec& block,
                            const std::array<std::size_t, 3>& in_dims,
                            const PenaltyConfig& cfg,
                            const EpochObserver& observer) {
    validate_penalty_config(cfg);
    if (cfg.max_restarts == 0) return invert_block_once(y, block, in_dims, cfg, observer);

    BlockInversion best;
    double total_seconds = 0.0;
    long attempts = 0;
    for (long a = 0; a <= cfg.max_restarts; ++a) {
        PenaltyConfig single = cfg;
        single.max_restarts = 0;
        // Attempt 0 keeps the caller's seed so restarts only ever add work on
        // top of the single-run result; later attempts draw fresh streams.
        if (a > 0) single.seed = mix_seed(cfg.seed, 0xa11e5u + static_cast<std::uint64_t>(a));
        BlockInversion run = invert_block_once(y, block, in_dims, single, observer);
        total_seconds += run.report.wall_seconds;
        ++attempts;
        if (a == 0 || run.report.data_residual < best.report.data_residual)
            best = std::move(run);
        if (best.report.data_residual <= cfg.restart_tol * std::sqrt(sqnorm(y)))
            break;
    }
    best.report.attempts = attempts;
    best.report.wall_seconds = total_seconds;
    return best;
}

} // namespace peel
