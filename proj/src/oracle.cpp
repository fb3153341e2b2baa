#include "peel/oracle.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <string>

#include "peel/forward.hpp"

namespace peel {

namespace {

constexpr double kRankTol = 1e-10; // relative singular-value cutoff

using RowMajorMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                   Eigen::RowMajor>>;

// Shared SVD core. When require_full_rank is set, a singular value below
// kRankTol * sigma_max raises rank_deficiency_error; otherwise the small
// directions are truncated and the minimum-norm solution is returned.
LstsqSolution svd_solve(const Eigen::MatrixXd& A, const Eigen::VectorXd& b,
                        bool require_full_rank) {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(
        A, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto& sv = svd.singularValues();
    const double smax = sv.size() > 0 ? sv(0) : 0.0;
    if (require_full_rank) {
        Eigen::Index rank = 0;
        for (Eigen::Index i = 0; i < sv.size(); ++i)
            if (sv(i) > kRankTol * smax) ++rank;
        if (smax == 0.0 || rank < A.cols())
            throw rank_deficiency_error(
                "matrix is numerically rank deficient: rank " +
                std::to_string(rank) + " of " + std::to_string(A.cols()) +
                " columns");
    }
    svd.setThreshold(kRankTol);
    Eigen::VectorXd x = svd.solve(b);
    LstsqSolution out;
    out.x.assign(x.data(), x.data() + x.size());
    out.residual = (A * x - b).norm();
    return out;
}

// Materializes the linear map t -> conv_apply(layer, t) one basis vector at
// a time, so the oracle and the iterative solver share a single operator
// definition rather than two hand-derived matrix formulas.
Eigen::MatrixXd materialize_conv(const ConvLayer& layer,
                                 const std::array<std::size_t, 3>& in_dims) {
    Tensor basis = Tensor::zeros({in_dims[0], in_dims[1], in_dims[2]});
    const std::size_t n = basis.size();
    Eigen::MatrixXd M;
    for (std::size_t j = 0; j < n; ++j) {
        basis.data[j] = 1.0;
        Tensor col = conv_apply(layer, basis);
        basis.data[j] = 0.0;
        if (j == 0) M.resize(static_cast<Eigen::Index>(col.size()),
                             static_cast<Eigen::Index>(n));
        for (std::size_t i = 0; i < col.size(); ++i)
            M(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                col.data[i];
    }
    return M;
}

} // namespace

LstsqSolution lstsq(const DenseMatrix& A, const std::vector<double>& b) {
    if (A.rows == 0 || A.cols == 0)
        throw shape_error("lstsq needs a nonempty matrix");
    if (b.size() != A.rows)
        throw shape_error("lstsq rhs length " + std::to_string(b.size()) +
                          " does not match " + std::to_string(A.rows) +
                          " rows");
    RowMajorMap Am(A.a.data(), static_cast<Eigen::Index>(A.rows),
                   static_cast<Eigen::Index>(A.cols));
    Eigen::Map<const Eigen::VectorXd> bm(b.data(),
                                         static_cast<Eigen::Index>(b.size()));
    return svd_solve(Am, bm, /*require_full_rank=*/true);
}

OracleResult oracle_invert_block(const Tensor& y, const ResBlockSpec& block,
                                 const std::array<std::size_t, 3>& in_dims,
                                 std::size_t max_hidden) {
    require_finite(y, "oracle target features");
    if (max_hidden > 30)
        throw validation_error("max_hidden " + std::to_string(max_hidden) +
                               " would enumerate more than 2^30 patterns");
    const auto hid = conv_out_dims(block.w1, in_dims);
    const std::size_t m = hid[0] * hid[1] * hid[2];
    if (m > max_hidden)
        throw validation_error(
            "hidden dimension " + std::to_string(m) + " exceeds max_hidden " +
            std::to_string(max_hidden) + "; the enumeration would not finish");
    const auto out = conv_out_dims(block.ws, in_dims);
    if (y.rank() != 3 || y.dims[0] != out[0] || y.dims[1] != out[1] ||
        y.dims[2] != out[2])
        throw shape_error("target dims " + dims_to_string(y.dims) +
                          " do not match block output " +
                          dims_to_string({out[0], out[1], out[2]}));

    const Eigen::MatrixXd W1 = materialize_conv(block.w1, in_dims);
    const Eigen::MatrixXd W2 = materialize_conv(block.w2, hid);
    const Eigen::MatrixXd Ws = materialize_conv(block.ws, in_dims);
    Eigen::Map<const Eigen::VectorXd> b(y.data.data(),
                                        static_cast<Eigen::Index>(y.size()));

    const double off_slope = block.act.kind == Activation::prelu ? block.act.a
                                                                 : 0.0;
    constexpr double eps_feas = 1e-9;
    const std::uint64_t n_masks = std::uint64_t(1) << m;

    bool found = false;
    double best_residual = 0.0;
    std::uint64_t best_mask = 0;
    Eigen::VectorXd best_x;
    Eigen::VectorXd d(static_cast<Eigen::Index>(m));
    for (std::uint64_t mask = 0; mask < n_masks; ++mask) {
        for (std::size_t i = 0; i < m; ++i)
            d(static_cast<Eigen::Index>(i)) =
                (mask >> i) & 1 ? 1.0 : off_slope;
        const Eigen::MatrixXd A = Ws + W2 * d.asDiagonal() * W1;
        // Minimum-norm representative; rank-deficient patterns still count.
        LstsqSolution sol = svd_solve(A, b, /*require_full_rank=*/false);
        Eigen::Map<const Eigen::VectorXd> xv(
            sol.x.data(), static_cast<Eigen::Index>(sol.x.size()));
        const Eigen::VectorXd z = W1 * xv;
        bool feasible = true;
        for (std::size_t i = 0; i < m && feasible; ++i) {
            const double zi = z(static_cast<Eigen::Index>(i));
            feasible = (mask >> i) & 1 ? zi >= -eps_feas : zi <= eps_feas;
        }
        if (!feasible) continue;
        // Lexicographic (residual, mask) arg-min: ascending enumeration
        // makes "strictly smaller" keep the lowest mask index on ties.
        if (!found || sol.residual < best_residual) {
            found = true;
            best_residual = sol.residual;
            best_mask = mask;
            best_x = xv;
        }
    }
    if (!found)
        throw validation_error(
            "no activation pattern is sign-feasible; the target features may "
            "not be realizable by this block");

    OracleResult res;
    res.x_star = Tensor::zeros({in_dims[0], in_dims[1], in_dims[2]});
    for (std::size_t i = 0; i < res.x_star.size(); ++i)
        res.x_star.data[i] = best_x(static_cast<Eigen::Index>(i));
    res.residual = best_residual;
    res.pattern_index = best_mask;
    res.pattern.resize(m);
    for (std::size_t i = 0; i < m; ++i)
        res.pattern[i] = (best_mask >> i) & 1;
    // Honest objective: score x_star through the real forward pass, not the
    // pattern-restricted linear model.
    Tensor yhat = resblock_forward(res.x_star, block);
    double acc = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double dd = yhat.data[i] - y.data[i];
        acc += dd * dd;
    }
    res.objective = acc;
    return res;
}

} // namespace peel
