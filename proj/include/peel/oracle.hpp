#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "peel/errors.hpp"
#include "peel/modelio.hpp"
#include "peel/tensor.hpp"

namespace peel {

// Exact global solver for tiny block-inversion instances: enumerate every
// activation sign pattern, solve the pattern-restricted least squares, and
// keep the feasible solution of least residual. A verification baseline,
// deliberately exponential in the hidden dimension.

struct DenseMatrix {
    std::size_t rows = 0, cols = 0;
    std::vector<double> a; // row-major

    static DenseMatrix zeros(std::size_t r, std::size_t c) {
        DenseMatrix m;
        m.rows = r;
        m.cols = c;
        m.a.assign(r * c, 0.0);
        return m;
    }
    double& at(std::size_t i, std::size_t j) { return a[i * cols + j]; }
    double at(std::size_t i, std::size_t j) const { return a[i * cols + j]; }
};

struct LstsqSolution {
    std::vector<double> x;
    double residual = 0.0; // ||Ax - b||_2
};

// Minimizes ||Ax - b||_2 by singular value decomposition. Throws
// rank_deficiency_error (naming the numerical rank) when any singular value
// falls below 1e-10 times the largest.
LstsqSolution lstsq(const DenseMatrix& A, const std::vector<double>& b);

struct OracleResult {
    Tensor x_star;
    double objective = 0.0;    // ||y - block(x_star)||^2 through the real
                               // forward pass, constraints exact
    double residual = 0.0;     // pattern-restricted lstsq residual
    std::vector<bool> pattern; // chosen hidden-unit activity mask
    std::uint64_t pattern_index = 0; // mask encoded as a binary counter
};

// Enumerates all 2^m activation patterns of the block's hidden layer
// (m = dim(W1 x), capped by max_hidden) and returns the global optimum.
// Works for relu and prelu blocks alike: inactive units scale by the slope.
OracleResult oracle_invert_block(const Tensor& y, const ResBlockSpec& block,
                                 const std::array<std::size_t, 3>& in_dims,
                                 std::size_t max_hidden = 14);

} // namespace peel
