#pragma once

#include <limits>
#include <vector>

#include "peel/errors.hpp"
#include "peel/tensor.hpp"

namespace peel {

// Mean of (a_i - b_i)^2 over all elements. Image callers are expected to
// pass 0-255 scaled pixels so magnitudes stay comparable across tools.
double mse(const Tensor& a, const Tensor& b);

// 10 * log10(max_val^2 / mse); an exact-zero mse maps to +infinity.
double psnr(double mse_value, double max_val = 255.0);

// ||x_hat - x||_2 / ||x||_2.
double relative_error(const Tensor& x_hat, const Tensor& x);

// Smallest euclidean distance from query to any reference (K = 1).
double knn_distance(const Tensor& query, const std::vector<Tensor>& refs);

struct SampleStats {
    double mean = 0.0;
    double stddev = 0.0; // population convention (divide by n)
    std::size_t count = 0;
};

SampleStats sample_stats(const std::vector<double>& values);

// Per-sample PSNR averaging and PSNR of the pooled MSE differ (Jensen gap),
// so aggregates carry both, explicitly labeled.
struct PsnrAggregate {
    double mean_of_psnr = 0.0;
    double psnr_of_mean_mse = 0.0;
};

PsnrAggregate aggregate_psnr(const std::vector<double>& mses,
                             double max_val = 255.0);

} // namespace peel
