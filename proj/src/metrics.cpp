#include "peel/metrics.hpp"

#include <cmath>

namespace peel {

double mse(const Tensor& a, const Tensor& b) {
    if (!a.same_dims(b))
        throw shape_error("mse needs matching dims, got " +
                          dims_to_string(a.dims) + " vs " +
                          dims_to_string(b.dims));
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        acc += d * d;
    }
    return acc / static_cast<double>(a.size());
}

double psnr(double mse_value, double max_val) {
    if (mse_value < 0.0) throw validation_error("mse must be nonnegative");
    if (!(max_val > 0.0)) throw validation_error("max_val must be positive");
    if (mse_value == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(max_val * max_val / mse_value);
}

double relative_error(const Tensor& x_hat, const Tensor& x) {
    if (!x_hat.same_dims(x))
        throw shape_error("relative_error needs matching dims, got " +
                          dims_to_string(x_hat.dims) + " vs " +
                          dims_to_string(x.dims));
    const double ref = sqnorm(x);
    if (ref == 0.0)
        throw validation_error("relative_error reference has zero norm");
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = x_hat.data[i] - x.data[i];
        acc += d * d;
    }
    return std::sqrt(acc / ref);
}

double knn_distance(const Tensor& query, const std::vector<Tensor>& refs) {
    if (refs.empty())
        throw validation_error("knn_distance needs a nonempty reference list");
    double best = std::numeric_limits<double>::infinity();
    for (const Tensor& r : refs) {
        if (!query.same_dims(r))
            throw shape_error("knn_distance reference dims " +
                              dims_to_string(r.dims) + " do not match query " +
                              dims_to_string(query.dims));
        double acc = 0.0;
        for (std::size_t i = 0; i < query.size(); ++i) {
            const double d = query.data[i] - r.data[i];
            acc += d * d;
        }
        best = std::min(best, acc);
    }
    return std::sqrt(best);
}

SampleStats sample_stats(const std::vector<double>& values) {
    if (values.empty())
        throw validation_error("sample_stats needs at least one value");
    SampleStats s;
    s.count = values.size();
    for (double v : values) s.mean += v;
    s.mean /= static_cast<double>(s.count);
    double acc = 0.0;
    for (double v : values) {
        const double d = v - s.mean;
        acc += d * d;
    }
    s.stddev = std::sqrt(acc / static_cast<double>(s.count));
    return s;
}

PsnrAggregate aggregate_psnr(const std::vector<double>& mses, double max_val) {
    if (mses.empty())
        throw validation_error("aggregate_psnr needs at least one mse");
    PsnrAggregate agg;
    double mean_mse = 0.0;
    for (double m : mses) {
        agg.mean_of_psnr += psnr(m, max_val);
        mean_mse += m;
    }
    agg.mean_of_psnr /= static_cast<double>(mses.size());
    agg.psnr_of_mean_mse = psnr(mean_mse / static_cast<double>(mses.size()),
                                max_val);
    return agg;
}

} // namespace peel
