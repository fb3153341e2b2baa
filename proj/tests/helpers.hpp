#pragma once

// Shared test utilities: an independent reference convolution (explicit
// zero-padding, different loop structure from the production kernel),
// central finite differences, and seeded tensor factories.

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "peel/rng.hpp"
#include "peel/tensor.hpp"

namespace testutil {

// Reference convolution: materializes the zero-padded input, then loops in
// (o,i,j,u,v,c) order. Kept naive on purpose; only correctness matters.
inline peel::Tensor ref_conv(const peel::Tensor& x, const peel::Tensor& k,
                             const peel::ConvGeometry& g) {
    const std::size_t C = x.dims[0], H = x.dims[1], W = x.dims[2];
    const std::size_t O = k.dims[0], KH = k.dims[2], KW = k.dims[3];
    const std::size_t PH = H + 2 * g.pad_h, PW = W + 2 * g.pad_w;
    peel::Tensor padded = peel::Tensor::zeros({C, PH, PW});
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t w = 0; w < W; ++w)
                padded.at(c, h + g.pad_h, w + g.pad_w) = x.at(c, h, w);
    const std::size_t OH = (PH - KH) / g.stride_h + 1;
    const std::size_t OW = (PW - KW) / g.stride_w + 1;
    peel::Tensor y = peel::Tensor::zeros({O, OH, OW});
    for (std::size_t o = 0; o < O; ++o)
        for (std::size_t i = 0; i < OH; ++i)
            for (std::size_t j = 0; j < OW; ++j) {
                double acc = 0.0;
                for (std::size_t u = 0; u < KH; ++u)
                    for (std::size_t v = 0; v < KW; ++v)
                        for (std::size_t c = 0; c < C; ++c)
                            acc += k.data[((o * C + c) * KH + u) * KW + v] *
                                   padded.at(c, i * g.stride_h + u,
                                             j * g.stride_w + v);
                y.at(o, i, j) = acc;
            }
    return y;
}

// Central finite difference of f along coordinate i of x.
inline double fd_partial(const std::function<double(const peel::Tensor&)>& f,
                         peel::Tensor x, std::size_t i, double h = 1e-6) {
    const double orig = x.data[i];
    x.data[i] = orig + h;
    const double fp = f(x);
    x.data[i] = orig - h;
    const double fm = f(x);
    return (fp - fm) / (2.0 * h);
}

inline peel::Tensor random_tensor(std::vector<std::size_t> dims,
                                  std::uint64_t seed, double sigma = 1.0) {
    peel::Tensor t = peel::Tensor::zeros(std::move(dims));
    peel::GaussianRng rng(seed);
    rng.fill_normal(t, 0.0, sigma);
    return t;
}

inline double rel_err(double got, double want) {
    const double denom = std::max(std::abs(want), 1e-12);
    return std::abs(got - want) / denom;
}

inline double rel_err_tensor(const peel::Tensor& got, const peel::Tensor& want) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < got.size(); ++i) {
        const double d = got.data[i] - want.data[i];
        num += d * d;
        den += want.data[i] * want.data[i];
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

} // namespace testutil
