#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "peel/errors.hpp"

namespace peel {

// Dense row-major tensor of doubles. Feature maps are rank-3 (C,H,W),
// convolution kernels rank-4 (Cout,Cin,kH,kW); vectors are rank-1.
struct Tensor {
    std::vector<std::size_t> dims;
    std::vector<double> data;

    Tensor() = default;
    Tensor(std::vector<std::size_t> d, std::vector<double> v);

    static Tensor zeros(std::vector<std::size_t> d);
    static Tensor full(std::vector<std::size_t> d, double value);

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return dims.size(); }
    bool same_dims(const Tensor& o) const { return dims == o.dims; }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    // Rank-3 accessors (c,h,w).
    double& at(std::size_t c, std::size_t h, std::size_t w) {
        return data[(c * dims[1] + h) * dims[2] + w];
    }
    double at(std::size_t c, std::size_t h, std::size_t w) const {
        return data[(c * dims[1] + h) * dims[2] + w];
    }
};

std::size_t dims_product(const std::vector<std::size_t>& dims);
std::string dims_to_string(const std::vector<std::size_t>& dims);
bool all_finite(const Tensor& t);
// Throws validation_error naming `what` if t holds a NaN or infinity.
void require_finite(const Tensor& t, const std::string& what);

// Per-axis stride and zero padding for 2-d convolution.
struct ConvGeometry {
    std::size_t stride_h = 1;
    std::size_t stride_w = 1;
    std::size_t pad_h = 0;
    std::size_t pad_w = 0;
};

// Output extents floor((in + 2*pad - k)/stride) + 1; throws shape_error if
// any extent would be < 1 or the kernel overhangs the padded input.
std::array<std::size_t, 2> conv_output_hw(std::size_t in_h, std::size_t in_w,
                                          std::size_t k_h, std::size_t k_w,
                                          const ConvGeometry& g);

// Cross-correlation of x (C,H,W) with kernel k (O,C,kH,kW). Each output
// element accumulates in a fixed (c,u,v) order, so results are bitwise
// reproducible across runs.
Tensor conv2d(const Tensor& x, const Tensor& k, const ConvGeometry& g);

// Exact adjoint of conv2d in its input argument: for all x,g
// <conv2d(x,k,g), g> == <x, conv2d_adjoint(g,k,g,in_dims)>.
Tensor conv2d_adjoint(const Tensor& grad_out, const Tensor& k,
                      const ConvGeometry& g,
                      const std::array<std::size_t, 3>& in_dims);

// Gradient of conv2d w.r.t. the kernel (same accumulation-order guarantee).
Tensor conv2d_kernel_grad(const Tensor& x, const Tensor& grad_out,
                          const std::array<std::size_t, 4>& k_dims,
                          const ConvGeometry& g);

// Splits x into nonnegative parts: p = max(x,0), n = max(-x,0), so that
// p - n == x and p.*n == 0 hold exactly in floating point.
std::pair<Tensor, Tensor> relu_pair(const Tensor& x);

Tensor relu(const Tensor& x);
Tensor prelu(const Tensor& x, double a);

// Pullback through relu: multiplier 1 where x > 0, 0 where x <= 0.
Tensor relu_vjp(const Tensor& x, const Tensor& grad_out);
// Pullback through prelu: multiplier 1 where x > 0, a where x <= 0.
Tensor prelu_vjp(const Tensor& x, const Tensor& grad_out, double a);

struct MaxPoolResult {
    Tensor y;
    std::vector<std::size_t> argmax; // flat input index per output element
};

// Max pooling without padding; ties go to the smallest row-major index.
MaxPoolResult maxpool(const Tensor& x, std::size_t k_h, std::size_t k_w,
                      std::size_t stride_h, std::size_t stride_w);

// Scatters grad_out back through recorded argmax positions.
Tensor maxpool_vjp(const std::vector<std::size_t>& argmax,
                   const Tensor& grad_out,
                   const std::array<std::size_t, 3>& in_dims);

// Reductions run in flat index order (bitwise reproducible).
double inner(const Tensor& a, const Tensor& b);
double sqnorm(const Tensor& a);
// alpha*a + b, elementwise.
Tensor axpy(double alpha, const Tensor& a, const Tensor& b);

// Binary tensor file: magic "PEELTNS1", u32 little-endian rank, rank u32
// extents, then float32 little-endian row-major payload. Values are stored
// as float32; in-memory math stays double.
void save_tns(const std::string& path, const Tensor& t);
Tensor load_tns(const std::string& path);

} // namespace peel
