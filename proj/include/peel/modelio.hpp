#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "peel/tensor.hpp"

namespace peel {

// One convolution: rank-4 kernel (Cout,Cin,kH,kW) + geometry + optional
// per-output-channel bias. `identity` marks a 1x1 channel-identity skip so
// initialization and solvers can treat it as a plain copy.
struct ConvLayer {
    Tensor kernel;
    ConvGeometry geom;
    bool has_bias = false;
    std::vector<double> bias; // length Cout when has_bias
    bool identity = false;
};

struct Activation {
    enum Kind { relu, prelu } kind = relu;
    double a = 0.25; // prelu slope for x < 0
};

struct MaxPoolSpec {
    std::size_t k_h = 2, k_w = 2;
    std::size_t stride_h = 2, stride_w = 2;
};

// Inference-mode batch-norm statistics, one entry per channel.
struct BatchNormLayer {
    std::vector<double> gamma, beta, mean, var;
    double eps = 1e-5;
};

enum class StemKind { conv, relu, prelu, maxpool, batchnorm };

struct StemLayer {
    StemKind kind = StemKind::relu;
    ConvLayer conv;        // when kind == conv
    double prelu_a = 0.25; // when kind == prelu
    MaxPoolSpec pool;      // when kind == maxpool
    BatchNormLayer bn;     // when kind == batchnorm
};

// Preactivation residual block y = Ws x + W2 act(W1 x).
struct ResBlockSpec {
    ConvLayer w1, w2, ws;
    Activation act;
};

struct NetworkSpec {
    std::array<std::size_t, 3> input_dims{0, 0, 0};
    std::vector<StemLayer> stem;
    std::vector<ResBlockSpec> blocks;
};

struct InitScheme {
    enum Kind { gaussian, fan_in } kind = fan_in;
    double sigma = 0.05; // used by gaussian; must be > 0
    std::uint64_t seed = 0;
    double gain = 1.0; // multiplies the per-kernel sigma; < 1 shrinks branches
};

// Kernel + optional bias applied to x.
Tensor conv_apply(const ConvLayer& layer, const Tensor& x);
// Adjoint of conv_apply in x (bias does not contribute).
Tensor conv_apply_adjoint(const ConvLayer& layer, const Tensor& grad_out,
                          const std::array<std::size_t, 3>& in_dims);

std::array<std::size_t, 3> conv_out_dims(const ConvLayer& layer,
                                         const std::array<std::size_t, 3>& in);

// Output dims of one stem layer / one block for the given input dims.
std::array<std::size_t, 3> stem_layer_out_dims(const StemLayer& layer,
                                               const std::array<std::size_t, 3>& in);
std::array<std::size_t, 3> block_out_dims(const ResBlockSpec& block,
                                          const std::array<std::size_t, 3>& in);

// Walks the whole network checking that dims chain and that the two block
// branches agree; throws naming the offending stem layer or block index.
// Returns the final output dims.
std::array<std::size_t, 3> validate_network(const NetworkSpec& spec);

// Dims entering each residual block (index 0 = stem output).
std::vector<std::array<std::size_t, 3>> block_input_dims(const NetworkSpec& spec);

// Named depth presets or a path to a custom manifest. By default stage widths
// start at stem_width and grow x4 at each stride-2 stage entry so every block
// preserves its input dimension count. With uniform_stride every conv —
// including the stem — is stride-1 and widths double per stage: stage entries
// then expand channels 2x, which keeps each block injective (a strided entry
// loses the pixels its 1x1 skip never samples, so strict per-block recovery
// is only well-posed in the uniform variant), and the stem's activation
// becomes a prelu so the skip-less stem map stays invertible end to end.
// `pooling` inserts a 2x2/2 max-pool after the stem activation.
NetworkSpec build_arch(const std::string& name,
                       const std::array<std::size_t, 3>& input_dims,
                       bool pooling, std::size_t stem_width = 4,
                       bool uniform_stride = false);

// Fills all non-identity kernels deterministically from the scheme; biases
// present in the spec are zeroed; batch-norm layers are left untouched.
NetworkSpec random_init(NetworkSpec spec, const InitScheme& scheme);

// Directory container: model.json (ordered layer records with weight-blob
// offsets) + weights.bin (concatenated f32 little-endian arrays).
void save_model(const NetworkSpec& spec, const std::string& dir);
NetworkSpec load_model(const std::string& dir);

// Single-tensor container (.tns): "TNS1\n<rank> <d0> <d1> ...\n" followed by
// the raw f64 host-endian payload. Lossless, byte-deterministic round trip.
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

// Absorbs every stem batch-norm into the convolution immediately before it.
// A batch-norm whose predecessor is not a convolution is an error.
NetworkSpec fold_batchnorm(const NetworkSpec& spec);

} // namespace peel
