#include "peel/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

namespace peel {

Tensor::Tensor(std::vector<std::size_t> d, std::vector<double> v)
    : dims(std::move(d)), data(std::move(v)) {
    if (data.size() != dims_product(dims))
        throw shape_error("tensor data length " + std::to_string(data.size()) +
                          " does not match dims " + dims_to_string(dims));
}

Tensor Tensor::zeros(std::vector<std::size_t> d) {
    std::size_t n = dims_product(d);
    return Tensor(std::move(d), std::vector<double>(n, 0.0));
}

Tensor Tensor::full(std::vector<std::size_t> d, double value) {
    std::size_t n = dims_product(d);
    return Tensor(std::move(d), std::vector<double>(n, value));
}

std::size_t dims_product(const std::vector<std::size_t>& dims) {
    std::size_t n = 1;
    for (std::size_t d : dims) n *= d;
    return n;
}

std::string dims_to_string(const std::vector<std::size_t>& dims) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < dims.size(); ++i) {
        if (i) os << ",";
        os << dims[i];
    }
    os << ")";
    return os.str();
}

bool all_finite(const Tensor& t) {
    for (double v : t.data)
        if (!std::isfinite(v)) return false;
    return true;
}

void require_finite(const Tensor& t, const std::string& what) {
    if (!all_finite(t))
        throw validation_error(what + " contains a non-finite value");
}

std::array<std::size_t, 2> conv_output_hw(std::size_t in_h, std::size_t in_w,
                                          std::size_t k_h, std::size_t k_w,
                                          const ConvGeometry& g) {
    if (g.stride_h == 0 || g.stride_w == 0)
        throw validation_error("convolution stride must be positive");
    if (k_h == 0 || k_w == 0)
        throw validation_error("convolution kernel extent must be positive");
    std::size_t padded_h = in_h + 2 * g.pad_h;
    std::size_t padded_w = in_w + 2 * g.pad_w;
    if (padded_h < k_h || padded_w < k_w)
        throw shape_error("kernel " + std::to_string(k_h) + "x" +
                          std::to_string(k_w) + " overhangs padded input " +
                          std::to_string(padded_h) + "x" +
                          std::to_string(padded_w));
    std::size_t out_h = (padded_h - k_h) / g.stride_h + 1;
    std::size_t out_w = (padded_w - k_w) / g.stride_w + 1;
    return {out_h, out_w};
}

static void check_conv_args(const Tensor& x, const Tensor& k) {
    if (x.rank() != 3)
        throw shape_error("conv input must be rank-3 (C,H,W), got " +
                          dims_to_string(x.dims));
    if (k.rank() != 4)
        throw shape_error("conv kernel must be rank-4 (O,C,kH,kW), got " +
                          dims_to_string(k.dims));
    if (k.dims[1] != x.dims[0])
        throw shape_error("kernel expects " + std::to_string(k.dims[1]) +
                          " input channels, input has " +
                          std::to_string(x.dims[0]));
}

Tensor conv2d(const Tensor& x, const Tensor& k, const ConvGeometry& g) {
    check_conv_args(x, k);
    require_finite(x, "conv input");
    require_finite(k, "conv kernel");
    const std::size_t C = x.dims[0], H = x.dims[1], W = x.dims[2];
    const std::size_t O = k.dims[0], KH = k.dims[2], KW = k.dims[3];
    auto [OH, OW] = conv_output_hw(H, W, KH, KW, g);
    Tensor y = Tensor::zeros({O, OH, OW});

    const double* xd = x.data.data();
    const double* kd = k.data.data();
    double* yd = y.data.data();
    const long ph = static_cast<long>(g.pad_h), pw = static_cast<long>(g.pad_w);

    for (std::size_t o = 0; o < O; ++o) {
        for (std::size_t i = 0; i < OH; ++i) {
            const long base_h = static_cast<long>(i * g.stride_h) - ph;
            for (std::size_t j = 0; j < OW; ++j) {
                const long base_w = static_cast<long>(j * g.stride_w) - pw;
                double acc = 0.0;
                for (std::size_t c = 0; c < C; ++c) {
                    const double* xc = xd + c * H * W;
                    const double* kc = kd + ((o * C + c) * KH) * KW;
                    for (std::size_t u = 0; u < KH; ++u) {
                        const long hh = base_h + static_cast<long>(u);
                        if (hh < 0 || hh >= static_cast<long>(H)) continue;
                        const double* xrow = xc + static_cast<std::size_t>(hh) * W;
                        const double* krow = kc + u * KW;
                        for (std::size_t v = 0; v < KW; ++v) {
                            const long ww = base_w + static_cast<long>(v);
                            if (ww < 0 || ww >= static_cast<long>(W)) continue;
                            acc += krow[v] * xrow[static_cast<std::size_t>(ww)];
                        }
                    }
                }
                yd[(o * OH + i) * OW + j] = acc;
            }
        }
    }
    return y;
}

Tensor conv2d_adjoint(const Tensor& grad_out, const Tensor& k,
                      const ConvGeometry& g,
                      const std::array<std::size_t, 3>& in_dims) {
    if (grad_out.rank() != 3)
        throw shape_error("adjoint input must be rank-3, got " +
                          dims_to_string(grad_out.dims));
    if (k.rank() != 4)
        throw shape_error("conv kernel must be rank-4, got " +
                          dims_to_string(k.dims));
    require_finite(grad_out, "adjoint input");
    require_finite(k, "conv kernel");
    const std::size_t C = in_dims[0], H = in_dims[1], W = in_dims[2];
    const std::size_t O = k.dims[0], KH = k.dims[2], KW = k.dims[3];
    if (k.dims[1] != C)
        throw shape_error("kernel expects " + std::to_string(k.dims[1]) +
                          " input channels, in_dims has " + std::to_string(C));
    auto [OH, OW] = conv_output_hw(H, W, KH, KW, g);
    if (grad_out.dims[0] != O || grad_out.dims[1] != OH || grad_out.dims[2] != OW)
        throw shape_error("adjoint input dims " + dims_to_string(grad_out.dims) +
                          " do not match conv output (" + std::to_string(O) +
                          "," + std::to_string(OH) + "," + std::to_string(OW) +
                          ")");
    Tensor xt = Tensor::zeros({C, H, W});

    const double* gd = grad_out.data.data();
    const double* kd = k.data.data();
    double* xd = xt.data.data();
    const long ph = static_cast<long>(g.pad_h), pw = static_cast<long>(g.pad_w);

    // Scatter in forward iteration order: each output element distributes
    // k[o,c,u,v]*g[o,i,j] back onto its input window. Single-threaded and
    // a fixed traversal, so accumulation is bitwise reproducible.
    for (std::size_t o = 0; o < O; ++o) {
        const double* go = gd + o * OH * OW;
        for (std::size_t i = 0; i < OH; ++i) {
            const long base_h = static_cast<long>(i * g.stride_h) - ph;
            for (std::size_t j = 0; j < OW; ++j) {
                const long base_w = static_cast<long>(j * g.stride_w) - pw;
                const double gv = go[i * OW + j];
                for (std::size_t c = 0; c < C; ++c) {
                    double* xc = xd + c * H * W;
                    const double* kc = kd + ((o * C + c) * KH) * KW;
                    for (std::size_t u = 0; u < KH; ++u) {
                        const long hh = base_h + static_cast<long>(u);
                        if (hh < 0 || hh >= static_cast<long>(H)) continue;
                        double* xrow = xc + static_cast<std::size_t>(hh) * W;
                        const double* krow = kc + u * KW;
                        for (std::size_t v = 0; v < KW; ++v) {
                            const long ww = base_w + static_cast<long>(v);
                            if (ww < 0 || ww >= static_cast<long>(W)) continue;
                            xrow[static_cast<std::size_t>(ww)] += krow[v] * gv;
                        }
                    }
                }
            }
        }
    }
    return xt;
}

Tensor conv2d_kernel_grad(const Tensor& x, const Tensor& grad_out,
                          const std::array<std::size_t, 4>& k_dims,
                          const ConvGeometry& g) {
    if (x.rank() != 3 || grad_out.rank() != 3)
        throw shape_error("kernel grad expects rank-3 input and grad");
    require_finite(x, "conv input");
    require_finite(grad_out, "kernel grad input");
    const std::size_t C = x.dims[0], H = x.dims[1], W = x.dims[2];
    const std::size_t O = k_dims[0], KH = k_dims[2], KW = k_dims[3];
    if (k_dims[1] != C)
        throw shape_error("kernel grad channel mismatch");
    auto [OH, OW] = conv_output_hw(H, W, KH, KW, g);
    if (grad_out.dims[0] != O || grad_out.dims[1] != OH || grad_out.dims[2] != OW)
        throw shape_error("kernel grad output-dims mismatch");
    Tensor kg = Tensor::zeros({O, C, KH, KW});

    const double* xd = x.data.data();
    const double* gd = grad_out.data.data();
    double* kd = kg.data.data();
    const long ph = static_cast<long>(g.pad_h), pw = static_cast<long>(g.pad_w);

    for (std::size_t o = 0; o < O; ++o) {
        for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t u = 0; u < KH; ++u) {
                for (std::size_t v = 0; v < KW; ++v) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < OH; ++i) {
                        const long hh = static_cast<long>(i * g.stride_h + u) - ph;
                        if (hh < 0 || hh >= static_cast<long>(H)) continue;
                        const double* xrow = xd + (c * H + static_cast<std::size_t>(hh)) * W;
                        const double* grow = gd + (o * OH + i) * OW;
                        for (std::size_t j = 0; j < OW; ++j) {
                            const long ww = static_cast<long>(j * g.stride_w + v) - pw;
                            if (ww < 0 || ww >= static_cast<long>(W)) continue;
                            acc += grow[j] * xrow[static_cast<std::size_t>(ww)];
                        }
                    }
                    kd[((o * C + c) * KH + u) * KW + v] = acc;
                }
            }
        }
    }
    return kg;
}

std::pair<Tensor, Tensor> relu_pair(const Tensor& x) {
    require_finite(x, "relu_pair input");
    Tensor p = Tensor::zeros(x.dims);
    Tensor n = Tensor::zeros(x.dims);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = x.data[i];
        if (v > 0.0) p.data[i] = v;
        else n.data[i] = -v;
    }
    return {std::move(p), std::move(n)};
}

Tensor relu(const Tensor& x) {
    require_finite(x, "relu input");
    Tensor y = Tensor::zeros(x.dims);
    for (std::size_t i = 0; i < x.size(); ++i)
        y.data[i] = x.data[i] > 0.0 ? x.data[i] : 0.0;
    return y;
}

Tensor prelu(const Tensor& x, double a) {
    require_finite(x, "prelu input");
    Tensor y = Tensor::zeros(x.dims);
    for (std::size_t i = 0; i < x.size(); ++i)
        y.data[i] = x.data[i] >= 0.0 ? x.data[i] : a * x.data[i];
    return y;
}

Tensor relu_vjp(const Tensor& x, const Tensor& grad_out) {
    if (!x.same_dims(grad_out))
        throw shape_error("relu_vjp dims mismatch: " + dims_to_string(x.dims) +
                          " vs " + dims_to_string(grad_out.dims));
    Tensor g = Tensor::zeros(x.dims);
    for (std::size_t i = 0; i < x.size(); ++i)
        g.data[i] = x.data[i] > 0.0 ? grad_out.data[i] : 0.0;
    return g;
}

Tensor prelu_vjp(const Tensor& x, const Tensor& grad_out, double a) {
    if (!x.same_dims(grad_out))
        throw shape_error("prelu_vjp dims mismatch: " + dims_to_string(x.dims) +
                          " vs " + dims_to_string(grad_out.dims));
    Tensor g = Tensor::zeros(x.dims);
    for (std::size_t i = 0; i < x.size(); ++i)
        g.data[i] = x.data[i] > 0.0 ? grad_out.data[i] : a * grad_out.data[i];
    return g;
}

MaxPoolResult maxpool(const Tensor& x, std::size_t k_h, std::size_t k_w,
                      std::size_t stride_h, std::size_t stride_w) {
    if (x.rank() != 3)
        throw shape_error("maxpool input must be rank-3, got " +
                          dims_to_string(x.dims));
    require_finite(x, "maxpool input");
    if (k_h == 0 || k_w == 0 || stride_h == 0 || stride_w == 0)
        throw validation_error("maxpool window and stride must be positive");
    const std::size_t C = x.dims[0], H = x.dims[1], W = x.dims[2];
    if (H < k_h || W < k_w)
        throw shape_error("maxpool window exceeds input extent");
    const std::size_t OH = (H - k_h) / stride_h + 1;
    const std::size_t OW = (W - k_w) / stride_w + 1;

    MaxPoolResult r{Tensor::zeros({C, OH, OW}), {}};
    r.argmax.resize(C * OH * OW);
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t i = 0; i < OH; ++i) {
            for (std::size_t j = 0; j < OW; ++j) {
                double best = -std::numeric_limits<double>::infinity();
                std::size_t best_idx = 0;
                for (std::size_t u = 0; u < k_h; ++u) {
                    for (std::size_t v = 0; v < k_w; ++v) {
                        const std::size_t hh = i * stride_h + u;
                        const std::size_t ww = j * stride_w + v;
                        const std::size_t idx = (c * H + hh) * W + ww;
                        // Strict > keeps the first (smallest row-major) index on ties.
                        if (x.data[idx] > best) {
                            best = x.data[idx];
                            best_idx = idx;
                        }
                    }
                }
                const std::size_t out_idx = (c * OH + i) * OW + j;
                r.y.data[out_idx] = best;
                r.argmax[out_idx] = best_idx;
            }
        }
    }
    return r;
}

Tensor maxpool_vjp(const std::vector<std::size_t>& argmax,
                   const Tensor& grad_out,
                   const std::array<std::size_t, 3>& in_dims) {
    if (argmax.size() != grad_out.size())
        throw shape_error("maxpool_vjp argmax length " +
                          std::to_string(argmax.size()) +
                          " does not match grad size " +
                          std::to_string(grad_out.size()));
    Tensor g = Tensor::zeros({in_dims[0], in_dims[1], in_dims[2]});
    for (std::size_t i = 0; i < argmax.size(); ++i) {
        if (argmax[i] >= g.size())
            throw shape_error("maxpool_vjp argmax index out of range");
        g.data[argmax[i]] += grad_out.data[i];
    }
    return g;
}

double inner(const Tensor& a, const Tensor& b) {
    if (!a.same_dims(b))
        throw shape_error("inner product dims mismatch: " +
                          dims_to_string(a.dims) + " vs " +
                          dims_to_string(b.dims));
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a.data[i] * b.data[i];
    return acc;
}

double sqnorm(const Tensor& a) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a.data[i] * a.data[i];
    return acc;
}

Tensor axpy(double alpha, const Tensor& a, const Tensor& b) {
    if (!a.same_dims(b))
        throw shape_error("axpy dims mismatch: " + dims_to_string(a.dims) +
                          " vs " + dims_to_string(b.dims));
    Tensor y = b;
    for (std::size_t i = 0; i < a.size(); ++i) y.data[i] += alpha * a.data[i];
    return y;
}

static_assert(std::endian::native == std::endian::little,
              "tensor file IO assumes a little-endian host");
static_assert(sizeof(float) == 4 && std::numeric_limits<float>::is_iec559,
              "tensor file IO requires IEEE-754 float32");

static const char kTnsMagic[8] = {'P', 'E', 'E', 'L', 'T', 'N', 'S', '1'};

void save_tns(const std::string& path, const Tensor& t) {
    require_finite(t, "tensor for " + path);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open " + path + " for writing");
    f.write(kTnsMagic, sizeof(kTnsMagic));
    const std::uint32_t rank = static_cast<std::uint32_t>(t.rank());
    f.write(reinterpret_cast<const char*>(&rank), 4);
    for (std::size_t d : t.dims) {
        const std::uint32_t e = static_cast<std::uint32_t>(d);
        f.write(reinterpret_cast<const char*>(&e), 4);
    }
    std::vector<float> buf(t.size());
    for (std::size_t i = 0; i < t.size(); ++i)
        buf[i] = static_cast<float>(t.data[i]);
    f.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * 4));
    if (!f) throw io_error("short write to " + path);
}

Tensor load_tns(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kTnsMagic, 8) != 0)
        throw io_error(path + ": bad magic, not a tensor file");
    std::uint32_t rank = 0;
    f.read(reinterpret_cast<char*>(&rank), 4);
    if (!f || rank > 8) throw io_error(path + ": bad rank field");
    std::vector<std::size_t> dims(rank);
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        std::uint32_t e = 0;
        f.read(reinterpret_cast<char*>(&e), 4);
        if (!f || e == 0) throw io_error(path + ": bad extent field");
        dims[i] = e;
        n *= e;
    }
    std::vector<float> buf(n);
    f.read(reinterpret_cast<char*>(buf.data()),
           static_cast<std::streamsize>(n * 4));
    if (!f) throw io_error(path + ": truncated payload");
    // Reject trailing bytes so corrupted files cannot pass silently.
    f.peek();
    if (!f.eof()) throw io_error(path + ": trailing bytes after payload");
    Tensor t = Tensor::zeros(dims);
    for (std::size_t i = 0; i < n; ++i) t.data[i] = buf[i];
    require_finite(t, path);
    return t;
}

} // namespace peel
