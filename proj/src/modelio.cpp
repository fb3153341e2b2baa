#include "peel/modelio.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "peel/rng.hpp"

namespace peel {

using ordered_json = nlohmann::ordered_json;
namespace fs = std::filesystem;

Tensor conv_apply(const ConvLayer& layer, const Tensor& x) {
    Tensor y = conv2d(x, layer.kernel, layer.geom);
    if (layer.has_bias) {
        const std::size_t O = y.dims[0], HW = y.dims[1] * y.dims[2];
        if (layer.bias.size() != O)
            throw shape_error("bias length " + std::to_string(layer.bias.size()) +
                              " does not match " + std::to_string(O) +
                              " output channels");
        for (std::size_t o = 0; o < O; ++o)
            for (std::size_t i = 0; i < HW; ++i)
                y.data[o * HW + i] += layer.bias[o];
    }
    return y;
}

Tensor conv_apply_adjoint(const ConvLayer& layer, const Tensor& grad_out,
                          const std::array<std::size_t, 3>& in_dims) {
    return conv2d_adjoint(grad_out, layer.kernel, layer.geom, in_dims);
}

std::array<std::size_t, 3> conv_out_dims(const ConvLayer& layer,
                                         const std::array<std::size_t, 3>& in) {
    if (layer.kernel.rank() != 4)
        throw shape_error("conv kernel must be rank-4, got " +
                          dims_to_string(layer.kernel.dims));
    if (layer.kernel.dims[1] != in[0])
        throw shape_error("conv expects " + std::to_string(layer.kernel.dims[1]) +
                          " input channels, got " + std::to_string(in[0]));
    auto hw = conv_output_hw(in[1], in[2], layer.kernel.dims[2],
                             layer.kernel.dims[3], layer.geom);
    return {layer.kernel.dims[0], hw[0], hw[1]};
}

std::array<std::size_t, 3> stem_layer_out_dims(const StemLayer& layer,
                                               const std::array<std::size_t, 3>& in) {
    switch (layer.kind) {
        case StemKind::conv:
            return conv_out_dims(layer.conv, in);
        case StemKind::relu:
        case StemKind::prelu:
            return in;
        case StemKind::batchnorm:
            if (layer.bn.gamma.size() != in[0])
                throw shape_error("batchnorm has " +
                                  std::to_string(layer.bn.gamma.size()) +
                                  " channels, input has " + std::to_string(in[0]));
            return in;
        case StemKind::maxpool: {
            const MaxPoolSpec& p = layer.pool;
            if (in[1] < p.k_h || in[2] < p.k_w)
                throw shape_error("maxpool window exceeds input extent");
            return {in[0], (in[1] - p.k_h) / p.stride_h + 1,
                    (in[2] - p.k_w) / p.stride_w + 1};
        }
    }
    throw validation_error("unknown stem layer kind");
}

std::array<std::size_t, 3> block_out_dims(const ResBlockSpec& block,
                                          const std::array<std::size_t, 3>& in) {
    auto hidden = conv_out_dims(block.w1, in);
    auto main_out = conv_out_dims(block.w2, hidden);
    auto skip_out = conv_out_dims(block.ws, in);
    if (main_out != skip_out)
        throw shape_error("skip branch produces " + dims_to_string({skip_out[0], skip_out[1], skip_out[2]}) +
                          " but main branch produces " +
                          dims_to_string({main_out[0], main_out[1], main_out[2]}));
    return main_out;
}

std::array<std::size_t, 3> validate_network(const NetworkSpec& spec) {
    if (spec.input_dims[0] == 0 || spec.input_dims[1] == 0 || spec.input_dims[2] == 0)
        throw validation_error("network input dims must be positive");
    if (spec.blocks.empty())
        throw validation_error("network must contain at least one residual block");
    auto dims = spec.input_dims;
    for (std::size_t i = 0; i < spec.stem.size(); ++i) {
        try {
            dims = stem_layer_out_dims(spec.stem[i], dims);
        } catch (const std::exception& e) {
            throw shape_error("stem layer " + std::to_string(i) + ": " + e.what());
        }
    }
    for (std::size_t i = 0; i < spec.blocks.size(); ++i) {
        try {
            dims = block_out_dims(spec.blocks[i], dims);
        } catch (const std::exception& e) {
            throw shape_error("block " + std::to_string(i) + ": " + e.what());
        }
    }
    return dims;
}

std::vector<std::array<std::size_t, 3>> block_input_dims(const NetworkSpec& spec) {
    auto dims = spec.input_dims;
    for (std::size_t i = 0; i < spec.stem.size(); ++i)
        dims = stem_layer_out_dims(spec.stem[i], dims);
    std::vector<std::array<std::size_t, 3>> out;
    out.reserve(spec.blocks.size());
    for (const auto& b : spec.blocks) {
        out.push_back(dims);
        dims = block_out_dims(b, dims);
    }
    return out;
}

static Tensor identity_1x1(std::size_t channels) {
    Tensor k = Tensor::zeros({channels, channels, 1, 1});
    for (std::size_t c = 0; c < channels; ++c) k.data[c * channels + c] = 1.0;
    return k;
}

static ConvLayer make_conv(std::size_t out_c, std::size_t in_c, std::size_t kh,
                           std::size_t kw, std::size_t stride, std::size_t pad) {
    ConvLayer l;
    l.kernel = Tensor::zeros({out_c, in_c, kh, kw});
    l.geom = ConvGeometry{stride, stride, pad, pad};
    return l;
}

static NetworkSpec load_manifest_file(const std::string& manifest_path);

NetworkSpec build_arch(const std::string& name,
                       const std::array<std::size_t, 3>& input_dims,
                       bool pooling, std::size_t stem_width,
                       bool uniform_stride) {
    static const std::map<std::string, std::array<std::size_t, 4>> presets = {
        {"resnet18", {2, 2, 2, 2}},
        {"resnet34", {3, 4, 6, 3}},
        {"resnet50a", {6, 8, 12, 6}},
        {"resnet152a", {3, 8, 36, 3}},
    };
    auto it = presets.find(name);
    if (it == presets.end()) {
        if (fs::exists(name)) return load_manifest_file(name);
        throw validation_error("unknown architecture '" + name +
                               "' (and no manifest file at that path)");
    }
    if (stem_width == 0)
        throw validation_error("stem width must be positive");
    const auto& counts = it->second;

    NetworkSpec spec;
    spec.input_dims = input_dims;

    // The uniform variant keeps the stem at stride 1 and swaps its relu for
    // a prelu: unlike the blocks, the stem has no skip path, so recovering
    // its input needs a bijective activation on top of the full-resolution
    // conv. Blocks keep relu (the skip already makes each block injective).
    StemLayer conv_l;
    conv_l.kind = StemKind::conv;
    conv_l.conv = make_conv(stem_width, input_dims[0], 7, 7,
                            uniform_stride ? 1 : 2, 3);
    spec.stem.push_back(conv_l);
    StemLayer act_l;
    act_l.kind = uniform_stride ? StemKind::prelu : StemKind::relu;
    act_l.prelu_a = 0.25;
    spec.stem.push_back(act_l);
    if (pooling) {
        StemLayer pool_l;
        pool_l.kind = StemKind::maxpool;
        pool_l.pool = MaxPoolSpec{2, 2, 2, 2};
        spec.stem.push_back(pool_l);
    }

    // Strided variant: widths grow x4 exactly where spatial extent shrinks
    // x4, so every block maps between spaces of equal dimension. Uniform
    // variant: all blocks stride-1, widths double per stage, so stage entries
    // expand dimensions 2x and every block stays injective.
    std::size_t prev_w = stem_width;
    for (std::size_t stage = 0; stage < 4; ++stage) {
        const std::size_t w = uniform_stride ? (stem_width << stage)
                                             : (stem_width << (2 * stage));
        for (std::size_t b = 0; b < counts[stage]; ++b) {
            const bool entry = (b == 0);
            const bool channel_change = entry && stage > 0;
            const std::size_t stride = (channel_change && !uniform_stride) ? 2 : 1;
            ResBlockSpec blk;
            blk.w1 = make_conv(w, prev_w, 3, 3, stride, 1);
            blk.w2 = make_conv(w, w, 3, 3, 1, 1);
            if (channel_change) {
                blk.ws = make_conv(w, prev_w, 1, 1, stride, 0);
            } else {
                blk.ws = make_conv(w, w, 1, 1, 1, 0);
                blk.ws.kernel = identity_1x1(w);
                blk.ws.identity = true;
            }
            blk.act.kind = Activation::relu;
            spec.blocks.push_back(std::move(blk));
            prev_w = w;
        }
    }
    validate_network(spec);
    return spec;
}

NetworkSpec random_init(NetworkSpec spec, const InitScheme& scheme) {
    if (scheme.sigma <= 0.0)
        throw validation_error("init sigma must be positive");
    if (scheme.gain <= 0.0)
        throw validation_error("init gain must be positive");
    std::uint64_t ordinal = 0;
    auto fill = [&](ConvLayer& l) {
        ++ordinal;
        if (l.identity) return; // identity skips stay exact
        GaussianRng rng(mix_seed(scheme.seed, ordinal));
        double sigma = scheme.sigma;
        if (scheme.kind == InitScheme::fan_in) {
            const double fan_in = static_cast<double>(
                l.kernel.dims[1] * l.kernel.dims[2] * l.kernel.dims[3]);
            sigma = std::sqrt(2.0 / fan_in);
        }
        rng.fill_normal(l.kernel, 0.0, sigma * scheme.gain);
        if (l.has_bias) std::fill(l.bias.begin(), l.bias.end(), 0.0);
    };
    for (auto& s : spec.stem)
        if (s.kind == StemKind::conv) fill(s.conv);
    for (auto& b : spec.blocks) {
        fill(b.w1);
        fill(b.w2);
        fill(b.ws);
    }
    return spec;
}

// ---------------------------------------------------------------------------
// Serialization: model.json + weights.bin (f32 little-endian, element
// offsets). Kernels are appended in traversal order: stem convs and
// batch-norms first, then per block w1, w2, ws; a conv's bias follows its
// kernel. Batch-norm blobs hold gamma, beta, mean, var consecutively.

namespace {

struct BlobWriter {
    std::vector<float> data;
    std::size_t append(const std::vector<double>& v) {
        const std::size_t off = data.size();
        for (double d : v) data.push_back(static_cast<float>(d));
        return off;
    }
};

ordered_json conv_to_json(const ConvLayer& l, BlobWriter& blob) {
    ordered_json j;
    j["type"] = "conv";
    j["out_channels"] = l.kernel.dims[0];
    j["in_channels"] = l.kernel.dims[1];
    j["kernel"] = {l.kernel.dims[2], l.kernel.dims[3]};
    j["stride"] = {l.geom.stride_h, l.geom.stride_w};
    j["pad"] = {l.geom.pad_h, l.geom.pad_w};
    j["identity"] = l.identity;
    j["offset"] = blob.append(l.kernel.data);
    if (l.has_bias) j["bias_offset"] = blob.append(l.bias);
    return j;
}

ordered_json stem_to_json(const StemLayer& s, BlobWriter& blob) {
    switch (s.kind) {
        case StemKind::conv:
            return conv_to_json(s.conv, blob);
        case StemKind::relu:
            return ordered_json{{"type", "relu"}};
        case StemKind::prelu:
            return ordered_json{{"type", "prelu"}, {"a", s.prelu_a}};
        case StemKind::maxpool:
            return ordered_json{{"type", "maxpool"},
                                {"kernel", {s.pool.k_h, s.pool.k_w}},
                                {"stride", {s.pool.stride_h, s.pool.stride_w}}};
        case StemKind::batchnorm: {
            ordered_json j;
            j["type"] = "batchnorm";
            j["channels"] = s.bn.gamma.size();
            j["eps"] = s.bn.eps;
            std::vector<double> all;
            all.insert(all.end(), s.bn.gamma.begin(), s.bn.gamma.end());
            all.insert(all.end(), s.bn.beta.begin(), s.bn.beta.end());
            all.insert(all.end(), s.bn.mean.begin(), s.bn.mean.end());
            all.insert(all.end(), s.bn.var.begin(), s.bn.var.end());
            j["offset"] = blob.append(all);
            return j;
        }
    }
    throw validation_error("unknown stem layer kind");
}

} // namespace

void save_model(const NetworkSpec& spec, const std::string& dir) {
    validate_network(spec);
    fs::create_directories(dir);
    BlobWriter blob;
    ordered_json j;
    j["format"] = "peel-model-v1";
    j["input_dims"] = {spec.input_dims[0], spec.input_dims[1], spec.input_dims[2]};
    j["stem"] = ordered_json::array();
    for (const auto& s : spec.stem) j["stem"].push_back(stem_to_json(s, blob));
    j["blocks"] = ordered_json::array();
    for (const auto& b : spec.blocks) {
        ordered_json jb;
        jb["w1"] = conv_to_json(b.w1, blob);
        jb["w2"] = conv_to_json(b.w2, blob);
        jb["ws"] = conv_to_json(b.ws, blob);
        if (b.act.kind == Activation::prelu)
            jb["activation"] = ordered_json{{"type", "prelu"}, {"a", b.act.a}};
        else
            jb["activation"] = ordered_json{{"type", "relu"}};
        j["blocks"].push_back(std::move(jb));
    }

    const fs::path manifest_path = fs::path(dir) / "model.json";
    std::ofstream mf(manifest_path);
    if (!mf) throw io_error("cannot write " + manifest_path.string());
    mf << j.dump(2) << "\n";
    if (!mf) throw io_error("short write to " + manifest_path.string());
    mf.close();

    const fs::path blob_path = fs::path(dir) / "weights.bin";
    std::ofstream bf(blob_path, std::ios::binary);
    if (!bf) throw io_error("cannot write " + blob_path.string());
    bf.write(reinterpret_cast<const char*>(blob.data.data()),
             static_cast<std::streamsize>(blob.data.size() * 4));
    if (!bf) throw io_error("short write to " + blob_path.string());
}

void save_tensor(const std::string& path, const Tensor& t) {
    if (t.rank() == 0) throw validation_error("cannot save a rank-0 tensor");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot write " + path);
    f << "TNS1\n" << t.rank();
    for (std::size_t d : t.dims) f << ' ' << d;
    f << '\n';
    f.write(reinterpret_cast<const char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!f) throw io_error("short write to " + path);
}

Tensor load_tensor(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open " + path);
    std::string magic;
    std::getline(f, magic);
    if (magic != "TNS1") throw io_error(path + ": not a TNS1 tensor file");
    std::size_t rank = 0;
    if (!(f >> rank)) throw io_error(path + ": unreadable rank");
    if (rank == 0 || rank > 8)
        throw validation_error(path + ": tensor rank " + std::to_string(rank) +
                               " out of range");
    std::vector<std::size_t> dims(rank);
    std::size_t total = 1;
    for (std::size_t& d : dims) {
        if (!(f >> d) || d == 0) throw io_error(path + ": bad extent");
        if (d > (std::size_t{1} << 32) / total)
            throw validation_error(path + ": tensor size overflows");
        total *= d;
    }
    if (f.get() != '\n') throw io_error(path + ": malformed header terminator");
    Tensor t = Tensor::zeros(dims);
    f.read(reinterpret_cast<char*>(t.data.data()),
           static_cast<std::streamsize>(total * sizeof(double)));
    if (static_cast<std::size_t>(f.gcount()) != total * sizeof(double))
        throw io_error(path + ": truncated tensor payload");
    return t;
}

namespace {

struct BlobReader {
    std::vector<float> data;
    bool present = false;
    std::vector<double> take(const ordered_json& j, const char* key,
                             std::size_t count, const std::string& where) {
        if (!present || !j.contains(key))
            return std::vector<double>(count, 0.0); // structure-only manifest
        const std::size_t off = j.at(key).get<std::size_t>();
        if (off + count > data.size())
            throw io_error(where + ": weight offset " + std::to_string(off) +
                           " + length " + std::to_string(count) +
                           " overruns blob of " + std::to_string(data.size()) +
                           " elements");
        std::vector<double> out(count);
        for (std::size_t i = 0; i < count; ++i) out[i] = data[off + i];
        return out;
    }
};

ConvLayer conv_from_json(const ordered_json& j, BlobReader& blob,
                         const std::string& where) {
    ConvLayer l;
    const std::size_t O = j.at("out_channels").get<std::size_t>();
    const std::size_t C = j.at("in_channels").get<std::size_t>();
    const auto k = j.at("kernel");
    const auto s = j.at("stride");
    const auto p = j.at("pad");
    if (!k.is_array() || k.size() != 2 || !s.is_array() || s.size() != 2 ||
        !p.is_array() || p.size() != 2)
        throw validation_error(where + ": kernel/stride/pad must be pairs");
    const std::size_t KH = k[0].get<std::size_t>(), KW = k[1].get<std::size_t>();
    if (O == 0 || C == 0 || KH == 0 || KW == 0)
        throw validation_error(where + ": conv extents must be positive");
    l.geom = ConvGeometry{s[0].get<std::size_t>(), s[1].get<std::size_t>(),
                          p[0].get<std::size_t>(), p[1].get<std::size_t>()};
    l.identity = j.value("identity", false);
    l.kernel = Tensor({O, C, KH, KW}, blob.take(j, "offset", O * C * KH * KW, where));
    if (j.contains("bias_offset")) {
        l.has_bias = true;
        l.bias = blob.take(j, "bias_offset", O, where);
    }
    return l;
}

NetworkSpec parse_manifest(const ordered_json& j, BlobReader& blob) {
    NetworkSpec spec;
    if (j.value("format", "") != std::string("peel-model-v1"))
        throw io_error("manifest missing format tag peel-model-v1");
    const auto in = j.at("input_dims");
    if (!in.is_array() || in.size() != 3)
        throw validation_error("input_dims must have three entries");
    spec.input_dims = {in[0].get<std::size_t>(), in[1].get<std::size_t>(),
                       in[2].get<std::size_t>()};

    std::size_t idx = 0;
    for (const auto& js : j.value("stem", ordered_json::array())) {
        const std::string where = "stem layer " + std::to_string(idx++);
        const std::string type = js.at("type").get<std::string>();
        StemLayer s;
        if (type == "conv") {
            s.kind = StemKind::conv;
            s.conv = conv_from_json(js, blob, where);
        } else if (type == "relu") {
            s.kind = StemKind::relu;
        } else if (type == "prelu") {
            s.kind = StemKind::prelu;
            s.prelu_a = js.at("a").get<double>();
        } else if (type == "maxpool") {
            s.kind = StemKind::maxpool;
            const auto k = js.at("kernel");
            const auto st = js.at("stride");
            s.pool = MaxPoolSpec{k[0].get<std::size_t>(), k[1].get<std::size_t>(),
                                 st[0].get<std::size_t>(), st[1].get<std::size_t>()};
        } else if (type == "batchnorm") {
            s.kind = StemKind::batchnorm;
            const std::size_t n = js.at("channels").get<std::size_t>();
            s.bn.eps = js.at("eps").get<double>();
            auto all = blob.take(js, "offset", 4 * n, where);
            s.bn.gamma.assign(all.begin(), all.begin() + n);
            s.bn.beta.assign(all.begin() + n, all.begin() + 2 * n);
            s.bn.mean.assign(all.begin() + 2 * n, all.begin() + 3 * n);
            s.bn.var.assign(all.begin() + 3 * n, all.begin() + 4 * n);
        } else {
            throw validation_error(where + ": unknown layer type '" + type + "'");
        }
        spec.stem.push_back(std::move(s));
    }

    idx = 0;
    for (const auto& jb : j.value("blocks", ordered_json::array())) {
        const std::string where = "block " + std::to_string(idx++);
        ResBlockSpec b;
        b.w1 = conv_from_json(jb.at("w1"), blob, where + " w1");
        b.w2 = conv_from_json(jb.at("w2"), blob, where + " w2");
        b.ws = conv_from_json(jb.at("ws"), blob, where + " ws");
        const auto& ja = jb.at("activation");
        const std::string at = ja.at("type").get<std::string>();
        if (at == "relu") {
            b.act.kind = Activation::relu;
        } else if (at == "prelu") {
            b.act.kind = Activation::prelu;
            b.act.a = ja.at("a").get<double>();
        } else {
            throw validation_error(where + ": unknown activation '" + at + "'");
        }
        spec.blocks.push_back(std::move(b));
    }

    validate_network(spec);
    for (const auto& s : spec.stem)
        if (s.kind == StemKind::conv) require_finite(s.conv.kernel, "stem conv kernel");
    for (const auto& b : spec.blocks) {
        require_finite(b.w1.kernel, "block w1 kernel");
        require_finite(b.w2.kernel, "block w2 kernel");
        require_finite(b.ws.kernel, "block ws kernel");
    }
    return spec;
}

ordered_json read_json_file(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw io_error("cannot open " + path.string());
    ordered_json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        throw io_error(path.string() + ": " + e.what());
    }
    return j;
}

} // namespace

static NetworkSpec load_manifest_file(const std::string& manifest_path) {
    const fs::path mp(manifest_path);
    BlobReader blob;
    const fs::path bp = mp.parent_path() / "weights.bin";
    if (fs::exists(bp)) {
        std::ifstream bf(bp, std::ios::binary);
        const auto size = fs::file_size(bp);
        if (size % 4 != 0) throw io_error(bp.string() + ": size not a multiple of 4");
        blob.data.resize(size / 4);
        bf.read(reinterpret_cast<char*>(blob.data.data()),
                static_cast<std::streamsize>(size));
        if (!bf) throw io_error(bp.string() + ": truncated read");
        blob.present = true;
    }
    return parse_manifest(read_json_file(mp), blob);
}

NetworkSpec load_model(const std::string& dir) {
    const fs::path mp = fs::path(dir) / "model.json";
    const fs::path bp = fs::path(dir) / "weights.bin";
    if (!fs::exists(mp)) throw io_error("missing manifest " + mp.string());
    if (!fs::exists(bp)) throw io_error("missing weight blob " + bp.string());
    return load_manifest_file(mp.string());
}

NetworkSpec fold_batchnorm(const NetworkSpec& spec) {
    NetworkSpec out = spec;
    std::vector<StemLayer> stem;
    for (std::size_t i = 0; i < out.stem.size(); ++i) {
        StemLayer& s = out.stem[i];
        if (s.kind != StemKind::batchnorm) {
            stem.push_back(std::move(s));
            continue;
        }
        if (stem.empty() || stem.back().kind != StemKind::conv)
            throw unsupported_structure_error(
                "stem layer " + std::to_string(i) +
                ": batchnorm must immediately follow a convolution to fold");
        ConvLayer& conv = stem.back().conv;
        const std::size_t O = conv.kernel.dims[0];
        const BatchNormLayer& bn = s.bn;
        if (bn.gamma.size() != O || bn.beta.size() != O || bn.mean.size() != O ||
            bn.var.size() != O)
            throw validation_error("stem layer " + std::to_string(i) +
                                   ": batchnorm channel count " +
                                   std::to_string(bn.gamma.size()) +
                                   " does not match conv output " +
                                   std::to_string(O));
        if (!conv.has_bias) {
            conv.has_bias = true;
            conv.bias.assign(O, 0.0);
        }
        const std::size_t per_out = conv.kernel.dims[1] * conv.kernel.dims[2] *
                                    conv.kernel.dims[3];
        for (std::size_t o = 0; o < O; ++o) {
            const double denom = bn.var[o] + bn.eps;
            if (!(denom > 0.0))
                throw validation_error("stem layer " + std::to_string(i) +
                                       ": batchnorm variance + eps must be positive");
            const double scale = bn.gamma[o] / std::sqrt(denom);
            for (std::size_t t = 0; t < per_out; ++t)
                conv.kernel.data[o * per_out + t] *= scale;
            conv.bias[o] = (conv.bias[o] - bn.mean[o]) * scale + bn.beta[o];
        }
        conv.identity = false; // kernel no longer a pure channel identity
    }
    out.stem = std::move(stem);
    return out;
}

} // namespace peel
