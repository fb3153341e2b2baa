// Command-line front end: generate models, run tapped inference, invert
// single blocks or whole networks, certify against the enumeration oracle,
// and score reconstructions. Every command writes a manifest next to its
// outputs recording the fully resolved configuration, seeds, and input
// hashes; given the same flags and inputs, outputs are byte-identical.
//
// Exit codes: 0 ok, 2 usage, 3 I/O, 4 validation, 5 solver divergence.
// Diagnostics go to standard error; structured results to files or stdout.

#include <CLI11.hpp>
#include <json.hpp>

#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "peel/errors.hpp"
#include "peel/forward.hpp"
#include "peel/image_io.hpp"
#include "peel/metrics.hpp"
#include "peel/modelio.hpp"
#include "peel/oracle.hpp"
#include "peel/pipeline.hpp"
#include "peel/rng.hpp"
#include "peel/tensor.hpp"

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

constexpr const char* kVersion = "1.0.0";

// Flag-level failures CLI11 cannot catch itself (bad PEEL_SEED, bad enums).
struct usage_error : std::runtime_error {
    explicit usage_error(const std::string& m) : std::runtime_error(m) {}
};

std::string hash_bytes(const std::string& bytes) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(h));
    return std::string("fnv1a64:") + buf;
}

std::string slurp_binary(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw peel::io_error("cannot open " + p.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

std::string hash_file(const fs::path& p) { return hash_bytes(slurp_binary(p)); }

// Model identity = hash over both files of the directory container.
std::string hash_model_dir(const fs::path& dir) {
    return hash_bytes(slurp_binary(dir / "model.json") +
                      slurp_binary(dir / "weights.bin"));
}

// Infinities serialize as strings; plain JSON has no sentinel for them.
ordered_json json_real(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return v;
}

ordered_json stats_json(const peel::SampleStats& s,
                        const std::vector<double>& values) {
    ordered_json j;
    j["mean"] = s.mean;
    j["stddev"] = s.stddev;
    j["values"] = values;
    return j;
}

struct ManifestWriter {
    ordered_json j;
    explicit ManifestWriter(const std::string& command) {
        j["tool"] = "peel";
        j["version"] = kVersion;
        j["command"] = command;
        j["config"] = ordered_json::object();
        j["seeds"] = ordered_json::object();
        j["input_hashes"] = ordered_json::object();
        j["outputs"] = ordered_json::array();
    }
    void write(const fs::path& path) const {
        std::ofstream f(path);
        if (!f) throw peel::io_error("cannot write " + path.string());
        f << j.dump(2) << "\n";
        if (!f) throw peel::io_error("short write to " + path.string());
    }
};

// --seed yields to the PEEL_SEED environment variable only when the flag was
// not given explicitly.
std::uint64_t resolve_seed(const CLI::Option* opt, std::uint64_t flag_value) {
    if (opt != nullptr && opt->count() > 0) return flag_value;
    const char* env = std::getenv("PEEL_SEED");
    if (env == nullptr || *env == '\0') return flag_value;
    std::uint64_t v = 0;
    const char* end = env + std::strlen(env);
    auto [p, ec] = std::from_chars(env, end, v, 10);
    if (ec != std::errc() || p != end)
        throw usage_error(std::string("PEEL_SEED must be an unsigned integer, got '") +
                          env + "'");
    return v;
}

// Images load on the 0-255 scale; .tns files carry raw values.
peel::Tensor load_input(const std::string& path) {
    const std::string ext = fs::path(path).extension().string();
    if (ext == ".ppm" || ext == ".pgm") return peel::read_image(path);
    if (ext == ".tns") return peel::load_tensor(path);
    throw peel::validation_error("unrecognized input extension on " + path +
                                 " (expected .ppm, .pgm, or .tns)");
}

std::string tap_filename(std::size_t block_1based) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "tap_%02zu.tns", block_1based);
    return buf;
}

// ---------------------------------------------------------------- penalty --

// One flag set shared by invert-block and peel; defaults marked "paper" come
// straight from the published procedure, "tuned" ones are this repo's.
struct PenaltyFlags {
    double lambda1 = 1000.0;
    double lambda2 = 1000.0;
    double lr = 0.01;
    long epochs = 2000;
    std::uint64_t seed = 0;
    double init_scale = 0.01;
    std::string comp = "scalar";
    bool early_stop = false;
    double early_stop_tol = 1e-10;
    bool refine = false;
    long restarts = 0;
    double restart_tol = 1e-4;
    CLI::Option* seed_opt = nullptr;
};

void add_penalty_flags(CLI::App* sub, PenaltyFlags& f) {
    sub->add_option("--lambda1", f.lambda1, "complementarity penalty weight (paper)")
        ->capture_default_str();
    sub->add_option("--lambda2", f.lambda2, "splitting penalty weight (paper)")
        ->capture_default_str();
    sub->add_option("--lr", f.lr, "adam learning rate (paper)")
        ->capture_default_str();
    sub->add_option("--epochs", f.epochs, "adam iterations per block (paper)")
        ->capture_default_str();
    f.seed_opt = sub->add_option("--seed", f.seed,
                                 "base RNG seed; PEEL_SEED overrides when unset (tuned)")
                     ->capture_default_str();
    sub->add_option("--init-scale", f.init_scale,
                    "stddev of the gaussian start (tuned)")
        ->capture_default_str();
    sub->add_option("--comp", f.comp,
                    "complementarity mode: scalar|elementwise (tuned)")
        ->capture_default_str();
    sub->add_flag("--early-stop", f.early_stop,
                  "stop once the objective crosses --early-stop-tol (tuned)");
    sub->add_option("--early-stop-tol", f.early_stop_tol,
                    "early-stop threshold relative to ||y||^2 (tuned)")
        ->capture_default_str();
    sub->add_flag("--refine", f.refine,
                  "pattern-restricted least-squares polish after the loop (tuned)");
    sub->add_option("--restarts", f.restarts,
                    "extra seeded attempts when the residual stays high (tuned)")
        ->capture_default_str();
    sub->add_option("--restart-tol", f.restart_tol,
                    "relative residual accepted without restarting (tuned)")
        ->capture_default_str();
}

peel::PenaltyConfig to_penalty_config(const PenaltyFlags& f) {
    peel::PenaltyConfig c;
    c.lambda1 = f.lambda1;
    c.lambda2 = f.lambda2;
    c.lr = f.lr;
    c.epochs = f.epochs;
    c.seed = resolve_seed(f.seed_opt, f.seed);
    c.init_scale = f.init_scale;
    if (f.comp == "scalar")
        c.comp_mode = peel::PenaltyConfig::scalar;
    else if (f.comp == "elementwise")
        c.comp_mode = peel::PenaltyConfig::elementwise;
    else
        throw usage_error("--comp must be scalar or elementwise, got '" + f.comp + "'");
    c.early_stop = f.early_stop;
    c.early_stop_tol = f.early_stop_tol;
    c.refine_pattern = f.refine;
    c.max_restarts = f.restarts;
    c.restart_tol = f.restart_tol;
    return c;
}

ordered_json penalty_config_json(const peel::PenaltyConfig& c) {
    ordered_json j;
    j["lambda1"] = c.lambda1;
    j["lambda2"] = c.lambda2;
    j["lr"] = c.lr;
    j["epochs"] = c.epochs;
    j["init_scale"] = c.init_scale;
    j["comp"] = c.comp_mode == peel::PenaltyConfig::scalar ? "scalar" : "elementwise";
    j["early_stop"] = c.early_stop;
    j["early_stop_tol"] = c.early_stop_tol;
    j["refine"] = c.refine_pattern;
    j["restarts"] = c.max_restarts;
    j["restart_tol"] = c.restart_tol;
    j["adam"] = {{"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps_adam}};
    return j;
}

// ---------------------------------------------------------------- shallow --

struct ShallowFlags {
    double lalpha = 1e-7;
    double lvbeta = 1e-6;
    double alpha = 6.0;
    double beta = 2.0;
    double lr = 0.1;
    long epochs = 2000;
    double box_lo = 0.0;
    double box_hi = 255.0;
};

void add_shallow_flags(CLI::App* sub, ShallowFlags& f) {
    sub->add_option("--sh-lalpha", f.lalpha, "sparsity regularizer weight (tuned)")
        ->capture_default_str();
    sub->add_option("--sh-lvbeta", f.lvbeta, "smoothness regularizer weight (tuned)")
        ->capture_default_str();
    sub->add_option("--sh-alpha", f.alpha, "sparsity exponent (paper)")
        ->capture_default_str();
    sub->add_option("--sh-beta", f.beta, "smoothness exponent (paper)")
        ->capture_default_str();
    sub->add_option("--sh-lr", f.lr, "stem-stage adam learning rate (tuned)")
        ->capture_default_str();
    sub->add_option("--sh-epochs", f.epochs, "stem-stage adam iterations (tuned)")
        ->capture_default_str();
    sub->add_option("--sh-box-lo", f.box_lo, "pixel box lower bound (tuned)")
        ->capture_default_str();
    sub->add_option("--sh-box-hi", f.box_hi, "pixel box upper bound (tuned)")
        ->capture_default_str();
}

peel::ShallowConfig to_shallow_config(const ShallowFlags& f, std::uint64_t seed) {
    peel::ShallowConfig c;
    c.lalpha = f.lalpha;
    c.lvbeta = f.lvbeta;
    c.alpha = f.alpha;
    c.beta = f.beta;
    c.lr = f.lr;
    c.epochs = f.epochs;
    c.seed = seed;
    c.box_lo = f.box_lo;
    c.box_hi = f.box_hi;
    return c;
}

ordered_json shallow_config_json(const peel::ShallowConfig& c) {
    ordered_json j;
    j["lalpha"] = c.lalpha;
    j["lvbeta"] = c.lvbeta;
    j["alpha"] = c.alpha;
    j["beta"] = c.beta;
    j["lr"] = c.lr;
    j["epochs"] = c.epochs;
    j["box"] = {c.box_lo, c.box_hi};
    j["adam"] = {{"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps_adam}};
    return j;
}

// -------------------------------------------------------------- gen-model --

struct GenModelArgs {
    std::string arch = "resnet18";
    std::string out;
    std::uint64_t seed = 0;
    std::string init = "fan_in";
    double sigma = 0.05;
    double gain = 1.0;
    bool pooling = true;
    double prelu_a = 0.25;
    std::vector<std::size_t> dims = {3, 64, 64};
    std::size_t stem_width = 4;
    bool uniform_stride = false;
    CLI::Option* seed_opt = nullptr;
    CLI::Option* prelu_opt = nullptr;
};

void run_gen_model(const GenModelArgs& a) {
    if (a.dims.size() != 3)
        throw usage_error("--input-dims takes exactly three values C,H,W");
    const std::uint64_t seed = resolve_seed(a.seed_opt, a.seed);
    peel::NetworkSpec net =
        peel::build_arch(a.arch, {a.dims[0], a.dims[1], a.dims[2]}, a.pooling,
                         a.stem_width, a.uniform_stride);
    const bool prelu_everywhere = a.prelu_opt->count() > 0;
    if (prelu_everywhere) {
        for (auto& b : net.blocks) {
            b.act.kind = peel::Activation::prelu;
            b.act.a = a.prelu_a;
        }
        for (auto& s : net.stem) {
            if (s.kind == peel::StemKind::relu) s.kind = peel::StemKind::prelu;
            if (s.kind == peel::StemKind::prelu) s.prelu_a = a.prelu_a;
        }
    }
    peel::InitScheme scheme;
    if (a.init == "fan_in")
        scheme.kind = peel::InitScheme::fan_in;
    else if (a.init == "gaussian")
        scheme.kind = peel::InitScheme::gaussian;
    else
        throw usage_error("--init must be fan_in or gaussian, got '" + a.init + "'");
    scheme.sigma = a.sigma;
    scheme.seed = seed;
    scheme.gain = a.gain;
    net = peel::random_init(std::move(net), scheme);
    peel::save_model(net, a.out);

    ManifestWriter m("gen-model");
    m.j["config"]["arch"] = a.arch;
    m.j["config"]["init"] = a.init;
    m.j["config"]["sigma"] = a.sigma;
    m.j["config"]["gain"] = a.gain;
    m.j["config"]["pooling"] = a.pooling;
    m.j["config"]["prelu"] =
        prelu_everywhere ? ordered_json(a.prelu_a) : ordered_json(nullptr);
    m.j["config"]["input_dims"] = a.dims;
    m.j["config"]["stem_width"] = a.stem_width;
    m.j["config"]["uniform_stride"] = a.uniform_stride;
    m.j["seeds"]["init"] = seed;
    if (fs::is_regular_file(a.arch))
        m.j["input_hashes"][a.arch] = hash_file(a.arch);
    m.j["model_hash"] = hash_model_dir(a.out);
    m.j["outputs"] = {"model.json", "weights.bin"};
    m.write(fs::path(a.out) / "manifest.json");
    std::cerr << "wrote model (" << net.blocks.size() << " blocks) to " << a.out
              << "\n";
}

// ---------------------------------------------------------------- forward --

struct ForwardArgs {
    std::string model, input, out_dir;
    bool save_taps = false;
};

void run_forward(const ForwardArgs& a) {
    const peel::NetworkSpec net = peel::load_model(a.model);
    const peel::Tensor x = load_input(a.input);
    if (x.rank() != 3 || x.dims[0] != net.input_dims[0] ||
        x.dims[1] != net.input_dims[1] || x.dims[2] != net.input_dims[2])
        throw peel::shape_error("input dims do not match the model's input_dims");
    const peel::TapTrace trace = peel::network_forward(x, net);

    fs::create_directories(a.out_dir);
    const fs::path out(a.out_dir);
    ManifestWriter m("forward");
    m.j["config"]["save_taps"] = a.save_taps;
    m.j["model_hash"] = hash_model_dir(a.model);
    m.j["input_hashes"][a.input] = hash_file(a.input);
    peel::save_tensor((out / "features.tns").string(), trace.final_output());
    m.j["outputs"].push_back("features.tns");
    if (a.save_taps) {
        peel::save_tensor((out / "stem.tns").string(), trace.phi0);
        m.j["outputs"].push_back("stem.tns");
        for (std::size_t l = 0; l < trace.taps.size(); ++l) {
            const std::string name = tap_filename(l + 1);
            peel::save_tensor((out / name).string(), trace.taps[l]);
            m.j["outputs"].push_back(name);
        }
    }
    m.write(out / "manifest.json");
    std::cerr << "forward pass done: " << trace.taps.size() << " blocks\n";
}

// ----------------------------------------------------------- invert-block --

struct InvertBlockArgs {
    std::string model, features, out_dir;
    std::size_t block = 1;
    bool save_trace = false;
    PenaltyFlags penalty;
};

ordered_json block_report_json(std::size_t block_1based,
                               const peel::InversionReport& r,
                               double y_norm) {
    ordered_json j;
    j["block"] = block_1based;
    j["data_residual"] = r.data_residual;
    j["relative_residual"] =
        y_norm > 0.0 ? ordered_json(r.data_residual / y_norm) : ordered_json(nullptr);
    j["split_violation"] = r.split_violation;
    j["complementarity"] = r.complementarity;
    j["final_objective"] = r.final_objective;
    j["epochs_run"] = r.epochs_run;
    j["attempts"] = r.attempts;
    return j;
}

void run_invert_block(const InvertBlockArgs& a) {
    const peel::NetworkSpec net = peel::load_model(a.model);
    if (a.block < 1 || a.block > net.blocks.size())
        throw peel::validation_error(
            "block index " + std::to_string(a.block) + " outside 1.." +
            std::to_string(net.blocks.size()));
    const peel::Tensor y = peel::load_tensor(a.features);
    const auto in_dims = peel::block_input_dims(net)[a.block - 1];
    const peel::PenaltyConfig cfg = to_penalty_config(a.penalty);
    const peel::BlockInversion inv =
        peel::invert_block(y, net.blocks[a.block - 1], in_dims, cfg);

    fs::create_directories(a.out_dir);
    const fs::path out(a.out_dir);
    peel::save_tensor((out / "x_hat.tns").string(), inv.x_hat);
    ordered_json report =
        block_report_json(a.block, inv.report, std::sqrt(peel::sqnorm(y)));
    {
        std::ofstream f(out / "report.json");
        if (!f) throw peel::io_error("cannot write report.json");
        f << report.dump(2) << "\n";
    }
    ManifestWriter m("invert-block");
    m.j["config"]["block"] = a.block;
    m.j["config"]["penalty"] = penalty_config_json(cfg);
    m.j["config"]["save_trace"] = a.save_trace;
    m.j["seeds"]["penalty"] = cfg.seed;
    m.j["model_hash"] = hash_model_dir(a.model);
    m.j["input_hashes"][a.features] = hash_file(a.features);
    m.j["outputs"] = {"x_hat.tns", "report.json"};
    if (a.save_trace) {
        peel::Tensor tr = peel::Tensor::zeros({inv.report.trace.size()});
        tr.data = inv.report.trace;
        peel::save_tensor((out / "trace.tns").string(), tr);
        m.j["outputs"].push_back("trace.tns");
    }
    m.write(out / "manifest.json");
    std::cerr << "block " << a.block << ": data residual "
              << inv.report.data_residual << " after " << inv.report.attempts
              << " attempt(s)\n";
}

// ------------------------------------------------------------------- peel --

struct PeelArgs {
    std::string model, features, out;
    std::string report;     // defaults next to --out
    std::string taps;       // optional truth-tap directory
    long runs = 1;
    double fail_threshold = 1e-2;
    PenaltyFlags penalty;
    ShallowFlags shallow;
};

peel::TapTrace load_taps(const fs::path& dir, std::size_t n_blocks) {
    peel::TapTrace t;
    t.phi0 = peel::load_tensor((dir / "stem.tns").string());
    for (std::size_t l = 1; l <= n_blocks; ++l)
        t.taps.push_back(peel::load_tensor((dir / tap_filename(l)).string()));
    return t;
}

void run_peel(const PeelArgs& a) {
    if (a.runs < 1) throw usage_error("--runs must be at least 1");
    const peel::NetworkSpec net = peel::load_model(a.model);
    const peel::Tensor y = peel::load_tensor(a.features);
    const std::size_t n = net.blocks.size();
    const peel::PenaltyConfig base_pc = to_penalty_config(a.penalty);
    const peel::ShallowConfig base_sc = to_shallow_config(a.shallow, base_pc.seed);

    std::optional<peel::TapTrace> truth;
    if (!a.taps.empty()) truth = load_taps(a.taps, n);

    // Per-layer samples across runs, indexed by stage order (deepest first).
    std::vector<std::vector<double>> rel_residual(n), truth_err(n);
    std::vector<double> stem_residual;
    std::optional<peel::PeelRun> first_run;
    std::vector<std::uint64_t> run_seeds;
    for (long r = 0; r < a.runs; ++r) {
        peel::PenaltyConfig pc = base_pc;
        peel::ShallowConfig sc = base_sc;
        if (r > 0) {
            pc.seed = peel::mix_seed(base_pc.seed, 7000000u + static_cast<std::uint64_t>(r));
            sc.seed = peel::mix_seed(base_sc.seed, 8000000u + static_cast<std::uint64_t>(r));
        }
        run_seeds.push_back(pc.seed);
        const peel::PeelRun run =
            peel::peel_network(y, net, pc, sc, truth ? &*truth : nullptr);
        for (std::size_t i = 0; i < run.stages.size(); ++i) {
            const peel::Tensor& y_stage =
                i == 0 ? y : run.stages[i - 1].inv.x_hat;
            const double yn = std::sqrt(peel::sqnorm(y_stage));
            rel_residual[i].push_back(
                yn > 0.0 ? run.stages[i].inv.report.data_residual / yn : 0.0);
            if (run.stages[i].truth_error)
                truth_err[i].push_back(*run.stages[i].truth_error);
            std::cerr << "run " << r << " block " << run.stages[i].block
                      << ": relative residual " << rel_residual[i].back() << "\n";
        }
        if (run.shallow_ran)
            stem_residual.push_back(
                std::sqrt(run.shallow.report.final_fidelity));
        if (r == 0) first_run = run;
    }

    // Per-layer table, deepest stage first, matching the stage order.
    ordered_json layers = ordered_json::array();
    bool flagged = false;
    std::printf("%6s  %-24s  %s\n", "layer", "relative_residual", "truth_error");
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t block_1based = first_run->stages[i].block;
        const auto rs = peel::sample_stats(rel_residual[i]);
        ordered_json row;
        row["layer"] = block_1based;
        row["relative_residual"] = stats_json(rs, rel_residual[i]);
        if (rs.mean > a.fail_threshold) flagged = true;
        char left[40];
        std::snprintf(left, sizeof left, "%.3e \xc2\xb1 %.1e", rs.mean, rs.stddev);
        if (!truth_err[i].empty()) {
            const auto ts = peel::sample_stats(truth_err[i]);
            row["truth_error"] = stats_json(ts, truth_err[i]);
            if (ts.mean > a.fail_threshold) flagged = true;
            std::printf("%6zu  %-24s  %.3e \xc2\xb1 %.1e\n", block_1based, left,
                        ts.mean, ts.stddev);
        } else {
            row["truth_error"] = nullptr;
            std::printf("%6zu  %-24s  -\n", block_1based, left);
        }
        layers.push_back(std::move(row));
    }
    if (!stem_residual.empty()) {
        const auto ss = peel::sample_stats(stem_residual);
        ordered_json row;
        row["layer"] = "stem";
        row["feature_residual"] = stats_json(ss, stem_residual);
        layers.push_back(std::move(row));
        if (ss.mean > a.fail_threshold) flagged = true;
        std::printf("%6s  %.3e \xc2\xb1 %.1e\n", "stem", ss.mean, ss.stddev);
    }

    const fs::path out_path(a.out);
    const fs::path out_dir =
        out_path.parent_path().empty() ? fs::path(".") : out_path.parent_path();
    fs::create_directories(out_dir);
    const fs::path report_path =
        a.report.empty() ? out_dir / "report.json" : fs::path(a.report);

    // Reconstruction artifacts come from the first run.
    const peel::Tensor& recon = first_run->image;
    const fs::path recon_tns = out_dir / "recon.tns";
    peel::save_tensor(recon_tns.string(), recon);
    const std::string ext = out_path.extension().string();
    std::size_t clamped = 0;
    bool wrote_image = false;
    if (ext == ".ppm" || ext == ".pgm") {
        const std::size_t want_c = ext == ".ppm" ? 3 : 1;
        if (recon.rank() != 3 || recon.dims[0] != want_c)
            throw peel::validation_error(
                "--out extension " + ext + " expects " +
                std::to_string(want_c) + " channel(s), reconstruction has " +
                std::to_string(recon.dims[0]));
        clamped = peel::write_image(out_path.string(), recon).clamped;
        wrote_image = true;
    } else if (ext != ".tns") {
        throw usage_error("--out must end in .ppm, .pgm, or .tns");
    } else if (out_path != recon_tns) {
        peel::save_tensor(out_path.string(), recon);
    }

    ordered_json report;
    report["runs"] = a.runs;
    report["fail_threshold"] = a.fail_threshold;
    report["flagged"] = flagged;
    report["layers"] = std::move(layers);
    {
        std::ofstream f(report_path);
        if (!f) throw peel::io_error("cannot write " + report_path.string());
        f << report.dump(2) << "\n";
    }

    ManifestWriter m("peel");
    m.j["config"]["runs"] = a.runs;
    m.j["config"]["fail_threshold"] = a.fail_threshold;
    m.j["config"]["penalty"] = penalty_config_json(base_pc);
    m.j["config"]["shallow"] = shallow_config_json(base_sc);
    m.j["config"]["taps"] = a.taps.empty() ? ordered_json(nullptr) : ordered_json(a.taps);
    m.j["seeds"]["base"] = base_pc.seed;
    m.j["seeds"]["runs"] = run_seeds;
    m.j["model_hash"] = hash_model_dir(a.model);
    m.j["input_hashes"][a.features] = hash_file(a.features);
    if (wrote_image) m.j["outputs"].push_back(out_path.filename().string());
    m.j["outputs"].push_back(recon_tns.filename().string());
    m.j["outputs"].push_back(report_path.filename().string());
    m.j["clamped"] = clamped;
    if (flagged)
        std::cerr << "warning: mean error above " << a.fail_threshold
                  << " on at least one layer; reconstruction is unreliable\n";
    m.write(out_dir / "manifest.json");
}

// ----------------------------------------------------------------- oracle --

struct OracleArgs {
    std::string model, features, out_dir;
    std::size_t block = 1;
    std::size_t max_hidden = 14;
};

void run_oracle(const OracleArgs& a) {
    const peel::NetworkSpec net = peel::load_model(a.model);
    if (a.block < 1 || a.block > net.blocks.size())
        throw peel::validation_error(
            "block index " + std::to_string(a.block) + " outside 1.." +
            std::to_string(net.blocks.size()));
    const peel::Tensor y = peel::load_tensor(a.features);
    const auto in_dims = peel::block_input_dims(net)[a.block - 1];
    const peel::OracleResult res =
        peel::oracle_invert_block(y, net.blocks[a.block - 1], in_dims, a.max_hidden);

    fs::create_directories(a.out_dir);
    const fs::path out(a.out_dir);
    peel::save_tensor((out / "x_star.tns").string(), res.x_star);
    ordered_json report;
    report["block"] = a.block;
    report["objective"] = res.objective;
    report["residual"] = res.residual;
    report["hidden_units"] = res.pattern.size();
    std::string bits(res.pattern.size(), '0');
    for (std::size_t i = 0; i < res.pattern.size(); ++i)
        if (res.pattern[i]) bits[i] = '1';
    report["pattern"] = bits;
    report["pattern_index"] = res.pattern_index;
    {
        std::ofstream f(out / "report.json");
        if (!f) throw peel::io_error("cannot write report.json");
        f << report.dump(2) << "\n";
    }
    ManifestWriter m("oracle");
    m.j["config"]["block"] = a.block;
    m.j["config"]["max_hidden"] = a.max_hidden;
    m.j["model_hash"] = hash_model_dir(a.model);
    m.j["input_hashes"][a.features] = hash_file(a.features);
    m.j["outputs"] = {"x_star.tns", "report.json"};
    m.write(out / "manifest.json");
    std::cerr << "oracle objective " << res.objective << " over "
              << (1ull << res.pattern.size()) << " patterns\n";
}

// ---------------------------------------------------------------- metrics --

struct MetricsArgs {
    std::string ref, test, out;
    double max_val = 255.0;
};

void run_metrics(const MetricsArgs& a) {
    const peel::Tensor ref = load_input(a.ref);
    const peel::Tensor test = load_input(a.test);
    const double m = peel::mse(ref, test);
    ordered_json j;
    j["mse"] = m;
    j["psnr"] = json_real(peel::psnr(m, a.max_val));
    j["relative_error"] = peel::relative_error(test, ref);
    j["max_val"] = a.max_val;
    j["dims"] = ref.dims;
    const std::string text = j.dump(2) + "\n";
    std::fputs(text.c_str(), stdout);
    if (!a.out.empty()) {
        std::ofstream f(a.out);
        if (!f) throw peel::io_error("cannot write " + a.out);
        f << text;
        ManifestWriter man("metrics");
        man.j["config"]["max_val"] = a.max_val;
        man.j["input_hashes"][a.ref] = hash_file(a.ref);
        man.j["input_hashes"][a.test] = hash_file(a.test);
        man.j["outputs"] = {fs::path(a.out).filename().string()};
        const fs::path dir = fs::path(a.out).parent_path();
        man.write((dir.empty() ? fs::path(".") : dir) / "manifest.json");
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"residual-network input reconstruction toolkit"};
    app.set_version_flag("--version", std::string("peel ") + kVersion);
    app.require_subcommand(1);

    GenModelArgs gen;
    CLI::App* sub_gen = app.add_subcommand("gen-model", "generate a random model directory");
    sub_gen->add_option("--arch", gen.arch,
                        "preset name (resnet18, resnet34, resnet50a, resnet152a) or manifest path (tuned)")
        ->capture_default_str();
    sub_gen->add_option("--out", gen.out, "output model directory")->required();
    gen.seed_opt = sub_gen->add_option("--seed", gen.seed,
                                       "init seed; PEEL_SEED overrides when unset (tuned)")
                       ->capture_default_str();
    sub_gen->add_option("--init", gen.init, "weight scheme: fan_in|gaussian (tuned)")
        ->capture_default_str();
    sub_gen->add_option("--sigma", gen.sigma, "gaussian-scheme stddev (tuned)")
        ->capture_default_str();
    sub_gen->add_option("--gain", gen.gain, "kernel scale multiplier (tuned)")
        ->capture_default_str();
    sub_gen->add_option("--pooling", gen.pooling, "max-pool after the stem (tuned)")
        ->capture_default_str();
    gen.prelu_opt = sub_gen->add_option("--prelu", gen.prelu_a,
                                        "make every activation a prelu with this slope (tuned)");
    sub_gen->add_option("--input-dims", gen.dims, "input dims C,H,W (tuned)")
        ->delimiter(',')
        ->capture_default_str();
    sub_gen->add_option("--stem-width", gen.stem_width, "stem output channels (tuned)")
        ->capture_default_str();
    sub_gen->add_option("--uniform-stride", gen.uniform_stride,
                        "stride-1 variant with width doubling (tuned)")
        ->capture_default_str();
    sub_gen->callback([&] { run_gen_model(gen); });

    ForwardArgs fwd;
    CLI::App* sub_fwd = app.add_subcommand("forward", "run the network and save feature taps");
    sub_fwd->add_option("--model", fwd.model, "model directory")->required();
    sub_fwd->add_option("--input", fwd.input, "input image (.ppm/.pgm) or tensor (.tns)")
        ->required();
    sub_fwd->add_option("--out-dir", fwd.out_dir, "output directory")->required();
    sub_fwd->add_flag("--save-taps", fwd.save_taps,
                      "also save the stem output and every block output");
    sub_fwd->callback([&] { run_forward(fwd); });

    InvertBlockArgs ib;
    CLI::App* sub_ib = app.add_subcommand("invert-block", "invert one residual block");
    sub_ib->add_option("--model", ib.model, "model directory")->required();
    sub_ib->add_option("--block", ib.block, "1-based block index")->required();
    sub_ib->add_option("--features", ib.features, "observed block output (.tns)")
        ->required();
    sub_ib->add_option("--out-dir", ib.out_dir, "output directory")->required();
    sub_ib->add_flag("--save-trace", ib.save_trace, "save the objective trace");
    add_penalty_flags(sub_ib, ib.penalty);
    sub_ib->callback([&] { run_invert_block(ib); });

    PeelArgs pl;
    CLI::App* sub_pl = app.add_subcommand(
        "peel", "reconstruct the network input from deep features");
    sub_pl->add_option("--model", pl.model, "model directory")->required();
    sub_pl->add_option("--features", pl.features, "deepest feature map (.tns)")
        ->required();
    sub_pl->add_option("--out", pl.out, "reconstruction path (.ppm/.pgm/.tns)")
        ->required();
    sub_pl->add_option("--report", pl.report,
                       "report path (default: report.json next to --out)");
    sub_pl->add_option("--taps", pl.taps,
                       "forward --save-taps directory for truth scoring");
    sub_pl->add_option("--runs", pl.runs, "seeded repetitions aggregated in the table (tuned)")
        ->capture_default_str();
    sub_pl->add_option("--fail-threshold", pl.fail_threshold,
                       "mean error level that flags the run (tuned)")
        ->capture_default_str();
    add_penalty_flags(sub_pl, pl.penalty);
    add_shallow_flags(sub_pl, pl.shallow);
    sub_pl->callback([&] { run_peel(pl); });

    OracleArgs orc;
    CLI::App* sub_orc = app.add_subcommand(
        "oracle", "exact block inversion by activation-pattern enumeration");
    sub_orc->add_option("--model", orc.model, "model directory")->required();
    sub_orc->add_option("--block", orc.block, "1-based block index")->required();
    sub_orc->add_option("--features", orc.features, "observed block output (.tns)")
        ->required();
    sub_orc->add_option("--out-dir", orc.out_dir, "output directory")->required();
    sub_orc->add_option("--max-hidden", orc.max_hidden,
                        "largest hidden width to enumerate (tuned)")
        ->capture_default_str();
    sub_orc->callback([&] { run_oracle(orc); });

    MetricsArgs met;
    CLI::App* sub_met = app.add_subcommand("metrics", "score a reconstruction against a reference");
    sub_met->add_option("--ref", met.ref, "reference image or tensor")->required();
    sub_met->add_option("--test", met.test, "reconstruction to score")->required();
    sub_met->add_option("--max-val", met.max_val, "psnr peak value (paper scale)")
        ->capture_default_str();
    sub_met->add_option("--out", met.out, "also write the JSON here");
    sub_met->callback([&] { run_metrics(met); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    } catch (const usage_error& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const peel::io_error& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 3;
    } catch (const peel::diverged_error& e) {
        std::cerr << "solver diverged: " << e.what() << "\n";
        return 5;
    } catch (const std::exception& e) {
        // shape/validation/unsupported-structure/rank-deficiency and anything
        // else input-dependent.
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    }
    return 0;
}
