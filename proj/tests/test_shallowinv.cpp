#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "peel/forward.hpp"
#include "peel/modelio.hpp"
#include "peel/rng.hpp"
#include "peel/shallowinv.hpp"

using namespace peel;
using testutil::fd_partial;
using testutil::random_tensor;
using testutil::rel_err_tensor;

namespace {

// Stem-free network: the "stem" is the identity on input_dims.
NetworkSpec empty_stem(std::array<std::size_t, 3> dims) {
    NetworkSpec net;
    net.input_dims = dims;
    return net;
}

// conv(3x3) -> prelu -> maxpool(2x2/2), the richest stem shape we invert.
NetworkSpec conv_prelu_pool_stem(std::size_t c_in, std::size_t c_out,
                                 std::size_t side, std::uint64_t seed) {
    NetworkSpec net;
    net.input_dims = {c_in, side, side};
    StemLayer conv;
    conv.kind = StemKind::conv;
    conv.conv.kernel =
        random_tensor({c_out, c_in, 3, 3}, seed, std::sqrt(2.0 / (9.0 * c_in)));
    conv.conv.geom = ConvGeometry{1, 1, 1, 1};
    net.stem.push_back(conv);
    StemLayer act;
    act.kind = StemKind::prelu;
    act.prelu_a = 0.25;
    net.stem.push_back(act);
    StemLayer pool;
    pool.kind = StemKind::maxpool;
    pool.pool = MaxPoolSpec{2, 2, 2, 2};
    net.stem.push_back(pool);
    return net;
}

double mean_of(const Tensor& t) {
    double acc = 0;
    for (double v : t.data) acc += v;
    return acc / static_cast<double>(t.size());
}

} // namespace

TEST_CASE("alpha norm matches hand values and sums coordinatewise powers") {
    Tensor z = Tensor::zeros({2, 3, 3});
    CHECK(alpha_norm(z, 6.0) == 0.0);
    Tensor x = Tensor::zeros({1, 1, 2});
    x.data[0] = 1.0;
    x.data[1] = 2.0;
    CHECK(alpha_norm(x, 6.0) == doctest::Approx(65.0).epsilon(1e-14));
    x.data[0] = -1.0; // even power: sign must not matter
    CHECK(alpha_norm(x, 6.0) == doctest::Approx(65.0).epsilon(1e-14));
    CHECK(alpha_norm(x, 1.0) == doctest::Approx(3.0).epsilon(1e-14));
}

TEST_CASE("alpha norm gradient matches finite differences away from zero") {
    Tensor x = random_tensor({2, 4, 4}, 31);
    const double alpha = 6.0;
    Tensor g = alpha_norm_grad(x, alpha);
    auto f = [&](const Tensor& t) { return alpha_norm(t, alpha); };
    int points = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (std::abs(x.data[i]) < 0.05) continue; // keep fd well conditioned
        const double fd = fd_partial(f, x, i);
        CHECK(g.data[i] == doctest::Approx(fd).epsilon(1e-6));
        ++points;
    }
    CHECK(points >= 20);
    // Exactly zero coordinates get a zero subgradient, not a NaN.
    Tensor y = Tensor::zeros({1, 2, 2});
    Tensor gy = alpha_norm_grad(y, 1.5);
    for (double v : gy.data) CHECK(v == 0.0);
}

TEST_CASE("tv norm: flat images cost zero and a 2x2 ramp has a hand value") {
    Tensor flat = Tensor::zeros({3, 5, 5});
    for (double& v : flat.data) v = 7.25;
    CHECK(tv_norm(flat, 2.0) == 0.0);
    CHECK(tv_norm(flat, 1.3) == 0.0);

    // x = [[0,1],[2,3]]: squared forward diffs are 5, 4, 1, 0.
    Tensor x = Tensor::zeros({1, 2, 2});
    x.at(0, 0, 0) = 0.0;
    x.at(0, 0, 1) = 1.0;
    x.at(0, 1, 0) = 2.0;
    x.at(0, 1, 1) = 3.0;
    CHECK(tv_norm(x, 2.0) == doctest::Approx(10.0).epsilon(1e-14));
    CHECK(tv_norm(x, 1.0) ==
          doctest::Approx(std::sqrt(5.0) + 2.0 + 1.0).epsilon(1e-14));
}

TEST_CASE("tv norm agrees with an independent double-loop recomputation") {
    Tensor x = random_tensor({2, 5, 6}, 57);
    for (double beta : {2.0, 1.3}) {
        double want = 0.0;
        for (std::size_t c = 0; c < 2; ++c)
            for (std::size_t i = 0; i < 5; ++i)
                for (std::size_t j = 0; j < 6; ++j) {
                    double dh = 0.0, dv = 0.0;
                    if (j + 1 < 6) dh = x.at(c, i, j + 1) - x.at(c, i, j);
                    if (i + 1 < 5) dv = x.at(c, i + 1, j) - x.at(c, i, j);
                    want += std::pow(dh * dh + dv * dv, beta / 2.0);
                }
        CHECK(tv_norm(x, beta) == doctest::Approx(want).epsilon(1e-13));
    }
}

TEST_CASE("tv norm gradient matches finite differences") {
    Tensor x = random_tensor({1, 8, 8}, 58);
    for (double beta : {2.0, 1.3}) {
        Tensor g = tv_norm_grad(x, beta);
        auto f = [&](const Tensor& t) { return tv_norm(t, beta); };
        int points = 0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double fd = fd_partial(f, x, i);
            CHECK(g.data[i] == doctest::Approx(fd).epsilon(1e-5).scale(1.0));
            ++points;
        }
        CHECK(points == 64);
    }
}

TEST_CASE("tv norm rejects non-images") {
    Tensor r2 = Tensor::zeros({4, 4});
    CHECK_THROWS_AS(tv_norm(r2, 2.0), shape_error);
    CHECK_THROWS_AS(tv_norm_grad(r2, 2.0), shape_error);
    Tensor thin = Tensor::zeros({1, 1, 5});
    CHECK_THROWS_AS(tv_norm(thin, 2.0), shape_error);
    Tensor narrow = Tensor::zeros({1, 5, 1});
    CHECK_THROWS_AS(tv_norm_grad(narrow, 2.0), shape_error);
}

TEST_CASE("stem objective vanishes identically at an exact preimage") {
    NetworkSpec net = conv_prelu_pool_stem(2, 3, 8, 61);
    Tensor x = random_tensor({2, 8, 8}, 62);
    Tensor target = stem_forward(x, net).out;
    ShallowConfig cfg;
    cfg.lalpha = 0.0;
    cfg.lvbeta = 0.0;
    ShallowEval ev = shallow_objective(x, target, net, cfg);
    CHECK(ev.value == 0.0);
    CHECK(ev.fidelity == 0.0);
    for (double v : ev.grad.data) CHECK(v == 0.0);
}

TEST_CASE("stem objective gradient matches finite differences") {
    NetworkSpec net = conv_prelu_pool_stem(2, 3, 8, 63);
    Tensor x = random_tensor({2, 8, 8}, 64);
    Tensor target = stem_forward(random_tensor({2, 8, 8}, 65), net).out;
    ShallowConfig cfg;
    cfg.lalpha = 3e-3; // exercise every term of the objective
    cfg.alpha = 6.0;
    cfg.lvbeta = 2e-3;
    cfg.beta = 2.0;
    ShallowEval ev = shallow_objective(x, target, net, cfg);
    auto f = [&](const Tensor& t) {
        return shallow_objective(t, target, net, cfg).value;
    };
    int points = 0;
    for (std::size_t i = 0; i < x.size(); i += 2) {
        const double fd = fd_partial(f, x, i);
        CHECK(ev.grad.data[i] == doctest::Approx(fd).epsilon(1e-5).scale(1.0));
        ++points;
    }
    CHECK(points >= 50);
}

TEST_CASE("stem-free inversion returns the target itself") {
    NetworkSpec net = empty_stem({3, 6, 6});
    Tensor target = Tensor::zeros({3, 6, 6});
    GaussianRng g(5);
    g.fill_normal(target, 100.0, 20.0);
    ShallowConfig cfg;
    cfg.lalpha = 0.0;
    cfg.lvbeta = 0.0;
    cfg.lr = 1.0;
    cfg.epochs = 1500;
    cfg.seed = 3;
    cfg.box_lo = 0.0;
    cfg.box_hi = 255.0;
    ShallowInversion inv = invert_shallow(target, net, cfg);
    CHECK(rel_err_tensor(inv.x_star, target) < 1e-8);
    CHECK(inv.report.final_fidelity < 1e-16);
    CHECK(inv.report.epochs_run == 1500);
    CHECK(inv.report.trace.size() == 1500);
    CHECK(inv.report.wall_seconds > 0.0);
}

TEST_CASE("a positive scalar conv stem inverts to target over the scale") {
    NetworkSpec net;
    net.input_dims = {2, 5, 5};
    StemLayer conv;
    conv.kind = StemKind::conv;
    conv.conv.kernel = Tensor::zeros({2, 2, 1, 1});
    conv.conv.kernel.data[0] = 2.0;
    conv.conv.kernel.data[3] = 2.0;
    conv.conv.geom = ConvGeometry{};
    net.stem.push_back(conv);

    Tensor x_true = Tensor::zeros({2, 5, 5});
    GaussianRng g(9);
    g.fill_normal(x_true, 60.0, 10.0);
    Tensor target = stem_forward(x_true, net).out;

    ShallowConfig cfg;
    cfg.lalpha = 0.0;
    cfg.lvbeta = 0.0;
    cfg.lr = 1.0;
    cfg.epochs = 1500;
    cfg.seed = 4;
    cfg.box_lo = 0.0;
    cfg.box_hi = 255.0;
    ShallowInversion inv = invert_shallow(target, net, cfg);
    CHECK(rel_err_tensor(inv.x_star, x_true) < 1e-6);
}

TEST_CASE("the sparsity term pulls recovered pixels toward zero") {
    NetworkSpec net = empty_stem({1, 4, 4});
    Tensor target = Tensor::zeros({1, 4, 4});
    for (double& v : target.data) v = 100.0;
    ShallowConfig cfg;
    cfg.lvbeta = 0.0;
    cfg.lr = 0.1;
    cfg.epochs = 3000;
    cfg.seed = 8;
    cfg.box_lo = 0.0;
    cfg.box_hi = 255.0;

    cfg.lalpha = 0.0;
    double plain = mean_of(invert_shallow(target, net, cfg).x_star);
    cfg.lalpha = 1e-9;
    cfg.alpha = 6.0;
    double pulled = mean_of(invert_shallow(target, net, cfg).x_star);
    CHECK(plain > 99.5);
    CHECK(pulled < 95.0);
}

TEST_CASE("the smoothness term flattens a recovered checkerboard") {
    NetworkSpec net = empty_stem({1, 6, 6});
    Tensor target = Tensor::zeros({1, 6, 6});
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 6; ++j)
            target.at(0, i, j) = ((i + j) % 2) ? 150.0 : 50.0;
    ShallowConfig cfg;
    cfg.lalpha = 0.0;
    cfg.beta = 2.0;
    cfg.lr = 0.1;
    cfg.epochs = 3000;
    cfg.seed = 8;
    cfg.box_lo = 0.0;
    cfg.box_hi = 255.0;

    cfg.lvbeta = 0.0;
    Tensor plain = invert_shallow(target, net, cfg).x_star;
    cfg.lvbeta = 1e-4;
    Tensor smooth = invert_shallow(target, net, cfg).x_star;
    CHECK(tv_norm(plain, 2.0) > 1e5); // tracked the checkerboard faithfully
    CHECK(tv_norm(smooth, 2.0) < 0.01 * tv_norm(plain, 2.0));
}

TEST_CASE("every iterate stays inside the pixel box") {
    NetworkSpec net = conv_prelu_pool_stem(1, 2, 6, 88);
    Tensor target = stem_forward(random_tensor({1, 6, 6}, 89, 50.0), net).out;
    ShallowConfig cfg;
    cfg.lr = 5.0; // aggressive steps so the clamp actually engages
    cfg.epochs = 40;
    cfg.seed = 11;
    cfg.box_lo = 0.0;
    cfg.box_hi = 255.0;
    long calls = 0;
    bool inside = true;
    ShallowInversion inv = invert_shallow(
        target, net, cfg, [&](const Tensor& x, long step) {
            ++calls;
            CHECK(step == calls);
            for (double v : x.data)
                if (v < cfg.box_lo || v > cfg.box_hi) inside = false;
        });
    CHECK(calls == 40);
    CHECK(inside);
    for (double v : inv.x_star.data) {
        CHECK(v >= cfg.box_lo);
        CHECK(v <= cfg.box_hi);
    }
}

TEST_CASE("stem inversion is bitwise deterministic in the seed") {
    NetworkSpec net = conv_prelu_pool_stem(2, 3, 8, 90);
    Tensor target = stem_forward(random_tensor({2, 8, 8}, 91, 30.0), net).out;
    ShallowConfig cfg;
    cfg.epochs = 120;
    cfg.seed = 17;
    cfg.box_lo = 0.0;
    cfg.box_hi = 255.0;
    ShallowInversion a = invert_shallow(target, net, cfg);
    ShallowInversion b = invert_shallow(target, net, cfg);
    CHECK(a.x_star.data == b.x_star.data);
    CHECK(a.report.trace == b.report.trace);
    cfg.seed = 18;
    ShallowInversion c = invert_shallow(target, net, cfg);
    CHECK(a.report.trace != c.report.trace);
}

TEST_CASE("stem inversion rejects bad inputs and configs") {
    NetworkSpec net = empty_stem({1, 4, 4});
    Tensor zero = Tensor::zeros({1, 4, 4});
    ShallowConfig cfg;
    CHECK_THROWS_AS(invert_shallow(zero, net, cfg), validation_error);

    Tensor ok = Tensor::zeros({1, 4, 4});
    ok.data[0] = 1.0;
    NetworkSpec bn = net;
    StemLayer bl;
    bl.kind = StemKind::batchnorm;
    bn.stem.push_back(bl);
    CHECK_THROWS_AS(invert_shallow(ok, bn, cfg), unsupported_structure_error);

    // Target dims that the stem cannot produce surface as shape errors.
    Tensor wrong = Tensor::zeros({2, 4, 4});
    wrong.data[0] = 1.0;
    CHECK_THROWS_AS(invert_shallow(wrong, net, cfg), shape_error);

    ShallowConfig bad = cfg;
    bad.lalpha = -1.0;
    CHECK_THROWS_AS(invert_shallow(ok, net, bad), validation_error);
    bad = cfg;
    bad.lvbeta = -0.5;
    CHECK_THROWS_AS(invert_shallow(ok, net, bad), validation_error);
    bad = cfg;
    bad.alpha = 0.5;
    CHECK_THROWS_AS(invert_shallow(ok, net, bad), validation_error);
    bad = cfg;
    bad.beta = 0.0;
    CHECK_THROWS_AS(invert_shallow(ok, net, bad), validation_error);
    bad = cfg;
    bad.lr = 0.0;
    CHECK_THROWS_AS(invert_shallow(ok, net, bad), validation_error);
    bad = cfg;
    bad.epochs = 0;
    CHECK_THROWS_AS(invert_shallow(ok, net, bad), validation_error);
    bad = cfg;
    bad.box_lo = 1.0;
    bad.box_hi = 1.0;
    CHECK_THROWS_AS(invert_shallow(ok, net, bad), validation_error);
    bad = cfg;
    bad.beta1 = 1.0;
    CHECK_THROWS_AS(invert_shallow(ok, net, bad), validation_error);
    bad = cfg;
    bad.eps_adam = 0.0;
    CHECK_THROWS_AS(invert_shallow(ok, net, bad), validation_error);
    // Turning both regularizers off entirely is a legal configuration.
    ShallowConfig off = cfg;
    off.lalpha = 0.0;
    off.lvbeta = 0.0;
    off.epochs = 1;
    Tensor t = stem_forward(ok, net).out;
    CHECK_NOTHROW(invert_shallow(t, net, off));
}

TEST_CASE("an exploding stem reports divergence with the failing step") {
    NetworkSpec net;
    net.input_dims = {1, 4, 4};
    StemLayer conv;
    conv.kind = StemKind::conv;
    conv.conv.kernel = Tensor::zeros({1, 1, 1, 1});
    conv.conv.kernel.data[0] = 1e308; // overflows the fidelity immediately
    conv.conv.geom = ConvGeometry{};
    net.stem.push_back(conv);
    Tensor target = Tensor::zeros({1, 4, 4});
    for (double& v : target.data) v = 1.0;
    ShallowConfig cfg;
    cfg.box_lo = 0.0;
    cfg.box_hi = 255.0;
    try {
        invert_shallow(target, net, cfg);
        FAIL("expected divergence");
    } catch (const diverged_error& e) {
        CHECK(e.step == 1);
        CHECK(std::string(e.what()).find("diverged") != std::string::npos);
    }
}
