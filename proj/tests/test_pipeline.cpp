#include <doctest.h>

#include <cmath>
#include <string>

#include "helpers.hpp"
#include "peel/pipeline.hpp"
#include "peel/rng.hpp"

using namespace peel;
using testutil::random_tensor;
using testutil::rel_err_tensor;

namespace {

// Identity-skip block with small random branches, c channels.
ResBlockSpec soft_block(std::size_t c, std::uint64_t seed) {
    ResBlockSpec b;
    b.w1.kernel =
        random_tensor({c, c, 3, 3}, seed, 0.5 * std::sqrt(2.0 / (9.0 * c)));
    b.w1.geom = ConvGeometry{1, 1, 1, 1};
    b.w2.kernel =
        random_tensor({c, c, 3, 3}, seed + 1, 0.5 * std::sqrt(2.0 / (9.0 * c)));
    b.w2.geom = ConvGeometry{1, 1, 1, 1};
    b.ws.kernel = Tensor::zeros({c, c, 1, 1});
    for (std::size_t i = 0; i < c; ++i) b.ws.kernel.data[i * c + i] = 1.0;
    b.ws.geom = ConvGeometry{};
    b.ws.identity = true;
    return b;
}

ResBlockSpec skip_only_block(std::size_t c) {
    ResBlockSpec b = soft_block(c, 1);
    for (double& v : b.w1.kernel.data) v = 0.0;
    for (double& v : b.w2.kernel.data) v = 0.0;
    return b;
}

// Two soft blocks behind a 3->c conv + prelu stem, everything stride 1.
NetworkSpec small_net(std::size_t c, std::uint64_t seed) {
    NetworkSpec net;
    net.input_dims = {3, 6, 6};
    StemLayer conv;
    conv.kind = StemKind::conv;
    conv.conv.kernel =
        random_tensor({c, 3, 3, 3}, seed, 0.5 * std::sqrt(2.0 / 27.0));
    conv.conv.geom = ConvGeometry{1, 1, 1, 1};
    net.stem.push_back(conv);
    StemLayer act;
    act.kind = StemKind::prelu;
    act.prelu_a = 0.25;
    net.stem.push_back(act);
    net.blocks.push_back(soft_block(c, seed + 10));
    net.blocks.push_back(soft_block(c, seed + 20));
    return net;
}

} // namespace

TEST_CASE("peeling a single skip-only block returns the features unchanged") {
    NetworkSpec net;
    net.input_dims = {3, 5, 5};
    net.blocks.push_back(skip_only_block(3));
    Tensor y = random_tensor({3, 5, 5}, 40);

    PenaltyConfig cfg;
    cfg.seed = 7;
    ShallowConfig sh;
    PeelRun run = peel_network(y, net, cfg, sh);
    REQUIRE(run.stages.size() == 1);
    CHECK(run.stages[0].block == 1);
    CHECK_FALSE(run.shallow_ran);
    CHECK(rel_err_tensor(run.image, y) < 1e-8);
    CHECK(run.image.data == run.stages[0].inv.x_hat.data);
    CHECK_FALSE(run.stages[0].truth_error.has_value());
}

TEST_CASE("peel runs are bitwise reproducible from their seeds") {
    NetworkSpec net = small_net(4, 300);
    Tensor x = random_tensor({3, 6, 6}, 301, 0.5);
    TapTrace tr = network_forward(x, net);

    PenaltyConfig cfg;
    cfg.seed = 70;
    cfg.epochs = 200;
    ShallowConfig sh;
    sh.epochs = 100;
    sh.seed = 71;
    sh.box_lo = -4.0;
    sh.box_hi = 4.0;
    PeelRun a = peel_network(tr.taps.back(), net, cfg, sh);
    PeelRun b = peel_network(tr.taps.back(), net, cfg, sh);
    REQUIRE(a.stages.size() == 2);
    CHECK(a.shallow_ran);
    for (std::size_t i = 0; i < a.stages.size(); ++i) {
        CHECK(a.stages[i].inv.x_hat.data == b.stages[i].inv.x_hat.data);
        CHECK(a.stages[i].inv.report.trace == b.stages[i].inv.report.trace);
    }
    CHECK(a.image.data == b.image.data);

    // A different base seed must actually change the solve paths.
    cfg.seed = 72;
    PeelRun c = peel_network(tr.taps.back(), net, cfg, sh);
    CHECK(a.stages[0].inv.report.trace != c.stages[0].inv.report.trace);
}

TEST_CASE("peel stages match standalone block inversions exactly") {
    NetworkSpec net = small_net(4, 310);
    Tensor x = random_tensor({3, 6, 6}, 311, 0.5);
    TapTrace tr = network_forward(x, net);

    PenaltyConfig cfg;
    cfg.seed = 80;
    cfg.epochs = 250;
    ShallowConfig sh;
    sh.epochs = 50;
    sh.box_lo = -4.0;
    sh.box_hi = 4.0;
    PeelRun run = peel_network(tr.taps.back(), net, cfg, sh, &tr);

    // Deepest stage: same inputs, same mixed seed, same everything.
    PenaltyConfig deep = cfg;
    deep.seed = mix_seed(cfg.seed, 1);
    auto ins = block_input_dims(net);
    BlockInversion alone =
        invert_block(tr.taps.back(), net.blocks[1], ins[1], deep);
    CHECK(run.stages[0].inv.report.data_residual ==
          alone.report.data_residual);
    CHECK(run.stages[0].inv.x_hat.data == alone.x_hat.data);

    // Truth-mode scoring is present and agrees with a direct computation.
    REQUIRE(run.stages[0].truth_error.has_value());
    CHECK(*run.stages[0].truth_error ==
          doctest::Approx(rel_err_tensor(alone.x_hat, tr.taps[0]))
              .epsilon(1e-12));
    REQUIRE(run.stages[1].truth_error.has_value());
}

TEST_CASE("peel attaches the failing block index to stage errors") {
    NetworkSpec net;
    net.input_dims = {3, 5, 5};
    net.blocks.push_back(soft_block(3, 320));
    net.blocks.push_back(soft_block(3, 321));
    Tensor y = random_tensor({3, 5, 5}, 322);

    PenaltyConfig cfg;
    cfg.lr = 1e200; // forces divergence in the deepest block
    ShallowConfig sh;
    try {
        peel_network(y, net, cfg, sh);
        FAIL("expected divergence");
    } catch (const diverged_error& e) {
        CHECK(std::string(e.what()).find("block 2:") != std::string::npos);
    }

    Tensor wrong = random_tensor({3, 4, 4}, 323);
    CHECK_THROWS_AS(peel_network(wrong, net, cfg, sh), shape_error);

    NetworkSpec empty;
    empty.input_dims = {3, 5, 5};
    CHECK_THROWS_AS(peel_network(y, empty, cfg, sh), validation_error);

    // Shallow-stage failures carry their own prefix.
    NetworkSpec stemmed = small_net(4, 324);
    Tensor x = random_tensor({3, 6, 6}, 325, 0.5);
    TapTrace tr = network_forward(x, stemmed);
    PenaltyConfig okc;
    okc.epochs = 5;
    ShallowConfig bad;
    bad.lr = -1.0;
    try {
        peel_network(tr.taps.back(), stemmed, okc, bad);
        FAIL("expected validation failure");
    } catch (const validation_error& e) {
        CHECK(std::string(e.what()).find("shallow stage:") !=
              std::string::npos);
    }

    // A trace of the wrong depth is rejected before any solving.
    TapTrace short_tr = tr;
    short_tr.taps.pop_back();
    CHECK_THROWS_AS(peel_network(tr.taps.back(), stemmed, okc, bad, &short_tr),
                    validation_error);
}

TEST_CASE("nonresidual identity layer recovers nonnegative features") {
    ConvLayer w;
    w.kernel = Tensor::zeros({3, 3, 1, 1});
    for (int c = 0; c < 3; ++c) w.kernel.data[c * 3 + c] = 1.0;
    w.geom = ConvGeometry{};
    Tensor y = Tensor::zeros({3, 4, 4});
    GaussianRng g(21);
    for (double& v : y.data) v = std::abs(g.normal());

    PenaltyConfig cfg;
    cfg.seed = 5;
    cfg.lr = 1.5e-5; // tiny steps: adam's stationary chatter scales with lr
    cfg.epochs = 450000;
    BlockInversion inv = invert_nonresidual(y, w, {3, 4, 4}, cfg);
    CHECK(inv.report.data_residual <= 1e-6);
    CHECK(rel_err_tensor(inv.x_hat, y) < 1e-5);
}

TEST_CASE("nonresidual nullspace makes reconstruction seed-dependent") {
    // 2->1 channel mix: y pins only one combination of the two channels.
    ConvLayer mix;
    mix.kernel = Tensor::zeros({1, 2, 1, 1});
    mix.kernel.data[0] = 1.0;
    mix.kernel.data[1] = -0.7;
    mix.geom = ConvGeometry{};
    Tensor x0 = random_tensor({2, 3, 3}, 34);
    Tensor z = conv_apply(mix, x0);
    Tensor y = z;
    for (double& v : y.data) v = v > 0 ? v : 0.0;

    PenaltyConfig cfg;
    cfg.lr = 0.003;
    cfg.epochs = 8000;
    cfg.seed = 1;
    BlockInversion a = invert_nonresidual(y, mix, {2, 3, 3}, cfg);
    cfg.seed = 2;
    BlockInversion b = invert_nonresidual(y, mix, {2, 3, 3}, cfg);
    const double yn = std::sqrt(sqnorm(y));
    CHECK(a.report.data_residual / yn < 2e-3);
    CHECK(b.report.data_residual / yn < 2e-3);
    // Both fit the observation, yet they disagree about the input.
    CHECK(rel_err_tensor(a.x_hat, b.x_hat) > 0.01);
}

TEST_CASE("stacked nonresidual layers lose the input") {
    GaussianRng g(55);
    std::array<ConvLayer, 3> layers;
    for (auto& l : layers) {
        l.kernel = Tensor::zeros({3, 3, 3, 3});
        g.fill_normal(l.kernel, 0.0, std::sqrt(2.0 / 27.0));
        l.geom = ConvGeometry{1, 1, 1, 1};
    }
    Tensor x = random_tensor({3, 6, 6}, 56);
    Tensor cur = x;
    std::array<Tensor, 3> taps;
    for (int l = 0; l < 3; ++l) {
        cur = conv_apply(layers[l], cur);
        for (double& v : cur.data) v = v > 0 ? v : 0.0;
        taps[l] = cur;
    }

    PenaltyConfig cfg;
    cfg.seed = 9;
    Tensor est = taps[2];
    for (int l = 2; l >= 0; --l)
        est = invert_nonresidual(est, layers[l], {3, 6, 6}, cfg).x_hat;
    // Calibrated once and frozen: without skips the error blows far past
    // anything the residual pipeline produces on comparable shapes.
    CHECK(rel_err_tensor(est, x) > 0.20);
}

TEST_CASE("nonresidual inversion rejects refinement and bad dims") {
    ConvLayer w;
    w.kernel = Tensor::zeros({2, 2, 1, 1});
    w.kernel.data[0] = 1.0;
    w.kernel.data[3] = 1.0;
    w.geom = ConvGeometry{};
    Tensor y = random_tensor({2, 3, 3}, 60);
    PenaltyConfig cfg;
    cfg.refine_pattern = true;
    CHECK_THROWS_AS(invert_nonresidual(y, w, {2, 3, 3}, cfg),
                    validation_error);
    PenaltyConfig ok;
    Tensor bad = random_tensor({2, 4, 4}, 61);
    CHECK_THROWS_AS(invert_nonresidual(bad, w, {2, 3, 3}, ok), shape_error);
}
