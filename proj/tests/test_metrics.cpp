#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "helpers.hpp"
#include "peel/metrics.hpp"
#include "peel/rng.hpp"

using namespace peel;
using testutil::random_tensor;

TEST_CASE("mse matches hand values and an independent loop") {
    Tensor a = random_tensor({2, 3, 3}, 11);
    CHECK(mse(a, a) == 0.0);

    Tensor zero = Tensor::zeros({1, 1, 1});
    Tensor ten = Tensor::zeros({1, 1, 1});
    ten.data[0] = 10.0;
    CHECK(mse(zero, ten) == doctest::Approx(100.0).epsilon(1e-15));

    for (std::uint64_t s = 0; s < 100; ++s) {
        Tensor x = random_tensor({3, 4, 5}, 1000 + s, 20.0);
        Tensor y = random_tensor({3, 4, 5}, 2000 + s, 20.0);
        double want = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i)
            want += (x.data[i] - y.data[i]) * (x.data[i] - y.data[i]);
        want /= static_cast<double>(x.size());
        CHECK(mse(x, y) == doctest::Approx(want).epsilon(1e-13));
        // Symmetry and nonnegativity.
        CHECK(mse(x, y) == mse(y, x));
        CHECK(mse(x, y) > 0.0);
    }
    Tensor b = random_tensor({2, 3, 4}, 12);
    CHECK_THROWS_AS(mse(a, b), shape_error);
}

TEST_CASE("psnr matches hand-computed decibel values") {
    CHECK(psnr(255.0 * 255.0, 255.0) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(psnr(774.17, 255.0) == doctest::Approx(19.2424).epsilon(1e-4));
    CHECK(psnr(1.0, 1.0) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(std::isinf(psnr(0.0, 255.0)));
    CHECK(psnr(0.0, 255.0) > 0.0);
    CHECK_THROWS_AS(psnr(-1.0, 255.0), validation_error);
    CHECK_THROWS_AS(psnr(1.0, 0.0), validation_error);
}

TEST_CASE("psnr is strictly decreasing in mse") {
    GaussianRng rng(77);
    std::vector<double> mses;
    for (int i = 0; i < 64; ++i) mses.push_back(std::exp(rng.normal() * 3.0));
    std::sort(mses.begin(), mses.end());
    for (std::size_t i = 1; i < mses.size(); ++i)
        CHECK(psnr(mses[i]) < psnr(mses[i - 1]));
}

TEST_CASE("relative error handles identity, scaling, and covariance") {
    Tensor x = random_tensor({2, 4, 4}, 21, 5.0);
    CHECK(relative_error(x, x) == 0.0);

    Tensor x2 = x;
    for (double& v : x2.data) v *= 2.0;
    CHECK(relative_error(x2, x) == 1.0); // (2v - v) is exact in ieee

    Tensor y = random_tensor({2, 4, 4}, 22, 5.0);
    const double base = relative_error(y, x);
    for (double c : {3.0, -0.125}) {
        Tensor cx = x, cy = y;
        for (double& v : cx.data) v *= c;
        for (double& v : cy.data) v *= c;
        CHECK(relative_error(cy, cx) == doctest::Approx(base).epsilon(1e-13));
    }

    Tensor zero = Tensor::zeros({2, 4, 4});
    CHECK_THROWS_AS(relative_error(x, zero), validation_error);
    Tensor other = random_tensor({2, 4, 5}, 23);
    CHECK_THROWS_AS(relative_error(x, other), shape_error);
}

TEST_CASE("knn distance takes the closest reference") {
    Tensor q = Tensor::zeros({2});
    Tensor far = Tensor::zeros({2});
    far.data[0] = 3.0;
    far.data[1] = 4.0;
    std::vector<Tensor> refs = {Tensor::zeros({2}), far};
    CHECK(knn_distance(q, refs) == 0.0);
    Tensor q2 = Tensor::zeros({2});
    q2.data[0] = 3.0;
    CHECK(knn_distance(q2, refs) == doctest::Approx(3.0).epsilon(1e-15));

    // Brute-force oracle over random lists.
    for (std::uint64_t s = 0; s < 20; ++s) {
        Tensor query = random_tensor({3, 2, 2}, 3000 + s);
        std::vector<Tensor> list;
        for (std::uint64_t k = 0; k < 7; ++k)
            list.push_back(random_tensor({3, 2, 2}, 4000 + 7 * s + k));
        double want = std::numeric_limits<double>::infinity();
        for (const Tensor& r : list) {
            double acc = 0.0;
            for (std::size_t i = 0; i < r.size(); ++i)
                acc += (query.data[i] - r.data[i]) * (query.data[i] - r.data[i]);
            want = std::min(want, std::sqrt(acc));
        }
        CHECK(knn_distance(query, list) == doctest::Approx(want).epsilon(1e-13));
        // A reference equal to the query drives the distance to zero.
        list.push_back(query);
        CHECK(knn_distance(query, list) == 0.0);
    }

    CHECK_THROWS_AS(knn_distance(q, {}), validation_error);
    std::vector<Tensor> bad = {Tensor::zeros({3})};
    CHECK_THROWS_AS(knn_distance(q, bad), shape_error);
}

TEST_CASE("sample stats use the population convention") {
    SampleStats s = sample_stats({1.0, 2.0, 3.0, 4.0});
    CHECK(s.mean == doctest::Approx(2.5).epsilon(1e-15));
    CHECK(s.stddev == doctest::Approx(std::sqrt(1.25)).epsilon(1e-15));
    CHECK(s.count == 4);
    SampleStats one = sample_stats({7.0});
    CHECK(one.mean == 7.0);
    CHECK(one.stddev == 0.0);
    CHECK_THROWS_AS(sample_stats({}), validation_error);
}

TEST_CASE("psnr aggregation carries both conventions and their jensen gap") {
    PsnrAggregate single = aggregate_psnr({100.0});
    CHECK(single.mean_of_psnr == single.psnr_of_mean_mse);

    GaussianRng rng(91);
    for (int rep = 0; rep < 10; ++rep) {
        std::vector<double> mses;
        for (int i = 0; i < 16; ++i)
            mses.push_back(std::exp(rng.normal() * 2.0) * 100.0);
        PsnrAggregate agg = aggregate_psnr(mses);
        // Concavity of the log makes per-sample averaging the larger one.
        CHECK(agg.mean_of_psnr >= agg.psnr_of_mean_mse - 1e-12);
    }
    CHECK_THROWS_AS(aggregate_psnr({}), validation_error);
}
