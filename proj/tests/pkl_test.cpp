#include <doctest.h>

#include <cmath>

#include "gfseg/pkl.hpp"
#include "support/oracles.hpp"

using namespace gfseg;

TEST_CASE("segment_scores: two unit kernels on a single pixel") {
    const Tensor<double> kernels({2, 2}, {1, 0, 0, 1});  // e1, e2
    const Tensor<double> feat({1, 2, 1, 1}, {1, 0});
    const Tensor<double> s = segment_scores(kernels, feat);
    const double sigma = std::exp(1.0) / (std::exp(1.0) + 1.0);  // softmax([1,0])
    CHECK(s.at(0, 0, 0, 0) == doctest::Approx(sigma).epsilon(1e-9));
    CHECK(s.at(0, 1, 0, 0) == doctest::Approx(1.0 - sigma).epsilon(1e-9));
    CHECK(s.at(0, 0, 0, 0) == doctest::Approx(0.731058578).epsilon(1e-8));
}

TEST_CASE("segment_scores: identical rows give the uniform map, shape contract holds") {
    Rng rng(21);
    const Index n = 3, c = 4, b = 2, h = 3, w = 5;
    Tensor<double> kernels({n, c});
    for (Index j = 0; j < n; ++j)
        for (Index k = 0; k < c; ++k) kernels.at(j, k) = 0.3 * k - 0.1;
    const auto feat = oracle::random_tensor<double>(rng, {b, c, h, w});
    const auto s = segment_scores(kernels, feat);
    CHECK(s.dims() == std::vector<Index>{b, n, h, w});
    for (Index i = 0; i < s.size(); ++i) CHECK(s[i] == doctest::Approx(1.0 / n).epsilon(1e-9));
    CHECK_THROWS_AS(segment_scores(kernels, Tensor<double>({1, 5, 2, 2})), ShapeError);
}

TEST_CASE("assemble_pixel_features matches the triple-loop oracle") {
    Rng rng(22);
    for (int rep = 0; rep < 8; ++rep) {
        const Index b = rng.uniform_int(1, 2), n = rng.uniform_int(1, 4), c = rng.uniform_int(1, 5);
        const Index h = rng.uniform_int(1, 4), w = rng.uniform_int(1, 4);
        const auto scores = oracle::random_tensor<double>(rng, {b, n, h, w}, 0, 1);
        const auto feat = oracle::random_tensor<double>(rng, {b, c, h, w});
        const auto got = assemble_pixel_features(scores, feat);
        const auto want = oracle::naive_assemble(scores, feat);
        for (Index i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-10));
    }
}

TEST_CASE("assemble_pixel_features: one-hot, uniform, zero") {
    // one-hot scores: prototype = sum of that class's pixels
    Tensor<double> scores({1, 2, 1, 2});
    scores.at(0, 0, 0, 0) = 1.0;
    scores.at(0, 1, 0, 1) = 1.0;
    const Tensor<double> feat({1, 2, 1, 2}, {1, 2, 3, 4});  // pixel0 = (1,3), pixel1 = (2,4)
    const auto protos = assemble_pixel_features(scores, feat);
    CHECK(protos.at(0, 0, 0) == doctest::Approx(1.0));
    CHECK(protos.at(0, 0, 1) == doctest::Approx(3.0));
    CHECK(protos.at(0, 1, 0) == doctest::Approx(2.0));
    CHECK(protos.at(0, 1, 1) == doctest::Approx(4.0));

    // uniform scores 1/N: every prototype equals (1/N) * sum of features
    const Tensor<double> uni = Tensor<double>::full({1, 2, 1, 2}, 0.5);
    const auto protos_u = assemble_pixel_features(uni, feat);
    CHECK(protos_u.at(0, 0, 0) == doctest::Approx(1.5));
    CHECK(protos_u.at(0, 1, 1) == doctest::Approx(3.5));

    // zero features -> zero prototypes
    const auto protos_z = assemble_pixel_features(uni, Tensor<double>({1, 2, 1, 2}));
    for (Index i = 0; i < protos_z.size(); ++i) CHECK(protos_z[i] == 0.0);

    CHECK_THROWS_AS(assemble_pixel_features(scores, Tensor<double>({1, 2, 2, 2})), ShapeError);
}

TEST_CASE("adaptation_learning_rate gates by clipped cosine") {
    const Tensor<double> k({3, 2}, {1, 0, 0, 1, 1, 1});
    Tensor<double> p({3, 2}, {2, 0, 0, -3, 1, -1});  // aligned, negated, orthogonal
    const auto alpha = adaptation_learning_rate(k, p);
    CHECK(alpha.dims() == std::vector<Index>{1, 3});
    CHECK(alpha[0] == doctest::Approx(1.0));
    CHECK(alpha[1] == doctest::Approx(0.0));
    CHECK(alpha[2] == doctest::Approx(0.0));
}

TEST_CASE("prototypical_kernel_update hand case and gating") {
    // K = [1,0], P = [1,1]: alpha = 1/sqrt(2), grad = [0,-2], K~ = [1, sqrt(2)]
    const Tensor<double> k({1, 2}, {1, 0});
    const Tensor<double> p({1, 2}, {1, 1});
    const auto upd = prototypical_kernel_update(k, p);
    CHECK(upd[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(upd[1] == doctest::Approx(std::sqrt(2.0)).epsilon(1e-9));
    CHECK(upd[1] == doctest::Approx(1.41421356).epsilon(1e-8));

    // zero gradient at K == P
    const auto same = prototypical_kernel_update(k, k);
    CHECK(same[0] == k[0]);
    CHECK(same[1] == k[1]);

    // anti-aligned prototype: gate clips to zero, row bit-identical
    const Tensor<double> anti({1, 2}, {-5, 0});
    const auto gated = prototypical_kernel_update(k, anti);
    CHECK(gated[0] == k[0]);
    CHECK(gated[1] == k[1]);
}

TEST_CASE("noise gating: orthogonal prototype rows leave kernels bit-exact") {
    const Tensor<double> k({2, 4}, {1, 2, 0, 0, 0, 0, 3, 1});
    Tensor<double> p({2, 4});
    // rows orthogonal to the corresponding kernel rows
    p.at(0, 2) = 7.0;
    p.at(1, 0) = -2.0;
    p.at(1, 1) = 1.0;
    const auto upd = prototypical_kernel_update(k, p);
    for (Index i = 0; i < k.size(); ++i) CHECK(upd[i] == k[i]);
}

TEST_CASE("update gradient matches finite differences of the squared-error sum") {
    Rng rng(31);
    const Index c = 6;
    auto k = oracle::random_tensor<double>(rng, {1, c});
    const auto p = oracle::random_tensor<double>(rng, {1, c});
    auto row_loss = [&]() {
        double acc = 0;
        for (Index i = 0; i < c; ++i) acc += (k[i] - p[i]) * (k[i] - p[i]);
        return acc;
    };
    for (Index i = 0; i < c; ++i) {
        const double analytic = 2.0 * (k[i] - p[i]);
        const double numeric = oracle::central_difference(row_loss, k, i, 1e-6);
        CHECK(oracle::rel_err(analytic, numeric) < 1e-6);
    }
}

TEST_CASE("contraction toward the prototype under a small aligned step") {
    const Tensor<double> k({1, 3}, {2, 0, 0});
    const Tensor<double> p({1, 3}, {6, 0, 0});  // cosine = 1, distance 4
    const auto upd = prototypical_kernel_update(k, p, 0.1);
    double before = 0, after = 0;
    for (Index i = 0; i < 3; ++i) {
        before += (k[i] - p[i]) * (k[i] - p[i]);
        after += (upd[i] - p[i]) * (upd[i] - p[i]);
    }
    CHECK(after < before);
}

TEST_CASE("predict_mask argmax with deterministic ties") {
    // pixel equal to one kernel row (others orthogonal) -> that class wins
    const Tensor<double> kernels({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    const Tensor<double> feat({1, 3, 1, 1}, {0, 5, 0});
    const auto mask = predict_mask(kernels, feat);
    CHECK(mask[0] == 1.0);

    // all-equal scores -> class 0 everywhere
    const Tensor<double> same = Tensor<double>::full({3, 3}, 0.25);
    const auto mask0 = predict_mask(same, feat);
    CHECK(mask0[0] == 0.0);
}

TEST_CASE("predict_mask equals the brute-force argmax oracle on random 4x4 inputs") {
    Rng rng(33);
    for (int rep = 0; rep < 6; ++rep) {
        const auto kernels = oracle::random_tensor<double>(rng, {2, 3});
        const auto feat = oracle::random_tensor<double>(rng, {1, 3, 4, 4});
        const auto mask = predict_mask(kernels, feat);
        const auto scores = segment_scores(kernels, feat);
        for (Index y = 0; y < 4; ++y)
            for (Index x = 0; x < 4; ++x) {
                const Index want = scores.at(0, 0, y, x) >= scores.at(0, 1, y, x) ? 0 : 1;
                CHECK(static_cast<Index>(mask.at(0, y, x)) == want);
            }
    }
}

TEST_CASE("update locality: novel rows of an enclosing bank stay bit-identical") {
    Rng rng(34);
    KernelBank<double> bank;
    bank.kernels = oracle::random_tensor<double>(rng, {5, 4});
    bank.class_ids = {0, 1, 2, 7, 9};
    bank.base_count = 3;
    bank.session_of = {0, 0, 0, 1, 1};
    const Tensor<double> before = bank.kernels;

    const auto base = base_rows(bank);
    const auto protos = oracle::random_tensor<double>(rng, {3, 4});
    const auto upd = prototypical_kernel_update(base, protos);
    const auto out = with_base_rows(bank, upd);
    for (Index r = 3; r < 5; ++r)
        for (Index c = 0; c < 4; ++c) CHECK(out.kernels.at(r, c) == before.at(r, c));
    // and the source bank itself was never touched
    for (Index i = 0; i < before.size(); ++i) CHECK(bank.kernels[i] == before[i]);
}
