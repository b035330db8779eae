#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "gfseg/fcp.hpp"
#include "support/oracles.hpp"

using namespace gfseg;

namespace {

// Identity projections and a throwaway decoder, for correlation tests.
template <typename Scalar>
FcpParams<Scalar> identity_params(Index c) {
    FcpParams<Scalar> p = FcpParams<Scalar>::init(c, 1234);
    p.phi_w = Tensor<Scalar>({c, c});
    p.theta_w = Tensor<Scalar>({c, c});
    for (Index i = 0; i < c; ++i) {
        p.phi_w.at(i, i) = Scalar(1);
        p.theta_w.at(i, i) = Scalar(1);
    }
    p.phi_b = Tensor<Scalar>({c});
    p.theta_b = Tensor<Scalar>({c});
    return p;
}

template <typename Scalar>
EpisodeBatch<Scalar> episode_from(const Tensor<Scalar>& feats) {
    EpisodeBatch<Scalar> ep;
    ep.feats = feats;
    return ep;
}

} // namespace

TEST_CASE("pairwise_correlation: identity projections on single-pixel images") {
    const Tensor<double> feats({2, 3, 1, 1}, {1, 2, 3, 4, 5, 6});
    const auto ep = episode_from(feats);
    const auto params = identity_params<double>(3);
    const auto vol = pairwise_correlation(ep, params, 1);
    CHECK(vol.dims() == std::vector<Index>{2, 1, 1});
    CHECK(vol.at(0, 0, 0) == doctest::Approx(1 * 4 + 2 * 5 + 3 * 6));
    CHECK(vol.at(1, 0, 0) == doctest::Approx(16 + 25 + 36));
    CHECK_THROWS_AS(pairwise_correlation(ep, params, 2), ShapeError);
}

TEST_CASE("pairwise_correlation: zero theta weights give a zero volume") {
    Rng rng(41);
    const auto feats = oracle::random_tensor<double>(rng, {2, 3, 2, 2});
    auto params = identity_params<double>(3);
    params.theta_w = Tensor<double>({3, 3});
    const auto vol = pairwise_correlation(episode_from(feats), params, 0);
    for (Index i = 0; i < vol.size(); ++i) CHECK(vol[i] == 0.0);
}

TEST_CASE("pairwise_correlation: orthonormal pixel columns give a Gram identity") {
    Tensor<double> feats({1, 2, 1, 2});
    feats.at(0, 0, 0, 0) = 1.0;  // pixel 0 = e1, pixel 1 = e2
    feats.at(0, 1, 0, 1) = 1.0;
    const auto vol = pairwise_correlation(episode_from(feats), identity_params<double>(2), 0);
    CHECK(vol.at(0, 0, 0) == doctest::Approx(1.0));
    CHECK(vol.at(0, 1, 1) == doctest::Approx(1.0));
    CHECK(vol.at(0, 0, 1) == doctest::Approx(0.0));
    CHECK(vol.at(0, 1, 0) == doctest::Approx(0.0));
}

TEST_CASE("pairwise_correlation matches the naive oracle with random projections") {
    Rng rng(42);
    for (int rep = 0; rep < 5; ++rep) {
        const Index b = rng.uniform_int(1, 3), c = rng.uniform_int(1, 4);
        const Index h = rng.uniform_int(1, 3), w = rng.uniform_int(1, 3);
        const auto feats = oracle::random_tensor<double>(rng, {b, c, h, w});
        FcpParams<double> params = identity_params<double>(c);
        params.phi_w = oracle::random_tensor<double>(rng, {c, c});
        params.phi_b = oracle::random_tensor<double>(rng, {c});
        params.theta_w = oracle::random_tensor<double>(rng, {c, c});
        params.theta_b = oracle::random_tensor<double>(rng, {c});
        const Index q = rng.uniform_int(0, b - 1);
        const auto got = pairwise_correlation(episode_from(feats), params, q);
        const auto want = oracle::naive_correlation(feats, params.phi_w, params.phi_b, params.theta_w, params.theta_b, q);
        for (Index i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-9));
    }
}

TEST_CASE("hybrid_pool: hand case and invariances") {
    // single image, single pixel
    const Tensor<double> tiny({1, 1, 1}, {0.7});
    CHECK(hybrid_pool(tiny, 1, 1)[0] == doctest::Approx(0.7));

    // per query pixel, 2 images x 2 support pixels [[1,5],[2,2]]:
    // mean(max(1,5), max(2,2)) = 3.5
    const Tensor<double> vol({2, 2, 2}, {1, 1, 5, 5, 2, 2, 2, 2});
    const auto pooled = hybrid_pool(vol, 1, 2);
    CHECK(pooled[0] == doctest::Approx(3.5));
    CHECK(pooled[1] == doctest::Approx(3.5));

    // duplicating every image leaves the mean unchanged
    const Tensor<double> dup({4, 2, 2}, {1, 1, 5, 5, 2, 2, 2, 2, 1, 1, 5, 5, 2, 2, 2, 2});
    const auto pooled_dup = hybrid_pool(dup, 1, 2);
    CHECK(pooled_dup[0] == doctest::Approx(3.5));
    CHECK(pooled_dup[1] == doctest::Approx(3.5));
}

TEST_CASE("correlation_mask conventions") {
    // uniform map -> all ones (softmax * HW = 1 > 0.5)
    const Tensor<double> uniform = Tensor<double>::full({2, 2}, 1.25);
    const auto m = correlation_mask(uniform);
    for (Index i = 0; i < 4; ++i) CHECK(m[i] == 1.0);

    // one dominant peak -> only the peak survives
    const Tensor<double> peak({2, 2}, {10, 0, 0, 0});
    const auto mp = correlation_mask(peak);
    CHECK(mp[0] == 1.0);
    CHECK(mp[1] == 0.0);
    CHECK(mp[2] == 0.0);
    CHECK(mp[3] == 0.0);

    // singleton map is always foreground
    const Tensor<double> one({1, 1}, {-3.0});
    CHECK(correlation_mask(one)[0] == 1.0);

    // binary output, idempotent under re-application of the threshold rule
    Rng rng(43);
    const auto abar = oracle::random_tensor<double>(rng, {3, 3}, -2, 2);
    const auto mask = correlation_mask(abar);
    for (Index i = 0; i < mask.size(); ++i) CHECK((mask[i] == 0.0 || mask[i] == 1.0));
}

TEST_CASE("wgap hand cases, fallback, and norm bound") {
    // all pixels equal v, full mask -> v / ||v||
    Tensor<double> feat({2, 1, 2});
    feat.at(0, 0, 0) = 3;
    feat.at(1, 0, 0) = 4;
    feat.at(0, 0, 1) = 3;
    feat.at(1, 0, 1) = 4;
    const Tensor<double> full_mask = Tensor<double>::full({1, 2}, 1.0);
    const auto r = wgap(feat, full_mask);
    CHECK_FALSE(r.mask_fallback);
    CHECK(r.prototype[0] == doctest::Approx(0.6));
    CHECK(r.prototype[1] == doctest::Approx(0.8));

    // mask selecting only u keeps u
    Tensor<double> feat2({2, 1, 2});
    feat2.at(0, 0, 0) = 1;  // u = e1
    feat2.at(1, 0, 1) = 1;  // v = e2
    const Tensor<double> sel({1, 2}, {1, 0});
    const auto ru = wgap(feat2, sel);
    CHECK(ru.prototype[0] == doctest::Approx(1.0));
    CHECK(ru.prototype[1] == doctest::Approx(0.0));

    // pixels [3,4] and [1,0], both selected -> ([0.6,0.8] + [1,0]) / 2
    Tensor<double> feat3({2, 1, 2});
    feat3.at(0, 0, 0) = 3;
    feat3.at(1, 0, 0) = 4;
    feat3.at(0, 0, 1) = 1;
    const auto rb = wgap(feat3, full_mask);
    CHECK(rb.prototype[0] == doctest::Approx(0.8));
    CHECK(rb.prototype[1] == doctest::Approx(0.4));

    // all-zero mask falls back to all ones with the diagnostic flag
    const auto rf = wgap(feat3, Tensor<double>({1, 2}));
    CHECK(rf.mask_fallback);
    CHECK(rf.prototype[0] == doctest::Approx(0.8));

    // convex combination of unit vectors: norm <= 1
    Rng rng(44);
    for (int rep = 0; rep < 5; ++rep) {
        const auto f = oracle::random_tensor<double>(rng, {4, 3, 3});
        Tensor<double> mask({3, 3});
        for (auto& v : mask.values()) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
        const auto res = wgap(f, mask);
        CHECK(res.prototype.vector().norm() <= 1.0 + 1e-5);
    }
}

TEST_CASE("refined_responses hand cases and rescaling invariance") {
    // B=1, prototype equals the normalized pixel feature -> response 1
    Tensor<double> feat({2, 1, 1});
    feat.at(0, 0, 0) = 3;
    feat.at(1, 0, 0) = 4;
    const Tensor<double> proto({1, 2}, {0.6, 0.8});
    CHECK(refined_responses(proto, feat)[0] == doctest::Approx(1.0));

    // prototype orthogonal to every pixel -> 0
    const Tensor<double> ortho({1, 2}, {-0.8, 0.6});
    CHECK(refined_responses(ortho, feat)[0] == doctest::Approx(0.0));

    // two basis prototypes against pixel [1,1]: mean of 2 x (1/sqrt 2)
    Tensor<double> feat11({2, 1, 1});
    feat11.at(0, 0, 0) = 1;
    feat11.at(1, 0, 0) = 1;
    const Tensor<double> protos({2, 2}, {1, 0, 0, 1});
    CHECK(refined_responses(protos, feat11)[0] == doctest::Approx(0.70710678).epsilon(1e-8));

    // positive rescaling of a pixel feature does not move the response
    Rng rng(45);
    const auto protos_r = oracle::random_tensor<double>(rng, {3, 4});
    auto f = oracle::random_tensor<double>(rng, {4, 2, 2});
    const auto base = refined_responses(protos_r, f);
    for (Index c = 0; c < 4; ++c) f.at(c, 1, 1) *= 37.5;
    const auto scaled = refined_responses(protos_r, f);
    for (Index i = 0; i < base.size(); ++i) CHECK(base[i] == doctest::Approx(scaled[i]).epsilon(1e-5));
}

TEST_CASE("decode_foreground: residual identity at R = 0, shape and range") {
    Rng rng(46);
    const Index c = 8;
    const auto params = FcpParams<double>::init(c, 77);
    const auto feat = oracle::random_tensor<double>(rng, {2, c, 4, 4});
    const Tensor<double> zero_resp({2, 4, 4});
    const auto cache = decode_foreground_cached(feat, zero_resp, params);
    for (Index i = 0; i < feat.size(); ++i) CHECK(cache.x[i] == feat[i]);
    CHECK(cache.fg.dims() == std::vector<Index>{2, 4, 4});
    for (Index i = 0; i < cache.fg.size(); ++i) {
        CHECK(cache.fg[i] > 0.0);
        CHECK(cache.fg[i] < 1.0);
    }

    // inconsistent decoder chain -> config error
    auto broken = params;
    broken.dec_w[1] = Tensor<double>({2, 3, 3, 3});
    broken.dec_b[1] = Tensor<double>({2});
    CHECK_THROWS_AS(decode_foreground(feat, zero_resp, broken), ConfigError);
}

TEST_CASE("decoder channel chain clamps at one for small channel counts") {
    const auto chain4 = FcpParams<double>::channel_chain(4);
    CHECK(chain4 == std::array<Index, 5>{4, 2, 1, 1, 1});
    const auto chain16 = FcpParams<double>::channel_chain(16);
    CHECK(chain16 == std::array<Index, 5>{16, 8, 4, 2, 1});
    CHECK_NOTHROW(FcpParams<double>::init(4, 3));
}

TEST_CASE("fcp_forward is deterministic and permutation equivariant") {
    Rng rng(47);
    const Index b = 3, c = 8, h = 3, w = 3;
    const auto params = FcpParams<double>::init(c, 99);
    const auto feats = oracle::random_tensor<double>(rng, {b, c, h, w});
    const auto ep = episode_from(feats);

    const auto out1 = fcp_forward(ep, params);
    const auto out2 = fcp_forward(ep, params);
    for (Index i = 0; i < out1.size(); ++i) CHECK(out1[i] == out2[i]);

    // rotate the episode: outputs rotate identically, bit for bit
    Tensor<double> rotated({b, c, h, w});
    const Index img = c * h * w;
    for (Index i = 0; i < b; ++i) {
        const Index src = (i + 1) % b;
        std::copy(feats.data() + src * img, feats.data() + (src + 1) * img, rotated.data() + i * img);
    }
    const auto out_rot = fcp_forward(episode_from(rotated), params);
    const Index plane = h * w;
    for (Index i = 0; i < b; ++i) {
        const Index src = (i + 1) % b;
        for (Index q = 0; q < plane; ++q) CHECK(out_rot[i * plane + q] == out1[src * plane + q]);
    }
}

TEST_CASE("fcp_forward composes the staged ops on a singleton episode") {
    Rng rng(48);
    const Index c = 8, h = 2, w = 2;
    const auto params = FcpParams<double>::init(c, 100);
    const auto feats = oracle::random_tensor<double>(rng, {1, c, h, w});
    const auto ep = episode_from(feats);

    const auto cache = fcp_forward_cached(ep, params);
    const auto vol = pairwise_correlation(ep, params, 0);
    const auto abar = hybrid_pool(vol, h, w);
    const auto mask = correlation_mask(abar);
    Tensor<double> f0({c, h, w});
    std::copy(feats.data(), feats.data() + c * h * w, f0.data());
    const auto proto = wgap(f0, mask).prototype;
    Tensor<double> protos({1, c});
    std::copy(proto.data(), proto.data() + c, protos.data());
    const auto resp = refined_responses(protos, f0);
    Tensor<double> resp_b({1, h, w});
    std::copy(resp.data(), resp.data() + h * w, resp_b.data());
    const auto fg = decode_foreground(feats, resp_b, params);
    for (Index i = 0; i < fg.size(); ++i) CHECK(cache.decode.fg[i] == fg[i]);
}

TEST_CASE("fcp params round trip bit-exactly") {
    const auto params = FcpParams<float>::init(8, 5);
    const auto dir = std::filesystem::temp_directory_path() / "gfseg_fcp_io";
    std::filesystem::remove_all(dir);
    save_fcp_params(dir, params);
    const auto back = load_fcp_params<float>(dir);
    CHECK(std::memcmp(back.phi_w.data(), params.phi_w.data(), sizeof(float) * params.phi_w.size()) == 0);
    CHECK(std::memcmp(back.dec_w[3].data(), params.dec_w[3].data(), sizeof(float) * params.dec_w[3].size()) == 0);
    std::filesystem::remove_all(dir);
}

TEST_CASE("episode validation rejects inconsistent truths") {
    Rng rng(49);
    EpisodeBatch<double> ep;
    ep.feats = oracle::random_tensor<double>(rng, {1, 2, 2, 2});
    ep.fg_truth = Tensor<double>({1, 2, 2}, {0, 1, 0, 1});
    ep.label_truth = Tensor<double>({1, 2, 2}, {0, 3, 0, 0});  // last pixel disagrees
    CHECK_THROWS_AS(validate_episode(ep), DataError);
    ep.label_truth = Tensor<double>({1, 2, 2}, {0, 3, 0, 2});
    CHECK_NOTHROW(validate_episode(ep));
    ep.fg_truth = Tensor<double>({1, 2, 2}, {0, 0.5, 0, 1});
    CHECK_THROWS_AS(validate_episode(ep), DataError);
}
