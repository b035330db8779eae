#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "gfseg/tensor.hpp"
#include "gfseg/tensor_io.hpp"
#include "support/oracles.hpp"

using namespace gfseg;

TEST_CASE("tensor construction validates shape and payload") {
    CHECK_NOTHROW(Tensor<float>({2, 3}));
    CHECK_THROWS_AS(Tensor<float>({2, 3}, std::vector<float>(5, 0.f)), ShapeError);
    CHECK_THROWS_AS(Tensor<float>({-1, 3}), ShapeError);
    CHECK_THROWS_AS(Tensor<float>({2}, {1.f, std::numeric_limits<float>::quiet_NaN()}), DataError);
    CHECK_THROWS_AS(Tensor<float>({2}, {1.f, std::numeric_limits<float>::infinity()}), DataError);
    const Tensor<float> t({2, 2}, {1, 2, 3, 4});
    CHECK(t.at(1, 0) == 3.f);
    CHECK(t.size() == 4);
}

TEST_CASE("matmul identity, hand value, zero") {
    const Tensor<double> eye({2, 2}, {1, 0, 0, 1});
    const Tensor<double> x({2, 1}, {5, -3});
    const Tensor<double> r = matmul(eye, x);
    CHECK(r[0] == 5.0);
    CHECK(r[1] == -3.0);

    const Tensor<double> a({2, 2}, {1, 2, 3, 4});
    const Tensor<double> ones({2, 1}, {1, 1});
    const Tensor<double> p = matmul(a, ones);
    CHECK(p[0] == doctest::Approx(3.0));
    CHECK(p[1] == doctest::Approx(7.0));

    const Tensor<double> zero({2, 2});
    const Tensor<double> z = matmul(zero, x);
    CHECK(z[0] == 0.0);
    CHECK(z[1] == 0.0);

    CHECK_THROWS_AS(matmul(a, Tensor<double>({3, 1})), ShapeError);
}

TEST_CASE("matmul matches the naive oracle and is bit-reproducible") {
    Rng rng(42);
    for (int rep = 0; rep < 10; ++rep) {
        const Index m = rng.uniform_int(1, 5), k = rng.uniform_int(1, 5), n = rng.uniform_int(1, 5);
        const auto a = oracle::random_tensor<double>(rng, {m, k});
        const auto b = oracle::random_tensor<double>(rng, {k, n});
        const auto got = matmul(a, b);
        const auto want = oracle::naive_matmul(a, b);
        for (Index i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
        const auto again = matmul(a, b);
        for (Index i = 0; i < got.size(); ++i) CHECK(got[i] == again[i]);
    }
}

TEST_CASE("softmax hand values and stability") {
    const Tensor<double> uniform({3}, {0, 0, 0});
    const Tensor<double> s = softmax(uniform, 0);
    for (Index i = 0; i < 3; ++i) CHECK(s[i] == doctest::Approx(1.0 / 3).epsilon(1e-12));

    const Tensor<double> two({2}, {std::log(2.0), 0.0});
    const Tensor<double> s2 = softmax(two, 0);
    CHECK(s2[0] == doctest::Approx(2.0 / 3).epsilon(1e-12));
    CHECK(s2[1] == doctest::Approx(1.0 / 3).epsilon(1e-12));

    const Tensor<double> big({2}, {1000.0, 0.0});
    const Tensor<double> s3 = softmax(big, 0);
    CHECK(s3[0] == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(s3[1] == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(std::isfinite(s3[0]));
}

TEST_CASE("softmax shift invariance and normalization over an inner axis") {
    Rng rng(7);
    const auto t = oracle::random_tensor<double>(rng, {2, 4, 3}, -3, 3);
    Tensor<double> shifted = t;
    for (Index b = 0; b < 2; ++b)
        for (Index n = 0; n < 4; ++n)
            for (Index q = 0; q < 3; ++q) shifted.at(b, n, q) += 17.5;  // constant along axis 1
    const auto s = softmax(t, 1);
    const auto s2 = softmax(shifted, 1);
    for (Index i = 0; i < s.size(); ++i) CHECK(s[i] == doctest::Approx(s2[i]).epsilon(1e-6));
    for (Index b = 0; b < 2; ++b)
        for (Index q = 0; q < 3; ++q) {
            double sum = 0;
            for (Index n = 0; n < 4; ++n) sum += s.at(b, n, q);
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
        }
    CHECK_THROWS_AS(softmax(t, 3), ShapeError);
}

TEST_CASE("cosine hand values and conventions") {
    const Tensor<double> e1({2}, {1, 0});
    const Tensor<double> e2({2}, {0, 1});
    const Tensor<double> d({2}, {1, 1});
    CHECK(cosine(e1, e1) == doctest::Approx(1.0));
    CHECK(cosine(e1, e2) == doctest::Approx(0.0));
    CHECK(cosine(d, e1) == doctest::Approx(0.70710678).epsilon(1e-8));
    const Tensor<double> zero({2}, {0, 0});
    CHECK(cosine(zero, e1) == 0.0);
    CHECK_THROWS_AS(cosine(e1, Tensor<double>({3})), ShapeError);
}

TEST_CASE("l2_normalize hand values and zero convention") {
    const Tensor<double> v({2}, {3, 4});
    const Tensor<double> n = l2_normalize(v);
    CHECK(n[0] == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(n[1] == doctest::Approx(0.8).epsilon(1e-12));
    const Tensor<double> unit({2}, {0, 1});
    const Tensor<double> u = l2_normalize(unit);
    CHECK(u[0] == 0.0);
    CHECK(u[1] == doctest::Approx(1.0));
    const Tensor<double> zero({2}, {0, 0});
    const Tensor<double> z = l2_normalize(zero);
    CHECK(z[0] == 0.0);
    CHECK(z[1] == 0.0);
}

TEST_CASE("reduce max and mean") {
    const Tensor<double> v({3}, {1, 5, 3});
    CHECK(reduce(v, 0, Reduce::Max)[0] == 5.0);
    const Tensor<double> m({4}, {1, 2, 3, 6});
    CHECK(reduce(m, 0, Reduce::Mean)[0] == doctest::Approx(3.0));

    const Tensor<double> single({1, 3}, {4, 5, 6});
    const Tensor<double> r = reduce(single, 0, Reduce::Mean);  // singleton axis: identity
    CHECK(r.dims() == std::vector<Index>{3});
    for (Index i = 0; i < 3; ++i) CHECK(r[i] == single[i]);
}

TEST_CASE("reduce mean times extent equals sum semantics") {
    Rng rng(11);
    Tensor<double> t({4, 3});
    for (auto& v : t.values()) v = static_cast<double>(rng.uniform_int(-9, 9));
    const auto mean = reduce(t, 0, Reduce::Mean);  // power-of-two extent keeps the division exact
    for (Index q = 0; q < 3; ++q) {
        double sum = 0;
        for (Index e = 0; e < 4; ++e) sum += t.at(e, q);
        CHECK(mean[q] * 4.0 == sum);
    }
}

TEST_CASE("conv2d hand cases") {
    // centered delta kernel mixes channels as an identity
    Tensor<float> x({1, 2, 3, 3});
    Rng rng(3);
    for (auto& v : x.values()) v = static_cast<float>(rng.uniform(-1, 1));
    Tensor<float> w({2, 2, 3, 3});
    w.at(0, 0, 1, 1) = 1.f;
    w.at(1, 1, 1, 1) = 1.f;
    const Tensor<float> bias({2});
    const Tensor<float> y = conv2d(x, w, bias);
    for (Index i = 0; i < y.size(); ++i) CHECK(y[i] == doctest::Approx(x[i]));

    // all-ones 3x3 image and kernel with zero padding: corner 4, edge 6, center 9
    const Tensor<float> ones_x = Tensor<float>::full({1, 1, 3, 3}, 1.f);
    const Tensor<float> ones_w = Tensor<float>::full({1, 1, 3, 3}, 1.f);
    const Tensor<float> c = conv2d(ones_x, ones_w, Tensor<float>({1}));
    CHECK(c.at(0, 0, 1, 1) == doctest::Approx(9.f));
    CHECK(c.at(0, 0, 0, 0) == doctest::Approx(4.f));
    CHECK(c.at(0, 0, 0, 1) == doctest::Approx(6.f));

    // zero weights, bias c -> constant c
    const Tensor<float> zw({1, 1, 3, 3});
    const Tensor<float> zb({1}, {2.5f});
    const Tensor<float> z = conv2d(ones_x, zw, zb);
    for (Index i = 0; i < z.size(); ++i) CHECK(z[i] == doctest::Approx(2.5f));

    CHECK_THROWS_AS(conv2d(ones_x, Tensor<float>({1, 2, 3, 3}), Tensor<float>({1})), ShapeError);
}

TEST_CASE("conv2d linearity") {
    Rng rng(5);
    const auto x = oracle::random_tensor<float>(rng, {2, 4, 5, 5});
    const auto y = oracle::random_tensor<float>(rng, {2, 4, 5, 5});
    const auto w = oracle::random_tensor<float>(rng, {3, 4, 3, 3});
    const Tensor<float> bias({3});
    Tensor<float> sum(x.dims());
    for (Index i = 0; i < sum.size(); ++i) sum[i] = x[i] + y[i];
    const auto cs = conv2d(sum, w, bias);
    const auto cx = conv2d(x, w, bias);
    const auto cy = conv2d(y, w, bias);
    for (Index i = 0; i < cs.size(); ++i) CHECK(cs[i] == doctest::Approx(cx[i] + cy[i]).epsilon(1e-5));
}

TEST_CASE("gfst round trip is bit exact and converts dtypes") {
    const auto dir = std::filesystem::temp_directory_path() / "gfseg_gfst_test";
    std::filesystem::create_directories(dir);
    Rng rng(9);
    const auto t = oracle::random_tensor<float>(rng, {2, 3, 4});
    write_gfst(dir / "t.gfst", t);
    const auto back = read_gfst<float>(dir / "t.gfst");
    REQUIRE(back.dims() == t.dims());
    CHECK(std::memcmp(back.data(), t.data(), static_cast<std::size_t>(t.size()) * sizeof(float)) == 0);

    const auto as_double = read_gfst<double>(dir / "t.gfst");
    for (Index i = 0; i < t.size(); ++i) CHECK(as_double[i] == doctest::Approx(double(t[i])));

    std::ofstream bad(dir / "bad.gfst", std::ios::binary);
    bad << "NOPE";
    bad.close();
    CHECK_THROWS_AS(read_gfst<float>(dir / "bad.gfst"), DataError);
    CHECK_THROWS_AS(read_gfst<float>(dir / "missing.gfst"), DataError);
    std::filesystem::remove_all(dir);
}
