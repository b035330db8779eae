#pragma once

// Brute-force reference implementations used as independent oracles. These
// deliberately use plain nested loops over tensor elements and never call
// the library's optimized paths.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "gfseg/rng.hpp"
#include "gfseg/tensor.hpp"

namespace oracle {

using gfseg::Index;
using gfseg::Tensor;

template <typename Scalar>
Tensor<Scalar> random_tensor(gfseg::Rng& rng, std::vector<Index> dims, double lo = -1.0, double hi = 1.0) {
    Tensor<Scalar> t(std::move(dims));
    for (auto& v : t.values()) v = static_cast<Scalar>(rng.uniform(lo, hi));
    return t;
}

template <typename Scalar>
Tensor<Scalar> naive_matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
    const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<Scalar> out({m, n});
    for (Index i = 0; i < m; ++i)
        for (Index j = 0; j < n; ++j) {
            Scalar acc = 0;
            for (Index t = 0; t < k; ++t) acc += a.at(i, t) * b.at(t, j);
            out.at(i, j) = acc;
        }
    return out;
}

// P[b,n,c] = sum_{x,y} S[b,n,x,y] F[b,c,x,y], written as the spec's triple
// loop.
template <typename Scalar>
Tensor<Scalar> naive_assemble(const Tensor<Scalar>& scores, const Tensor<Scalar>& feat) {
    const Index B = scores.dim(0), N = scores.dim(1), H = scores.dim(2), W = scores.dim(3), C = feat.dim(1);
    Tensor<Scalar> protos({B, N, C});
    for (Index b = 0; b < B; ++b)
        for (Index n = 0; n < N; ++n)
            for (Index c = 0; c < C; ++c) {
                Scalar acc = 0;
                for (Index y = 0; y < H; ++y)
                    for (Index x = 0; x < W; ++x) acc += scores.at(b, n, y, x) * feat.at(b, c, y, x);
                protos.at(b, n, c) = acc;
            }
    return protos;
}

// A^b[i,p,q] = sum_c (phi F_i + phi_b)[c,p] (theta F_b + theta_b)[c,q].
template <typename Scalar>
Tensor<Scalar> naive_correlation(const Tensor<Scalar>& feats, const Tensor<Scalar>& phi_w, const Tensor<Scalar>& phi_b,
                                 const Tensor<Scalar>& theta_w, const Tensor<Scalar>& theta_b, Index b) {
    const Index B = feats.dim(0), C = feats.dim(1), H = feats.dim(2), W = feats.dim(3), P = H * W;
    auto project = [&](Index img, const Tensor<Scalar>& w, const Tensor<Scalar>& bias) {
        std::vector<Scalar> out(static_cast<std::size_t>(C * P), Scalar(0));
        for (Index co = 0; co < C; ++co)
            for (Index q = 0; q < P; ++q) {
                Scalar acc = bias[co];
                for (Index ci = 0; ci < C; ++ci) acc += w.at(co, ci) * feats[img * C * P + ci * P + q];
                out[static_cast<std::size_t>(co * P + q)] = acc;
            }
        return out;
    };
    const auto tb = project(b, theta_w, theta_b);
    Tensor<Scalar> vol({B, P, P});
    for (Index i = 0; i < B; ++i) {
        const auto gi = project(i, phi_w, phi_b);
        for (Index p = 0; p < P; ++p)
            for (Index q = 0; q < P; ++q) {
                Scalar acc = 0;
                for (Index c = 0; c < C; ++c)
                    acc += gi[static_cast<std::size_t>(c * P + p)] * tb[static_cast<std::size_t>(c * P + q)];
                vol.at(i, p, q) = acc;
            }
    }
    return vol;
}

template <typename Scalar>
Scalar naive_cosine(const Scalar* a, const Scalar* b, Index n) {
    double dot = 0, na = 0, nb = 0;
    for (Index i = 0; i < n; ++i) {
        dot += double(a[i]) * double(b[i]);
        na += double(a[i]) * double(a[i]);
        nb += double(b[i]) * double(b[i]);
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    if (na < 1e-12 || nb < 1e-12) return Scalar(0);
    return static_cast<Scalar>(dot / (na * nb));
}

// O[b,n,y,x] = cosine(kernel row n, pixel feature).
template <typename Scalar>
Tensor<Scalar> naive_cosine_scores(const Tensor<Scalar>& kernels, const Tensor<Scalar>& feat) {
    const Index N = kernels.dim(0), C = kernels.dim(1), B = feat.dim(0), H = feat.dim(2), W = feat.dim(3);
    Tensor<Scalar> out({B, N, H, W});
    std::vector<Scalar> pix(static_cast<std::size_t>(C));
    for (Index b = 0; b < B; ++b)
        for (Index y = 0; y < H; ++y)
            for (Index x = 0; x < W; ++x) {
                for (Index c = 0; c < C; ++c) pix[static_cast<std::size_t>(c)] = feat.at(b, c, y, x);
                for (Index n = 0; n < N; ++n)
                    out.at(b, n, y, x) = naive_cosine(kernels.data() + n * C, pix.data(), C);
            }
    return out;
}

// Per-pixel full sort; ties keep ascending class order.
template <typename Scalar>
void naive_top2(const Tensor<Scalar>& scores, Index b, Index y, Index x, Index& c1, Scalar& v1, Index& c2, Scalar& v2) {
    const Index N = scores.dim(1);
    std::vector<Index> order(static_cast<std::size_t>(N));
    std::iota(order.begin(), order.end(), Index(0));
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index c) { return scores.at(b, a, y, x) > scores.at(b, c, y, x); });
    c1 = order[0];
    c2 = order[1];
    v1 = scores.at(b, c1, y, x);
    v2 = scores.at(b, c2, y, x);
}

// Central finite difference of a scalar functional with respect to one slot
// of a parameter tensor.
template <typename Fn, typename Scalar>
Scalar central_difference(Fn&& loss, Tensor<Scalar>& param, Index slot, Scalar eps) {
    const Scalar saved = param[slot];
    param[slot] = saved + eps;
    const Scalar up = loss();
    param[slot] = saved - eps;
    const Scalar down = loss();
    param[slot] = saved;
    return (up - down) / (2 * eps);
}

inline double rel_err(double a, double b) {
    const double scale = std::max({std::abs(a), std::abs(b), 1e-8});
    return std::abs(a - b) / scale;
}

} // namespace oracle
