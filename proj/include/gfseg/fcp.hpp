#pragma once

// Foreground contextual perception: pixel-wise correlation across a pseudo
// episode, hybrid max/mean pooling, a thresholded correlation mask, weighted
// GAP prototypes, refined responses, and a residual conv decoder that emits
// a class-agnostic foreground probability per pixel.

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "gfseg/manifest.hpp"
#include "gfseg/rng.hpp"
#include "gfseg/tensor.hpp"
#include "gfseg/tensor_io.hpp"

namespace gfseg {

// A training batch treated as an episode. The truth fields are empty at
// inference time.
template <typename Scalar>
struct EpisodeBatch {
    Tensor<Scalar> feats;        // B x C x H x W
    Tensor<Scalar> fg_truth;     // B x H x W binary, or empty
    Tensor<Scalar> label_truth;  // B x H x W class ids, or empty
};

template <typename Scalar>
void validate_episode(const EpisodeBatch<Scalar>& ep) {
    if (ep.feats.rank() != 4 || ep.feats.dim(0) < 1) throw ShapeError("episode features must be B x C x H x W with B >= 1");
    const Index b = ep.feats.dim(0), h = ep.feats.dim(2), w = ep.feats.dim(3);
    const std::vector<Index> mask_dims{b, h, w};
    if (!ep.fg_truth.empty()) {
        if (ep.fg_truth.dims() != mask_dims) throw ShapeError("fg_truth shape mismatch");
        for (const Scalar v : ep.fg_truth.values())
            if (v != Scalar(0) && v != Scalar(1)) throw DataError("fg_truth must be binary");
    }
    if (!ep.label_truth.empty() && ep.label_truth.dims() != mask_dims) throw ShapeError("label_truth shape mismatch");
    if (!ep.fg_truth.empty() && !ep.label_truth.empty()) {
        for (Index i = 0; i < ep.fg_truth.size(); ++i)
            if ((ep.label_truth[i] != Scalar(0)) != (ep.fg_truth[i] == Scalar(1)))
                throw DataError("fg_truth disagrees with label_truth != background");
    }
}

// Projection and decoder weights. The decoder halves the channel count at
// each of its four 3x3 layers (clamped at 1) and ends in a single logit map.
template <typename Scalar>
struct FcpParams {
    Tensor<Scalar> phi_w, phi_b;      // C x C, C
    Tensor<Scalar> theta_w, theta_b;  // C x C, C
    std::array<Tensor<Scalar>, 4> dec_w;  // Cout x Cin x 3 x 3
    std::array<Tensor<Scalar>, 4> dec_b;

    Index channels() const { return phi_w.rank() == 2 ? phi_w.dim(0) : 0; }

    static std::array<Index, 5> channel_chain(Index c) {
        return {c, std::max<Index>(c / 2, 1), std::max<Index>(c / 4, 1), std::max<Index>(c / 8, 1), 1};
    }

    // Weights uniform in +-sqrt(1/fan_in) from a seeded stream, biases zero.
    static FcpParams init(Index c, std::uint64_t seed) {
        if (c < 1) throw ConfigError("fcp needs at least one channel");
        Rng rng(seed);
        auto fill = [&rng](Tensor<Scalar>& t, Index fan_in) {
            const double lim = std::sqrt(1.0 / static_cast<double>(fan_in));
            for (Scalar& v : t.values()) v = static_cast<Scalar>(rng.uniform(-lim, lim));
        };
        FcpParams p;
        p.phi_w = Tensor<Scalar>({c, c});
        p.phi_b = Tensor<Scalar>({c});
        p.theta_w = Tensor<Scalar>({c, c});
        p.theta_b = Tensor<Scalar>({c});
        fill(p.phi_w, c);
        fill(p.theta_w, c);
        const auto chain = channel_chain(c);
        for (int l = 0; l < 4; ++l) {
            p.dec_w[l] = Tensor<Scalar>({chain[l + 1], chain[l], Index(3), Index(3)});
            p.dec_b[l] = Tensor<Scalar>({chain[l + 1]});
            fill(p.dec_w[l], chain[l] * 9);
        }
        return p;
    }
};

template <typename Scalar>
void validate_fcp_params(const FcpParams<Scalar>& p) {
    const Index c = p.channels();
    if (c < 1 || p.phi_w.rank() != 2 || p.phi_w.dim(1) != c || p.phi_b.dims() != std::vector<Index>{c} ||
        p.theta_w.dims() != std::vector<Index>{c, c} || p.theta_b.dims() != std::vector<Index>{c})
        throw ConfigError("fcp projections must be C x C with C biases");
    Index in = c;
    for (int l = 0; l < 4; ++l) {
        const auto& w = p.dec_w[l];
        if (w.rank() != 4 || w.dim(1) != in || w.dim(2) != 3 || w.dim(3) != 3)
            throw ConfigError("fcp decoder layer " + std::to_string(l + 1) + " breaks the channel chain");
        if (p.dec_b[l].dims() != std::vector<Index>{w.dim(0)})
            throw ConfigError("fcp decoder bias " + std::to_string(l + 1) + " has the wrong length");
        in = w.dim(0);
    }
    if (in != 1) throw ConfigError("fcp decoder must end in one channel");
}

namespace detail {

// 1x1 projection W * F + b applied to one image, C x P in, C x P out.
template <typename Scalar>
MatrixX<Scalar> project_1x1(const Tensor<Scalar>& w, const Tensor<Scalar>& b, ConstMatrixMap<Scalar> f) {
    MatrixX<Scalar> out = w.matrix(w.dim(0), w.dim(1)) * f;
    out.colwise() += b.vector();
    return out;
}

// Columns of f normalized to unit length; norms under the floor map to zero.
template <typename Scalar>
MatrixX<Scalar> normalized_columns(ConstMatrixMap<Scalar> f) {
    MatrixX<Scalar> out = f;
    for (Index q = 0; q < out.cols(); ++q) {
        const Scalar n = out.col(q).norm();
        if (n < Scalar(kNormFloor))
            out.col(q).setZero();
        else
            out.col(q) /= n;
    }
    return out;
}

} // namespace detail

// Correlation volume of query image b against the whole episode:
// vol[i, p, q] = <Phi(F_i)[:,p], Theta(F_b)[:,q]>  -> B x HW x HW.
template <typename Scalar>
Tensor<Scalar> pairwise_correlation(const EpisodeBatch<Scalar>& ep, const FcpParams<Scalar>& params, Index b) {
    validate_episode(ep);
    const Index nb = ep.feats.dim(0), c = ep.feats.dim(1), p = ep.feats.dim(2) * ep.feats.dim(3);
    if (b < 0 || b >= nb) throw ShapeError("pairwise_correlation query index out of range");
    if (params.channels() != c) throw ShapeError("pairwise_correlation channel mismatch");
    ConstMatrixMap<Scalar> fb(ep.feats.data() + b * c * p, c, p);
    const MatrixX<Scalar> tb = detail::project_1x1(params.theta_w, params.theta_b, fb);
    Tensor<Scalar> vol({nb, p, p});
    for (Index i = 0; i < nb; ++i) {
        ConstMatrixMap<Scalar> fi(ep.feats.data() + i * c * p, c, p);
        const MatrixX<Scalar> gi = detail::project_1x1(params.phi_w, params.phi_b, fi);
        MatrixMap<Scalar> vi(vol.data() + i * p * p, p, p);
        vi.noalias() = gi.transpose() * tb;
    }
    debug_ensure_finite(vol, "pairwise_correlation");
    return vol;
}

// Max over support pixels, then mean over episode images:
// abar[q] = mean_i max_p vol[i, p, q], reshaped to H x W.
template <typename Scalar>
Tensor<Scalar> hybrid_pool(const Tensor<Scalar>& vol, Index h, Index w) {
    if (vol.rank() != 3 || vol.dim(1) != vol.dim(2) || vol.dim(1) != h * w)
        throw ShapeError("hybrid_pool expects B x HW x HW with matching H, W");
    const Tensor<Scalar> maxed = reduce(vol, 1, Reduce::Max);  // B x HW
    Tensor<Scalar> pooled = reduce(maxed, 0, Reduce::Mean);    // HW
    return Tensor<Scalar>({h, w}, std::vector<Scalar>(pooled.data(), pooled.data() + pooled.size()));
}

// Spatial softmax rescaled by HW (uniform input sits at 1.0), thresholded at
// 0.5. The result is binary and idempotent under re-thresholding.
template <typename Scalar>
Tensor<Scalar> correlation_mask(const Tensor<Scalar>& abar) {
    if (abar.rank() != 2) throw ShapeError("correlation_mask expects an H x W map");
    const Index p = abar.size();
    Scalar hi = abar[0];
    for (Index q = 1; q < p; ++q) hi = std::max(hi, abar[q]);
    Scalar sum = Scalar(0);
    std::vector<Scalar> e(static_cast<std::size_t>(p));
    for (Index q = 0; q < p; ++q) {
        e[static_cast<std::size_t>(q)] = std::exp(abar[q] - hi);
        sum += e[static_cast<std::size_t>(q)];
    }
    Tensor<Scalar> mask(abar.dims());
    for (Index q = 0; q < p; ++q)
        mask[q] = (e[static_cast<std::size_t>(q)] / sum) * Scalar(p) > Scalar(0.5) ? Scalar(1) : Scalar(0);
    return mask;
}

template <typename Scalar>
struct WgapResult {
    Tensor<Scalar> prototype;  // C
    bool mask_fallback = false;
};

// Weighted GAP of the L2-normalized features under the mask:
// p = sum_{h,w} normalize(F(h,w)) * mask(h,w) / sum mask. An all-zero mask
// falls back to all-ones and reports the degenerate input.
template <typename Scalar>
WgapResult<Scalar> wgap(const Tensor<Scalar>& feat, const Tensor<Scalar>& mask) {
    if (feat.rank() != 3 || mask.rank() != 2 || feat.dim(1) != mask.dim(0) || feat.dim(2) != mask.dim(1))
        throw ShapeError("wgap expects C x H x W features with an H x W mask");
    const Index c = feat.dim(0), p = mask.size();
    ConstMatrixMap<Scalar> f(feat.data(), c, p);
    const MatrixX<Scalar> nf = detail::normalized_columns(f);

    WgapResult<Scalar> res;
    Scalar weight = Scalar(0);
    for (Index q = 0; q < p; ++q) weight += mask[q];
    VectorX<Scalar> acc = VectorX<Scalar>::Zero(c);
    if (weight == Scalar(0)) {
        res.mask_fallback = true;
        for (Index q = 0; q < p; ++q) acc += nf.col(q);
        weight = static_cast<Scalar>(p);
    } else {
        for (Index q = 0; q < p; ++q)
            if (mask[q] != Scalar(0)) acc += mask[q] * nf.col(q);
    }
    res.prototype = Tensor<Scalar>({c});
    res.prototype.vector() = acc / weight;
    debug_ensure_finite(res.prototype, "wgap");
    return res;
}

// R(h,w) = (1/B) sum_i <protos[i], normalize(F_b(h,w))>  -> H x W.
template <typename Scalar>
Tensor<Scalar> refined_responses(const Tensor<Scalar>& protos, const Tensor<Scalar>& feat) {
    if (protos.rank() != 2 || feat.rank() != 3 || protos.dim(1) != feat.dim(0))
        throw ShapeError("refined_responses expects B x C prototypes and C x H x W features");
    const Index nb = protos.dim(0), c = feat.dim(0), h = feat.dim(1), w = feat.dim(2), p = h * w;
    ConstMatrixMap<Scalar> f(feat.data(), c, p);
    const MatrixX<Scalar> nf = detail::normalized_columns(f);
    const MatrixX<Scalar> per_proto = protos.matrix(nb, c) * nf;  // B x P
    Tensor<Scalar> resp({h, w});
    MatrixMap<Scalar>(resp.data(), 1, p).noalias() = per_proto.colwise().mean();
    debug_ensure_finite(resp, "refined_responses");
    return resp;
}

// Intermediate decoder activations, kept for the trainer's backward pass.
template <typename Scalar>
struct DecodeCache {
    Tensor<Scalar> x;             // B x C x H x W residual input F (1 + R)
    Tensor<Scalar> z1, z2, z3;    // post-ReLU activations
    Tensor<Scalar> fg;            // B x H x W sigmoid output
};

// M_f = sigmoid(D(F + F * R)), D = four 3x3 conv layers with ReLU between
// the first three and sigmoid after the last.
template <typename Scalar>
DecodeCache<Scalar> decode_foreground_cached(const Tensor<Scalar>& feat, const Tensor<Scalar>& resp,
                                             const FcpParams<Scalar>& params) {
    if (feat.rank() != 4 || resp.rank() != 3) throw ShapeError("decode_foreground expects B x C x H x W features and B x H x W responses");
    const Index b = feat.dim(0), c = feat.dim(1), h = feat.dim(2), w = feat.dim(3), p = h * w;
    if (resp.dim(0) != b || resp.dim(1) != h || resp.dim(2) != w) throw ShapeError("decode_foreground response shape mismatch");
    if (params.channels() != c) throw ConfigError("decode_foreground channel mismatch with fcp params");
    validate_fcp_params(params);

    DecodeCache<Scalar> cache;
    cache.x = Tensor<Scalar>({b, c, h, w});
    for (Index i = 0; i < b; ++i)
        for (Index ch = 0; ch < c; ++ch)
            for (Index q = 0; q < p; ++q) {
                const Index at = (i * c + ch) * p + q;
                cache.x[at] = feat[at] * (Scalar(1) + resp[i * p + q]);
            }

    auto relu = [](Tensor<Scalar>& t) {
        for (Scalar& v : t.values()) v = std::max(v, Scalar(0));
    };
    cache.z1 = conv2d(cache.x, params.dec_w[0], params.dec_b[0]);
    relu(cache.z1);
    cache.z2 = conv2d(cache.z1, params.dec_w[1], params.dec_b[1]);
    relu(cache.z2);
    cache.z3 = conv2d(cache.z2, params.dec_w[2], params.dec_b[2]);
    relu(cache.z3);
    const Tensor<Scalar> logits = conv2d(cache.z3, params.dec_w[3], params.dec_b[3]);  // B x 1 x H x W
    cache.fg = Tensor<Scalar>({b, h, w});
    for (Index i = 0; i < cache.fg.size(); ++i) cache.fg[i] = Scalar(1) / (Scalar(1) + std::exp(-logits[i]));
    return cache;
}

template <typename Scalar>
Tensor<Scalar> decode_foreground(const Tensor<Scalar>& feat, const Tensor<Scalar>& resp, const FcpParams<Scalar>& params) {
    return decode_foreground_cached(feat, resp, params).fg;
}

template <typename Scalar>
struct FcpCache {
    std::vector<Tensor<Scalar>> masks;  // per image H x W correlation masks
    Tensor<Scalar> protos;              // B x C wgap prototypes
    Tensor<Scalar> responses;           // B x H x W
    DecodeCache<Scalar> decode;
    int mask_fallbacks = 0;
};

// Full pipeline: per image, correlation -> hybrid pool -> mask -> wgap; then
// every prototype scores every query image, and the decoder maps the
// residual features to a foreground probability.
template <typename Scalar>
FcpCache<Scalar> fcp_forward_cached(const EpisodeBatch<Scalar>& ep, const FcpParams<Scalar>& params) {
    validate_episode(ep);
    const Index nb = ep.feats.dim(0), c = ep.feats.dim(1), h = ep.feats.dim(2), w = ep.feats.dim(3), p = h * w;

    FcpCache<Scalar> cache;
    cache.protos = Tensor<Scalar>({nb, c});
    for (Index i = 0; i < nb; ++i) {
        const Tensor<Scalar> vol = pairwise_correlation(ep, params, i);
        const Tensor<Scalar> abar = hybrid_pool(vol, h, w);
        Tensor<Scalar> mask = correlation_mask(abar);
        Tensor<Scalar> fi({c, h, w});
        std::copy(ep.feats.data() + i * c * p, ep.feats.data() + (i + 1) * c * p, fi.data());
        auto res = wgap(fi, mask);
        if (res.mask_fallback) ++cache.mask_fallbacks;
        std::copy(res.prototype.data(), res.prototype.data() + c, cache.protos.data() + i * c);
        cache.masks.push_back(std::move(mask));
    }

    cache.responses = Tensor<Scalar>({nb, h, w});
    for (Index i = 0; i < nb; ++i) {
        Tensor<Scalar> fi({c, h, w});
        std::copy(ep.feats.data() + i * c * p, ep.feats.data() + (i + 1) * c * p, fi.data());
        const Tensor<Scalar> ri = refined_responses(cache.protos, fi);
        std::copy(ri.data(), ri.data() + p, cache.responses.data() + i * p);
    }

    cache.decode = decode_foreground_cached(ep.feats, cache.responses, params);
    return cache;
}

template <typename Scalar>
Tensor<Scalar> fcp_forward(const EpisodeBatch<Scalar>& ep, const FcpParams<Scalar>& params) {
    return fcp_forward_cached(ep, params).decode.fg;
}

// ---------------------------------------------------------------------------
// parameter i/o: a directory of GFST tensors plus a manifest naming them

template <typename Scalar>
void save_fcp_params(const std::filesystem::path& dir, const FcpParams<Scalar>& params) {
    std::filesystem::create_directories(dir);
    Manifest m;
    m.set("format", "gfseg-fcp/1");
    m.set("channels", static_cast<std::int64_t>(params.channels()));
    auto put = [&](const std::string& name, const Tensor<Scalar>& t) {
        write_gfst(dir / (name + ".gfst"), t);
        m.set("layer." + name, name + ".gfst");
    };
    put("phi_w", params.phi_w);
    put("phi_b", params.phi_b);
    put("theta_w", params.theta_w);
    put("theta_b", params.theta_b);
    for (int l = 0; l < 4; ++l) {
        put("dec" + std::to_string(l + 1) + "_w", params.dec_w[l]);
        put("dec" + std::to_string(l + 1) + "_b", params.dec_b[l]);
    }
    m.save(dir / "fcp.manifest");
}

template <typename Scalar>
FcpParams<Scalar> load_fcp_params(const std::filesystem::path& dir) {
    const Manifest m = Manifest::load(dir / "fcp.manifest");
    auto take = [&](const std::string& name) { return read_gfst<Scalar>(dir / m.get("layer." + name)); };
    FcpParams<Scalar> p;
    p.phi_w = take("phi_w");
    p.phi_b = take("phi_b");
    p.theta_w = take("theta_w");
    p.theta_b = take("theta_b");
    for (int l = 0; l < 4; ++l) {
        p.dec_w[l] = take("dec" + std::to_string(l + 1) + "_w");
        p.dec_b[l] = take("dec" + std::to_string(l + 1) + "_b");
    }
    validate_fcp_params(p);
    return p;
}

} // namespace gfseg
