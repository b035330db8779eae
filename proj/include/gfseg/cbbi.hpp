#pragma once

// Conditional bias based inference: cosine scoring against the whole-class
// bank, a per-image refresh of the base kernels, top-2 candidate maps, and
// the biased decision inside the predicted foreground.

#include "gfseg/fcp.hpp"
#include "gfseg/pkl.hpp"
#include "gfseg/registry.hpp"
#include "gfseg/tensor.hpp"

namespace gfseg {

template <typename Scalar>
struct InferenceConfig {
    Scalar bias_b = Scalar(0.5);
    Scalar fg_threshold = Scalar(0.5);
    bool use_pkl_update = true;
    bool use_fcp = true;
    bool use_cbbi = true;
    bool novel_only_bias = false;
    Scalar pkl_step_scale = Scalar(1);
    Scalar fixed_alpha = Scalar(-1);  // negative: adaptive cosine gate

    std::optional<Scalar> fixed_alpha_opt() const {
        return fixed_alpha >= Scalar(0) ? std::optional<Scalar>(fixed_alpha) : std::nullopt;
    }
};

template <typename Scalar>
void validate_inference_config(const InferenceConfig<Scalar>& cfg) {
    if (cfg.bias_b < Scalar(0)) throw ConfigError("infer: bias_b must be >= 0");
    if (cfg.fg_threshold <= Scalar(0) || cfg.fg_threshold >= Scalar(1)) throw ConfigError("infer: fg_threshold must lie in (0, 1)");
}

// O_p[b,i,x,y] = cosine(bank row i, F[b,:,x,y]), values in [-1, 1].
template <typename Scalar>
Tensor<Scalar> classwise_cosine_scores(const KernelBank<Scalar>& bank, const Tensor<Scalar>& feat) {
    if (feat.rank() != 4) throw ShapeError("classwise_cosine_scores expects B x C x H x W features");
    const Index n = bank.rows(), c = bank.channels();
    const Index b = feat.dim(0), h = feat.dim(2), w = feat.dim(3), p = h * w;
    if (feat.dim(1) != c) throw ShapeError("classwise_cosine_scores channel mismatch");
    Tensor<Scalar> scores({b, n, h, w});
    std::vector<Scalar> knorm(static_cast<std::size_t>(n));
    const auto km = bank.kernels.matrix(n, c);
    for (Index j = 0; j < n; ++j) knorm[static_cast<std::size_t>(j)] = km.row(j).norm();
    for (Index i = 0; i < b; ++i) {
        ConstMatrixMap<Scalar> fi(feat.data() + i * c * p, c, p);
        const MatrixX<Scalar> dots = km * fi;  // N x P
        for (Index q = 0; q < p; ++q) {
            const Scalar fn = fi.col(q).norm();
            for (Index j = 0; j < n; ++j) {
                const Scalar kn = knorm[static_cast<std::size_t>(j)];
                scores[(i * n + j) * p + q] =
                    (fn < Scalar(kNormFloor) || kn < Scalar(kNormFloor)) ? Scalar(0) : dots(j, q) / (kn * fn);
            }
        }
    }
    debug_ensure_finite(scores, "classwise_cosine_scores");
    return scores;
}

// One-off refresh of the base rows against a single query image, driven by
// scores over the base rows only. Novel rows stay bit-identical.
template <typename Scalar>
KernelBank<Scalar> inference_pkl_refresh(const KernelBank<Scalar>& bank, const Tensor<Scalar>& feat,
                                         const InferenceConfig<Scalar>& cfg) {
    if (feat.rank() != 4 || feat.dim(0) != 1) throw ShapeError("inference_pkl_refresh works on a single image");
    const Tensor<Scalar> base = base_rows(bank);
    const Tensor<Scalar> scores = segment_scores(base, feat);
    const Tensor<Scalar> protos_b = assemble_pixel_features(scores, feat);  // 1 x N_b x C
    Tensor<Scalar> protos({bank.base_count, bank.channels()});
    std::copy(protos_b.data(), protos_b.data() + protos_b.size(), protos.data());
    const Tensor<Scalar> updated = prototypical_kernel_update(base, protos, cfg.pkl_step_scale, cfg.fixed_alpha_opt());
    return with_base_rows(bank, updated);
}

template <typename Scalar>
struct CandidateMaps {
    Tensor<Scalar> top1_value, top2_value;  // B x H x W
    Tensor<Scalar> top1_class, top2_class;  // B x H x W row indices
};

// Largest and second largest score per pixel; ties resolve toward the lower
// class index.
template <typename Scalar>
CandidateMaps<Scalar> top2(const Tensor<Scalar>& scores) {
    if (scores.rank() != 4) throw ShapeError("top2 expects B x N x H x W scores");
    const Index b = scores.dim(0), n = scores.dim(1), p = scores.dim(2) * scores.dim(3);
    if (n < 2) throw ConfigError("top2 needs at least two classes");
    CandidateMaps<Scalar> out;
    const std::vector<Index> dims{b, scores.dim(2), scores.dim(3)};
    out.top1_value = Tensor<Scalar>(dims);
    out.top2_value = Tensor<Scalar>(dims);
    out.top1_class = Tensor<Scalar>(dims);
    out.top2_class = Tensor<Scalar>(dims);
    for (Index i = 0; i < b; ++i) {
        for (Index q = 0; q < p; ++q) {
            Index c1 = -1, c2 = -1;
            Scalar v1 = Scalar(0), v2 = Scalar(0);
            for (Index j = 0; j < n; ++j) {
                const Scalar v = scores[(i * n + j) * p + q];
                if (c1 < 0 || v > v1) {
                    c2 = c1;
                    v2 = v1;
                    c1 = j;
                    v1 = v;
                } else if (c2 < 0 || v > v2) {
                    c2 = j;
                    v2 = v;
                }
            }
            out.top1_value[i * p + q] = v1;
            out.top2_value[i * p + q] = v2;
            out.top1_class[i * p + q] = static_cast<Scalar>(c1);
            out.top2_class[i * p + q] = static_cast<Scalar>(c2);
        }
    }
    return out;
}

// Inside the foreground mask the second candidate competes with a constant
// head start b; outside, the first candidate wins outright. Ties keep the
// first candidate. With novel_only_bias the head start applies only where
// the second candidate is a novel row.
template <typename Scalar>
Tensor<Scalar> cbbi_decide(const CandidateMaps<Scalar>& cands, const Tensor<Scalar>& fg_mask,
                           const InferenceConfig<Scalar>& cfg, Index base_count) {
    validate_inference_config(cfg);
    if (!cands.top1_value.same_dims(fg_mask)) throw ShapeError("cbbi_decide foreground mask shape mismatch");
    Tensor<Scalar> out(cands.top1_class.dims());
    for (Index i = 0; i < out.size(); ++i) {
        Scalar cls = cands.top1_class[i];
        if (fg_mask[i] == Scalar(1)) {
            const bool second_is_novel = static_cast<Index>(cands.top2_class[i]) >= base_count;
            const Scalar bias = (!cfg.novel_only_bias || second_is_novel) ? cfg.bias_b : Scalar(0);
            if (cands.top2_value[i] + bias > cands.top1_value[i]) cls = cands.top2_class[i];
        }
        out[i] = cls;
    }
    return out;
}

// Full inference against a registry: optional per-image base-kernel refresh,
// cosine scoring over all registered rows, FCP foreground on the singleton
// episode, and the conditional-bias decision. Returns class ids.
template <typename Scalar>
Tensor<Scalar> infer(const FrozenModel<Scalar>& model, const SessionRegistry<Scalar>& reg, const Tensor<Scalar>& feat,
                     const InferenceConfig<Scalar>& cfg) {
    validate_inference_config(cfg);
    validate_registry(reg);
    if (feat.rank() != 4) throw ShapeError("infer expects B x C x H x W features");
    const Index b = feat.dim(0), c = feat.dim(1), h = feat.dim(2), w = feat.dim(3), p = h * w;
    if (c != reg.bank.channels()) throw ShapeError("infer channel mismatch with the registry");

    Tensor<Scalar> out({b, h, w});
    for (Index i = 0; i < b; ++i) {
        Tensor<Scalar> feat_i({Index(1), c, h, w});
        std::copy(feat.data() + i * c * p, feat.data() + (i + 1) * c * p, feat_i.data());

        KernelBank<Scalar> bank = cfg.use_pkl_update ? inference_pkl_refresh(reg.bank, feat_i, cfg) : reg.bank;
        const Tensor<Scalar> scores = classwise_cosine_scores(bank, feat_i);

        Tensor<Scalar> labels;
        if (cfg.use_cbbi) {
            const CandidateMaps<Scalar> cands = top2(scores);
            Tensor<Scalar> fg({Index(1), h, w});
            if (cfg.use_fcp) {
                EpisodeBatch<Scalar> singleton;
                singleton.feats = feat_i;
                const Tensor<Scalar> prob = fcp_forward(singleton, model.fcp);
                for (Index q = 0; q < p; ++q) fg[q] = prob[q] > cfg.fg_threshold ? Scalar(1) : Scalar(0);
            }
            labels = cbbi_decide(cands, fg, cfg, bank.base_count);
        } else {
            // plain argmax over the cosine scores, ties toward the lowest row
            labels = Tensor<Scalar>({Index(1), h, w});
            const Index n = bank.rows();
            for (Index q = 0; q < p; ++q) {
                Index best = 0;
                Scalar hi = scores[q];
                for (Index j = 1; j < n; ++j) {
                    const Scalar v = scores[j * p + q];
                    if (v > hi) {
                        hi = v;
                        best = j;
                    }
                }
                labels[q] = static_cast<Scalar>(best);
            }
        }
        for (Index q = 0; q < p; ++q) out[i * p + q] = static_cast<Scalar>(reg.bank.class_ids[static_cast<std::size_t>(
            static_cast<Index>(labels[q]))]);
    }
    return out;
}

} // namespace gfseg
