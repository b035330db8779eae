#pragma once

// Prototypical kernel learning: kernel-vs-pixel scoring, pixel feature
// assembling, the cosine-gated one-off kernel update, and mask prediction.
// All functions are pure; the persistent bank is only ever mutated by the
// trainer.

#include <optional>

#include "gfseg/kernel_bank.hpp"
#include "gfseg/tensor.hpp"

namespace gfseg {

// Class scores as softmax over a 1x1 convolution of the kernels with the
// feature map. kernels: N x C, feat: B x C x H x W -> B x N x H x W,
// softmax-normalized over the class axis.
template <typename Scalar>
Tensor<Scalar> segment_scores(const Tensor<Scalar>& kernels, const Tensor<Scalar>& feat) {
    if (kernels.rank() != 2 || feat.rank() != 4) throw ShapeError("segment_scores expects N x C kernels and B x C x H x W features");
    const Index n = kernels.dim(0), c = kernels.dim(1);
    const Index b = feat.dim(0), h = feat.dim(2), w = feat.dim(3), p = h * w;
    if (feat.dim(1) != c)
        throw ShapeError("segment_scores channel mismatch: kernels " + std::to_string(c) + ", features " + std::to_string(feat.dim(1)));
    Tensor<Scalar> logits({b, n, h, w});
    const auto km = kernels.matrix(n, c);
    for (Index i = 0; i < b; ++i) {
        ConstMatrixMap<Scalar> fi(feat.data() + i * c * p, c, p);
        MatrixMap<Scalar> li(logits.data() + i * n * p, n, p);
        li.noalias() = km * fi;
    }
    return softmax(logits, 1);
}

template <typename Scalar>
Tensor<Scalar> segment_scores(const KernelBank<Scalar>& bank, const Tensor<Scalar>& feat) {
    return segment_scores(base_rows(bank), feat);
}

// Soft class prototypes assembled from the score maps:
// P[b,n,:] = sum_{x,y} S[b,n,x,y] * F[b,:,x,y].  -> B x N x C
template <typename Scalar>
Tensor<Scalar> assemble_pixel_features(const Tensor<Scalar>& scores, const Tensor<Scalar>& feat) {
    if (scores.rank() != 4 || feat.rank() != 4) throw ShapeError("assemble_pixel_features expects rank-4 scores and features");
    const Index b = scores.dim(0), n = scores.dim(1), h = scores.dim(2), w = scores.dim(3);
    const Index c = feat.dim(1), p = h * w;
    if (feat.dim(0) != b || feat.dim(2) != h || feat.dim(3) != w)
        throw ShapeError("assemble_pixel_features batch/spatial mismatch");
    Tensor<Scalar> protos({b, n, c});
    for (Index i = 0; i < b; ++i) {
        ConstMatrixMap<Scalar> si(scores.data() + i * n * p, n, p);
        ConstMatrixMap<Scalar> fi(feat.data() + i * c * p, c, p);
        MatrixMap<Scalar> pi(protos.data() + i * n * c, n, c);
        pi.noalias() = si * fi.transpose();
    }
    debug_ensure_finite(protos, "assemble_pixel_features");
    return protos;
}

// Per-class adaptation learning rate: alpha_j = ReLU(cosine(K_j, P_j)),
// shape 1 x N. Classes absent from the image assemble prototypes unrelated
// to their kernel, so the gate decays toward zero for them.
template <typename Scalar>
Tensor<Scalar> adaptation_learning_rate(const Tensor<Scalar>& kernels, const Tensor<Scalar>& protos) {
    if (kernels.rank() != 2 || protos.rank() != 2 || !kernels.same_dims(protos))
        throw ShapeError("adaptation_learning_rate expects matching N x C kernels and prototypes");
    const Index n = kernels.dim(0), c = kernels.dim(1);
    Tensor<Scalar> alpha({Index(1), n});
    for (Index j = 0; j < n; ++j) {
        const Scalar cos = cosine<Scalar>({kernels.data() + j * c, static_cast<std::size_t>(c)},
                                          {protos.data() + j * c, static_cast<std::size_t>(c)});
        alpha[j] = std::max(cos, Scalar(0));
    }
    return alpha;
}

// The update rule with an explicit gate vector:
//   K~_j = K_j - s * alpha_j * 2 (K_j - P_j)
// where the squared error behind the gradient is summed over channels and s
// is the configurable step scale. Rows with a zero gate come back
// bit-identical.
template <typename Scalar>
Tensor<Scalar> apply_kernel_update(const Tensor<Scalar>& kernels, const Tensor<Scalar>& protos,
                                   const Tensor<Scalar>& alpha, Scalar step_scale) {
    if (kernels.rank() != 2 || protos.rank() != 2 || !kernels.same_dims(protos))
        throw ShapeError("kernel update expects matching N x C kernels and prototypes");
    const Index n = kernels.dim(0), c = kernels.dim(1);
    if (alpha.size() != n) throw ShapeError("kernel update gate length != N");
    Tensor<Scalar> out = kernels;
    for (Index j = 0; j < n; ++j) {
        const Scalar gate = Scalar(2) * step_scale * alpha[j];
        if (gate == Scalar(0)) continue;
        for (Index k = 0; k < c; ++k) {
            const Index q = j * c + k;
            out[q] = kernels[q] - gate * (kernels[q] - protos[q]);
        }
    }
    debug_ensure_finite(out, "apply_kernel_update");
    return out;
}

// One-off update specific to one image, gated by the cosine adaptation rate
// (or by a fixed constant when the fixedALR ablation is active).
template <typename Scalar>
Tensor<Scalar> prototypical_kernel_update(const Tensor<Scalar>& kernels, const Tensor<Scalar>& protos,
                                          Scalar step_scale = Scalar(1),
                                          std::optional<Scalar> fixed_alpha = std::nullopt) {
    Tensor<Scalar> alpha;
    if (fixed_alpha) {
        alpha = Tensor<Scalar>::full({Index(1), kernels.dim(0)}, *fixed_alpha);
    } else {
        alpha = adaptation_learning_rate(kernels, protos);
    }
    return apply_kernel_update(kernels, protos, alpha, step_scale);
}

// Per-pixel argmax over segment_scores of the given kernels; ties go to the
// lowest class index. -> B x H x W of class indices.
template <typename Scalar>
Tensor<Scalar> predict_mask(const Tensor<Scalar>& kernels, const Tensor<Scalar>& feat) {
    const Tensor<Scalar> scores = segment_scores(kernels, feat);
    const Index b = scores.dim(0), n = scores.dim(1), h = scores.dim(2), w = scores.dim(3), p = h * w;
    Tensor<Scalar> labels({b, h, w});
    const Scalar* sp = scores.data();
    for (Index i = 0; i < b; ++i) {
        for (Index q = 0; q < p; ++q) {
            Index best = 0;
            Scalar hi = sp[i * n * p + q];
            for (Index j = 1; j < n; ++j) {
                const Scalar v = sp[(i * n + j) * p + q];
                if (v > hi) {
                    hi = v;
                    best = j;
                }
            }
            labels[i * p + q] = static_cast<Scalar>(best);
        }
    }
    return labels;
}

} // namespace gfseg
