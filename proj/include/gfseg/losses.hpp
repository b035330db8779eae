#pragma once

// Training losses: pixel-wise cross entropy over base classes, soft IoU for
// the foreground branch, and the lambda-weighted total.

#include <cmath>
#include <span>
#include <vector>

#include "gfseg/tensor.hpp"

namespace gfseg {

inline constexpr double kLogClamp = 1e-12;

// Mean over each image's pixels of -log(score at the true class).
// scores: B x N x H x W (softmax-normalized), truth: B x H x W class indices.
template <typename Scalar>
std::vector<Scalar> cross_entropy_per_image(const Tensor<Scalar>& scores, const Tensor<Scalar>& truth) {
    if (scores.rank() != 4 || truth.rank() != 3) throw ShapeError("cross_entropy expects B x N x H x W scores and B x H x W truth");
    const Index b = scores.dim(0), n = scores.dim(1), p = scores.dim(2) * scores.dim(3);
    if (truth.dim(0) != b || truth.dim(1) * truth.dim(2) != p) throw ShapeError("cross_entropy truth shape mismatch");
    std::vector<Scalar> ce(static_cast<std::size_t>(b), Scalar(0));
    for (Index i = 0; i < b; ++i) {
        Scalar acc = Scalar(0);
        for (Index q = 0; q < p; ++q) {
            const auto label = static_cast<Index>(truth[i * p + q]);
            if (label < 0 || label >= n) throw DataError("cross_entropy label " + std::to_string(label) + " outside [0, N)");
            const Scalar s = std::max(scores[(i * n + label) * p + q], Scalar(kLogClamp));
            acc -= std::log(s);
        }
        ce[static_cast<std::size_t>(i)] = acc / Scalar(p);
    }
    return ce;
}

// Batch mean of the per-image cross entropies.
template <typename Scalar>
Scalar cross_entropy_loss(const Tensor<Scalar>& scores, const Tensor<Scalar>& truth) {
    const auto ce = cross_entropy_per_image(scores, truth);
    Scalar acc = Scalar(0);
    for (const Scalar v : ce) acc += v;
    return acc / Scalar(ce.size());
}

// Soft IoU loss, (1/B) sum_b (1 - I_b / U_b) with I = sum p*y and
// U = sum (p + y - p*y). An image with empty truth and zero prediction
// contributes 0.
template <typename Scalar>
Scalar iou_loss(const Tensor<Scalar>& pred, const Tensor<Scalar>& truth) {
    if (pred.rank() != 3 || !pred.same_dims(truth)) throw ShapeError("iou_loss expects matching B x H x W tensors");
    const Index b = pred.dim(0), p = pred.dim(1) * pred.dim(2);
    Scalar acc = Scalar(0);
    for (Index i = 0; i < b; ++i) {
        Scalar inter = Scalar(0), uni = Scalar(0);
        for (Index q = 0; q < p; ++q) {
            const Scalar pv = pred[i * p + q];
            const Scalar yv = truth[i * p + q];
            if (yv != Scalar(0) && yv != Scalar(1)) throw DataError("iou_loss truth must be binary");
            inter += pv * yv;
            uni += pv + yv - pv * yv;
        }
        if (uni > Scalar(0)) acc += Scalar(1) - inter / uni;
    }
    return acc / Scalar(b);
}

// lambda * sum_b ce_b + (1 - lambda) * iou.
template <typename Scalar>
Scalar total_loss(std::span<const Scalar> ce_per_image, Scalar iou, Scalar lambda_mix) {
    if (lambda_mix < Scalar(0) || lambda_mix > Scalar(1)) throw ConfigError("lambda_mix must lie in [0, 1]");
    Scalar ce_sum = Scalar(0);
    for (const Scalar v : ce_per_image) ce_sum += v;
    return lambda_mix * ce_sum + (Scalar(1) - lambda_mix) * iou;
}

} // namespace gfseg
