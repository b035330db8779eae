#pragma once

// Joint trainer for the kernel bank and the foreground branch. One step
// runs both forward passes, chains the hand-written VJPs backward through
// the primitives, and applies SGD with momentum and weight decay. The
// cosine adaptation gate is treated as a constant during backprop
// (stop-gradient); only the linear term of the one-off update carries
// gradient back to the kernels.

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <vector>

#include "gfseg/backprop.hpp"
#include "gfseg/fcp.hpp"
#include "gfseg/kernel_bank.hpp"
#include "gfseg/losses.hpp"
#include "gfseg/pkl.hpp"
#include "gfseg/rng.hpp"

namespace gfseg {

template <typename Scalar>
struct TrainConfig {
    Scalar lambda_mix = Scalar(0.6);
    Scalar lr = Scalar(2.5e-3);
    Scalar momentum = Scalar(0.9);
    Scalar weight_decay = Scalar(1e-4);
    Index steps = 300;
    Index batch = 4;
    std::uint64_t seed = 1;
    Scalar pkl_step_scale = Scalar(1);
    Scalar fixed_alpha = Scalar(-1);  // negative: adaptive cosine gate

    std::optional<Scalar> fixed_alpha_opt() const {
        return fixed_alpha >= Scalar(0) ? std::optional<Scalar>(fixed_alpha) : std::nullopt;
    }
};

template <typename Scalar>
void validate_train_config(const TrainConfig<Scalar>& cfg) {
    if (cfg.lambda_mix < Scalar(0) || cfg.lambda_mix > Scalar(1)) throw ConfigError("train: lambda_mix must lie in [0, 1]");
    if (cfg.lr < Scalar(0)) throw ConfigError("train: lr must be >= 0");
    if (cfg.batch < 1) throw ConfigError("train: batch must be >= 1");
    if (cfg.steps < 0) throw ConfigError("train: steps must be >= 0");
}

template <typename Scalar>
struct TrainState {
    KernelBank<Scalar> bank;  // base rows only while training
    FcpParams<Scalar> fcp;
    // momentum buffers mirror the trainable tensors
    Tensor<Scalar> m_kernels, m_phi_w, m_phi_b, m_theta_w, m_theta_b;
    std::array<Tensor<Scalar>, 4> m_dec_w, m_dec_b;
    Index step = 0;
    bool frozen = false;
    std::uint64_t seed = 0;
};

// Fresh state: kernels uniform in +-sqrt(1/C), projections and decoder from
// FcpParams::init, zeroed momentum buffers.
template <typename Scalar>
TrainState<Scalar> init_train_state(Index n_base, Index channels, std::uint64_t seed) {
    if (n_base < 1 || channels < 1) throw ConfigError("trainer needs n_base >= 1 and channels >= 1");
    TrainState<Scalar> st;
    st.seed = seed;
    Rng krng(derive_seed(seed, "kernels"));
    const double lim = std::sqrt(1.0 / static_cast<double>(channels));
    st.bank.kernels = Tensor<Scalar>({n_base, channels});
    for (Scalar& v : st.bank.kernels.values()) v = static_cast<Scalar>(krng.uniform(-lim, lim));
    st.bank.base_count = n_base;
    for (Index i = 0; i < n_base; ++i) {
        st.bank.class_ids.push_back(static_cast<int>(i));
        st.bank.session_of.push_back(0);
    }
    st.fcp = FcpParams<Scalar>::init(channels, derive_seed(seed, "fcp"));
    st.m_kernels = Tensor<Scalar>(st.bank.kernels.dims());
    st.m_phi_w = Tensor<Scalar>(st.fcp.phi_w.dims());
    st.m_phi_b = Tensor<Scalar>(st.fcp.phi_b.dims());
    st.m_theta_w = Tensor<Scalar>(st.fcp.theta_w.dims());
    st.m_theta_b = Tensor<Scalar>(st.fcp.theta_b.dims());
    for (int l = 0; l < 4; ++l) {
        st.m_dec_w[l] = Tensor<Scalar>(st.fcp.dec_w[l].dims());
        st.m_dec_b[l] = Tensor<Scalar>(st.fcp.dec_b[l].dims());
    }
    return st;
}

template <typename Scalar>
struct StepCache {
    Tensor<Scalar> scores0;              // B x N x H x W, persistent kernels
    Tensor<Scalar> protos;               // B x N x C assembled prototypes
    Tensor<Scalar> alpha;                // B x N effective adaptation gates
    std::vector<Tensor<Scalar>> kupd;    // per-image updated kernels, N x C
    Tensor<Scalar> scores1;              // B x N x H x W, updated kernels
    std::vector<Scalar> ce;              // per-image cross entropy
    FcpCache<Scalar> fcp;
    Scalar iou = Scalar(0);
    Scalar total = Scalar(0);
};

template <typename Scalar>
struct Grads {
    Tensor<Scalar> kernels, phi_w, phi_b, theta_w, theta_b;
    std::array<Tensor<Scalar>, 4> dec_w, dec_b;
};

// Both branches forward. alpha_override (B x N) pins the adaptation gates;
// the finite-difference harness uses it to evaluate the exact function the
// stop-gradient backward differentiates.
template <typename Scalar>
StepCache<Scalar> training_forward(const KernelBank<Scalar>& bank, const FcpParams<Scalar>& fcp,
                                   const EpisodeBatch<Scalar>& ep, const TrainConfig<Scalar>& cfg,
                                   const Tensor<Scalar>* alpha_override = nullptr) {
    validate_train_config(cfg);
    validate_episode(ep);
    if (ep.fg_truth.empty() || ep.label_truth.empty()) throw DataError("training episode needs fg and label truth");
    if (bank.base_count != bank.rows()) throw DataError("training bank must hold base rows only");
    const Index b = ep.feats.dim(0), n = bank.rows(), c = bank.channels();
    const Index h = ep.feats.dim(2), w = ep.feats.dim(3), p = h * w;
    if (ep.feats.dim(1) != c) throw ShapeError("training channel mismatch");

    StepCache<Scalar> cache;
    cache.scores0 = segment_scores(bank.kernels, ep.feats);
    cache.protos = assemble_pixel_features(cache.scores0, ep.feats);

    cache.alpha = Tensor<Scalar>({b, n});
    cache.scores1 = Tensor<Scalar>({b, n, h, w});
    const auto fixed = cfg.fixed_alpha_opt();
    for (Index i = 0; i < b; ++i) {
        Tensor<Scalar> protos_i({n, c});
        std::copy(cache.protos.data() + i * n * c, cache.protos.data() + (i + 1) * n * c, protos_i.data());
        Tensor<Scalar> alpha_i({Index(1), n});
        if (alpha_override) {
            for (Index j = 0; j < n; ++j) alpha_i[j] = (*alpha_override)[i * n + j];
        } else if (fixed) {
            for (Index j = 0; j < n; ++j) alpha_i[j] = *fixed;
        } else {
            alpha_i = adaptation_learning_rate(bank.kernels, protos_i);
        }
        std::copy(alpha_i.data(), alpha_i.data() + n, cache.alpha.data() + i * n);
        Tensor<Scalar> kupd = apply_kernel_update(bank.kernels, protos_i, alpha_i, cfg.pkl_step_scale);

        Tensor<Scalar> feat_i({Index(1), c, h, w});
        std::copy(ep.feats.data() + i * c * p, ep.feats.data() + (i + 1) * c * p, feat_i.data());
        const Tensor<Scalar> scores_i = segment_scores(kupd, feat_i);
        std::copy(scores_i.data(), scores_i.data() + n * p, cache.scores1.data() + i * n * p);
        cache.kupd.push_back(std::move(kupd));
    }

    cache.ce = cross_entropy_per_image(cache.scores1, ep.label_truth);
    cache.fcp = fcp_forward_cached(ep, fcp);
    cache.iou = iou_loss(cache.fcp.decode.fg, ep.fg_truth);
    cache.total = total_loss<Scalar>(cache.ce, cache.iou, cfg.lambda_mix);
    return cache;
}

// Reverse-mode pass over the cached forward. Phi and Theta receive no loss
// gradient: the correlation mask's hard threshold cuts the only path, so
// only weight decay moves them.
template <typename Scalar>
Grads<Scalar> training_backward(const KernelBank<Scalar>& bank, const FcpParams<Scalar>& fcp,
                                const EpisodeBatch<Scalar>& ep, const TrainConfig<Scalar>& cfg,
                                const StepCache<Scalar>& cache) {
    const Index b = ep.feats.dim(0), n = bank.rows(), c = bank.channels();
    const Index h = ep.feats.dim(2), w = ep.feats.dim(3), p = h * w;
    const Scalar lambda = cfg.lambda_mix;

    Grads<Scalar> g;
    g.kernels = Tensor<Scalar>(bank.kernels.dims());
    g.phi_w = Tensor<Scalar>(fcp.phi_w.dims());
    g.phi_b = Tensor<Scalar>(fcp.phi_b.dims());
    g.theta_w = Tensor<Scalar>(fcp.theta_w.dims());
    g.theta_b = Tensor<Scalar>(fcp.theta_b.dims());

    // --- kernel branch, per image
    auto gk = g.kernels.matrix(n, c);
    for (Index i = 0; i < b; ++i) {
        ConstMatrixMap<Scalar> fi(ep.feats.data() + i * c * p, c, p);
        ConstMatrixMap<Scalar> s1(cache.scores1.data() + i * n * p, n, p);
        MatrixX<Scalar> g1 = s1;  // d total / d logits of the updated scores
        for (Index q = 0; q < p; ++q) {
            const auto label = static_cast<Index>(ep.label_truth[i * p + q]);
            g1(label, q) -= Scalar(1);
        }
        g1 *= lambda / Scalar(p);

        const MatrixX<Scalar> d_kupd = g1 * fi.transpose();  // N x C
        MatrixX<Scalar> d_protos(n, c);
        for (Index j = 0; j < n; ++j) {
            const Scalar gate = Scalar(2) * cfg.pkl_step_scale * cache.alpha[i * n + j];
            gk.row(j) += (Scalar(1) - gate) * d_kupd.row(j);
            d_protos.row(j) = gate * d_kupd.row(j);
        }

        const MatrixX<Scalar> d_s0 = d_protos * fi;  // N x P
        ConstMatrixMap<Scalar> s0(cache.scores0.data() + i * n * p, n, p);
        const MatrixX<Scalar> g0 = softmax_vjp<Scalar>(s0, d_s0);
        gk.noalias() += g0 * fi.transpose();
    }

    // --- foreground branch: IoU loss -> sigmoid -> decoder convs
    const Tensor<Scalar>& m = cache.fcp.decode.fg;
    Tensor<Scalar> d_out({b, Index(1), h, w});
    for (Index i = 0; i < b; ++i) {
        Scalar inter = Scalar(0), uni = Scalar(0);
        for (Index q = 0; q < p; ++q) {
            const Scalar pv = m[i * p + q];
            const Scalar yv = ep.fg_truth[i * p + q];
            inter += pv * yv;
            uni += pv + yv - pv * yv;
        }
        if (uni <= Scalar(0)) continue;
        const Scalar scale = (Scalar(1) - lambda) / Scalar(b);
        for (Index q = 0; q < p; ++q) {
            const Scalar pv = m[i * p + q];
            const Scalar yv = ep.fg_truth[i * p + q];
            const Scalar dm = -scale * (yv * uni - inter * (Scalar(1) - yv)) / (uni * uni);
            d_out[i * p + q] = dm * pv * (Scalar(1) - pv);  // through the sigmoid
        }
    }

    const auto& dc = cache.fcp.decode;
    Conv2dGrads<Scalar> c4 = conv2d_vjp(dc.z3, fcp.dec_w[3], d_out);
    g.dec_w[3] = std::move(c4.dw);
    g.dec_b[3] = std::move(c4.db);
    relu_vjp_inplace(c4.dx, dc.z3);
    Conv2dGrads<Scalar> c3 = conv2d_vjp(dc.z2, fcp.dec_w[2], c4.dx);
    g.dec_w[2] = std::move(c3.dw);
    g.dec_b[2] = std::move(c3.db);
    relu_vjp_inplace(c3.dx, dc.z2);
    Conv2dGrads<Scalar> c2 = conv2d_vjp(dc.z1, fcp.dec_w[1], c3.dx);
    g.dec_w[1] = std::move(c2.dw);
    g.dec_b[1] = std::move(c2.db);
    relu_vjp_inplace(c2.dx, dc.z1);
    Conv2dGrads<Scalar> c1 = conv2d_vjp(dc.x, fcp.dec_w[0], c2.dx);
    g.dec_w[0] = std::move(c1.dw);
    g.dec_b[0] = std::move(c1.db);
    return g;
}

namespace detail {

template <typename Scalar>
void sgd_update(Tensor<Scalar>& param, Tensor<Scalar>& buf, const Tensor<Scalar>& grad, const TrainConfig<Scalar>& cfg) {
    for (Index i = 0; i < param.size(); ++i) {
        const Scalar g = grad[i] + cfg.weight_decay * param[i];
        buf[i] = cfg.momentum * buf[i] + g;
        param[i] -= cfg.lr * buf[i];
    }
}

} // namespace detail

template <typename Scalar>
struct LossReport {
    Index step = 0;
    Scalar ce_sum = Scalar(0);
    Scalar iou = Scalar(0);
    Scalar total = Scalar(0);
};

template <typename Scalar>
LossReport<Scalar> train_step(TrainState<Scalar>& state, const EpisodeBatch<Scalar>& ep, const TrainConfig<Scalar>& cfg) {
    if (state.frozen) throw TrainingError("train_step on a frozen state");
    StepCache<Scalar> cache;
    try {
        cache = training_forward(state.bank, state.fcp, ep, cfg);
    } catch (const DataError& e) {
        throw TrainingError("step " + std::to_string(state.step) + ": " + e.what());
    }
    if (!std::isfinite(cache.total)) {
        std::ostringstream os;
        os << "non-finite loss at step " << state.step << ": iou=" << cache.iou << " ce=";
        for (const Scalar v : cache.ce) os << v << ' ';
        throw TrainingError(os.str());
    }
    const Grads<Scalar> g = training_backward(state.bank, state.fcp, ep, cfg, cache);

    detail::sgd_update(state.bank.kernels, state.m_kernels, g.kernels, cfg);
    detail::sgd_update(state.fcp.phi_w, state.m_phi_w, g.phi_w, cfg);
    detail::sgd_update(state.fcp.phi_b, state.m_phi_b, g.phi_b, cfg);
    detail::sgd_update(state.fcp.theta_w, state.m_theta_w, g.theta_w, cfg);
    detail::sgd_update(state.fcp.theta_b, state.m_theta_b, g.theta_b, cfg);
    for (int l = 0; l < 4; ++l) {
        detail::sgd_update(state.fcp.dec_w[l], state.m_dec_w[l], g.dec_w[l], cfg);
        detail::sgd_update(state.fcp.dec_b[l], state.m_dec_b[l], g.dec_b[l], cfg);
    }

    LossReport<Scalar> report;
    report.step = state.step++;
    for (const Scalar v : cache.ce) report.ce_sum += v;
    report.iou = cache.iou;
    report.total = cache.total;
    return report;
}

// ---------------------------------------------------------------------------
// frozen snapshot

template <typename Scalar>
struct FrozenModel {
    KernelBank<Scalar> bank;
    FcpParams<Scalar> fcp;
};

// Immutable snapshot for registration and inference; the state refuses
// further train_step calls afterwards. Idempotent.
template <typename Scalar>
FrozenModel<Scalar> freeze(TrainState<Scalar>& state) {
    state.frozen = true;
    return FrozenModel<Scalar>{state.bank, state.fcp};
}

template <typename Scalar>
void save_model(const std::filesystem::path& dir, const FrozenModel<Scalar>& model) {
    std::filesystem::create_directories(dir);
    Manifest m;
    m.set("format", "gfseg-model/1");
    m.set("channels", static_cast<std::int64_t>(model.bank.channels()));
    m.set("bank", "bank");
    m.set("fcp", "fcp");
    m.save(dir / "model.manifest");
    save_bank(dir / "bank", model.bank);
    save_fcp_params(dir / "fcp", model.fcp);
}

template <typename Scalar>
FrozenModel<Scalar> load_model(const std::filesystem::path& dir) {
    const Manifest m = Manifest::load(dir / "model.manifest");
    FrozenModel<Scalar> model;
    model.bank = load_bank<Scalar>(dir / m.get("bank"));
    model.fcp = load_fcp_params<Scalar>(dir / m.get("fcp"));
    if (model.bank.channels() != model.fcp.channels()) throw DataError("model bank/fcp channel mismatch");
    return model;
}

} // namespace gfseg
