#pragma once

// Novel class registration and the incremental session stream. A novel
// kernel is the shot-averaged wGAP of the support features under the
// annotation mask; registration only ever appends rows, so earlier sessions
// are structurally immune to forgetting.

#include <filesystem>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "gfseg/fcp.hpp"
#include "gfseg/kernel_bank.hpp"
#include "gfseg/training.hpp"

namespace gfseg {

template <typename Scalar>
struct SupportSet {
    Tensor<Scalar> feats;  // K x C x H x W, one per shot
    Tensor<Scalar> masks;  // K x H x W binary, novel-class pixels
    int class_id = -1;
};

template <typename Scalar>
void validate_supports(const SupportSet<Scalar>& s) {
    if (s.feats.rank() != 4 || s.feats.dim(0) < 1) throw DataError("support set needs at least one shot");
    const Index k = s.feats.dim(0), h = s.feats.dim(2), w = s.feats.dim(3);
    if (s.masks.dims() != std::vector<Index>{k, h, w}) throw ShapeError("support masks must be K x H x W");
    for (Index i = 0; i < k; ++i) {
        Scalar count = Scalar(0);
        for (Index q = 0; q < h * w; ++q) {
            const Scalar v = s.masks[i * h * w + q];
            if (v != Scalar(0) && v != Scalar(1)) throw DataError("support mask must be binary");
            count += v;
        }
        if (count == Scalar(0)) throw DataError("support mask for class " + std::to_string(s.class_id) + " has no positive pixel");
    }
}

// One kernel row per novel class: wGAP under the annotation mask, averaged
// over the shots. Rows are stacked in the order the supports are given.
template <typename Scalar>
Tensor<Scalar> register_novel(const FrozenModel<Scalar>& model, std::span<const SupportSet<Scalar>> supports) {
    const Index c = model.bank.channels();
    Tensor<Scalar> rows({static_cast<Index>(supports.size()), c});
    for (std::size_t s = 0; s < supports.size(); ++s) {
        const auto& sup = supports[s];
        validate_supports(sup);
        if (sup.feats.dim(1) != c) throw ShapeError("support channels do not match the model");
        const Index k = sup.feats.dim(0), h = sup.feats.dim(2), w = sup.feats.dim(3), p = h * w;
        VectorX<Scalar> acc = VectorX<Scalar>::Zero(c);
        for (Index shot = 0; shot < k; ++shot) {
            Tensor<Scalar> feat({c, h, w});
            std::copy(sup.feats.data() + shot * c * p, sup.feats.data() + (shot + 1) * c * p, feat.data());
            Tensor<Scalar> mask({h, w});
            std::copy(sup.masks.data() + shot * p, sup.masks.data() + (shot + 1) * p, mask.data());
            acc += wgap(feat, mask).prototype.vector();
        }
        MatrixMap<Scalar>(rows.data() + static_cast<Index>(s) * c, 1, c) = (acc / Scalar(k)).transpose();
    }
    debug_ensure_finite(rows, "register_novel");
    return rows;
}

// K_w = Concat([K_b, K_n]): a new bank with the novel rows appended. The
// input bank is untouched and its rows are copied bit-exactly.
template <typename Scalar>
KernelBank<Scalar> concat_kernels(const KernelBank<Scalar>& bank, const Tensor<Scalar>& novel_rows,
                                  const std::vector<int>& class_ids, int session_id) {
    if (novel_rows.rank() != 2 || novel_rows.dim(1) != bank.channels())
        throw ShapeError("novel rows must be N_n x C with the bank's channel count");
    if (static_cast<Index>(class_ids.size()) != novel_rows.dim(0)) throw RegistryError("one class id per novel row required");
    std::set<int> seen(bank.class_ids.begin(), bank.class_ids.end());
    for (const int id : class_ids)
        if (!seen.insert(id).second) throw RegistryError("class " + std::to_string(id) + " already registered");

    const Index n0 = bank.rows(), nn = novel_rows.dim(0), c = bank.channels();
    KernelBank<Scalar> out;
    out.kernels = Tensor<Scalar>({n0 + nn, c});
    std::copy(bank.kernels.data(), bank.kernels.data() + n0 * c, out.kernels.data());
    std::copy(novel_rows.data(), novel_rows.data() + nn * c, out.kernels.data() + n0 * c);
    out.class_ids = bank.class_ids;
    out.class_ids.insert(out.class_ids.end(), class_ids.begin(), class_ids.end());
    out.base_count = bank.base_count;
    out.session_of = bank.session_of;
    out.session_of.insert(out.session_of.end(), class_ids.size(), session_id);
    validate_bank(out);
    return out;
}

struct SessionInfo {
    int session_id = 0;
    std::vector<int> class_ids;
};

// Ordered record of the base session plus the incremental novel sessions.
// bank holds every registered row, base rows first.
template <typename Scalar>
struct SessionRegistry {
    KernelBank<Scalar> bank;
    std::vector<SessionInfo> sessions;
};

template <typename Scalar>
void validate_registry(const SessionRegistry<Scalar>& reg) {
    validate_bank(reg.bank);
    if (reg.sessions.empty() || reg.sessions.front().session_id != 0)
        throw RegistryError("registry must start with base session 0");
    std::size_t rows = 0;
    std::set<int> seen;
    for (std::size_t t = 0; t < reg.sessions.size(); ++t) {
        const auto& s = reg.sessions[t];
        if (s.session_id != static_cast<int>(t)) throw RegistryError("session ids must be contiguous from 0");
        for (const int id : s.class_ids)
            if (!seen.insert(id).second) throw RegistryError("class " + std::to_string(id) + " appears in two sessions");
        rows += s.class_ids.size();
    }
    if (rows != static_cast<std::size_t>(reg.bank.rows())) throw RegistryError("session class lists do not cover the bank");
    if (static_cast<Index>(reg.sessions.front().class_ids.size()) != reg.bank.base_count)
        throw RegistryError("session 0 must hold exactly the base classes");
}

template <typename Scalar>
SessionRegistry<Scalar> make_base_registry(const FrozenModel<Scalar>& model) {
    SessionRegistry<Scalar> reg;
    reg.bank = model.bank;
    reg.sessions.push_back({0, model.bank.class_ids});
    validate_registry(reg);
    return reg;
}

// K_w^{t+1} = Concat([K_w^t, K_n^{t+1}]). Prior sessions are immutable; the
// expected id guards against out-of-order session attachment.
template <typename Scalar>
SessionRegistry<Scalar> extend_session(const SessionRegistry<Scalar>& reg, const FrozenModel<Scalar>& model,
                                       std::span<const SupportSet<Scalar>> supports, int session_id) {
    validate_registry(reg);
    if (session_id != static_cast<int>(reg.sessions.size()))
        throw RegistryError("session " + std::to_string(session_id) + " attached out of order; expected " +
                            std::to_string(reg.sessions.size()));
    const Tensor<Scalar> rows = register_novel(model, supports);
    std::vector<int> ids;
    for (const auto& s : supports) ids.push_back(s.class_id);
    SessionRegistry<Scalar> out;
    out.bank = concat_kernels(reg.bank, rows, ids, session_id);
    out.sessions = reg.sessions;
    out.sessions.push_back({session_id, ids});
    validate_registry(out);
    return out;
}

// ---------------------------------------------------------------------------
// persistence: bank files plus a session manifest

template <typename Scalar>
void save_registry(const std::filesystem::path& dir, const SessionRegistry<Scalar>& reg) {
    std::filesystem::create_directories(dir);
    save_bank(dir / "bank", reg.bank);
    Manifest m;
    m.set("format", "gfseg-registry/1");
    m.set("sessions", static_cast<std::int64_t>(reg.sessions.size()));
    for (const auto& s : reg.sessions)
        m.set_int_list("session." + std::to_string(s.session_id) + ".classes", s.class_ids.begin(), s.class_ids.end());
    m.save(dir / "registry.manifest");
}

template <typename Scalar>
SessionRegistry<Scalar> load_registry(const std::filesystem::path& dir) {
    const Manifest m = Manifest::load(dir / "registry.manifest");
    SessionRegistry<Scalar> reg;
    reg.bank = load_bank<Scalar>(dir / "bank");
    const auto count = m.get_int("sessions");
    for (std::int64_t t = 0; t < count; ++t) {
        SessionInfo info;
        info.session_id = static_cast<int>(t);
        for (const auto id : m.get_int_list("session." + std::to_string(t) + ".classes"))
            info.class_ids.push_back(static_cast<int>(id));
        reg.sessions.push_back(std::move(info));
    }
    validate_registry(reg);
    return reg;
}

} // namespace gfseg
