#pragma once

// Synthetic feature-map world standing in for a pretrained backbone: unit
// class prototypes with a guaranteed pairwise angle, rectangular or blobby
// labeled layouts, Gaussian feature noise, base/novel splits, pseudo
// episodes, support shots, and incremental session streams. Everything is a
// pure function of (spec, seed, draw counter).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "gfseg/fcp.hpp"
#include "gfseg/manifest.hpp"
#include "gfseg/registry.hpp"
#include "gfseg/rng.hpp"
#include "gfseg/tensor.hpp"
#include "gfseg/tensor_io.hpp"

namespace gfseg {

enum class Layout { Blocks, Blobs };

struct WorldSpec {
    Index channels = 16;
    Index n_base = 6;  // includes background as class 0
    Index n_novel = 2;
    Index height = 32;
    Index width = 32;
    double noise_sigma = 0.3;
    double min_angle_deg = 60.0;
    Layout layout = Layout::Blocks;
    std::uint64_t seed = 1;
};

inline void validate_world_spec(const WorldSpec& spec) {
    if (spec.channels < 8 || spec.channels % 8 != 0) throw ConfigError("world: channels must be >= 8 and divisible by 8");
    if (spec.n_base < 2) throw ConfigError("world: n_base must be >= 2 (background plus one object class)");
    if (spec.n_novel < 0) throw ConfigError("world: n_novel must be >= 0");
    if (spec.height < 4 || spec.width < 4) throw ConfigError("world: spatial extents must be >= 4");
    if (spec.noise_sigma < 0) throw ConfigError("world: noise_sigma must be >= 0");
    if (spec.min_angle_deg <= 0 || spec.min_angle_deg > 90.0) throw ConfigError("world: min_angle_deg must lie in (0, 90]");
}

template <typename Scalar>
struct World {
    WorldSpec spec;
    Tensor<Scalar> prototypes;  // (n_base + n_novel) x C unit rows, class id = row
    std::vector<int> base_ids;
    std::vector<int> novel_ids;

    Index classes() const { return prototypes.dim(0); }
};

// One generated image. Labels hold world class ids; fg marks labels != 0.
template <typename Scalar>
struct SyntheticSample {
    Tensor<Scalar> feat;    // 1 x C x H x W
    Tensor<Scalar> labels;  // 1 x H x W
    Tensor<Scalar> fg;      // 1 x H x W
    std::vector<std::pair<int, Index>> object_pixels;  // class id -> pixel count
};

namespace detail {

// Unit prototypes with pairwise angle >= min_angle: seeded rejection
// sampling first, deterministic orthonormal fallback (Householder QR of a
// seeded Gaussian matrix) when rejection stalls.
template <typename Scalar>
Tensor<Scalar> make_prototypes(Index count, Index channels, double min_angle_deg, Rng& rng) {
    const double max_cos = std::cos(min_angle_deg * std::numbers::pi / 180.0) + 1e-7;
    Tensor<Scalar> protos({count, channels});
    auto pm = protos.matrix(count, channels);
    bool ok = true;
    for (Index j = 0; j < count && ok; ++j) {
        bool placed = false;
        for (int attempt = 0; attempt < 2000 && !placed; ++attempt) {
            VectorX<Scalar> v(channels);
            for (Index k = 0; k < channels; ++k) v[k] = static_cast<Scalar>(rng.normal());
            const Scalar norm = v.norm();
            if (norm < Scalar(kNormFloor)) continue;
            v /= norm;
            placed = true;
            for (Index i = 0; i < j && placed; ++i)
                if (static_cast<double>(pm.row(i).dot(v)) > max_cos) placed = false;
            if (placed) pm.row(j) = v.transpose();
        }
        ok = placed;
    }
    if (ok) return protos;

    if (count > channels)
        throw ConfigError("cannot place " + std::to_string(count) + " prototypes at >= " + std::to_string(min_angle_deg) +
                          " deg in " + std::to_string(channels) + " channels");
    // orthonormal fallback: angles are 90 deg, which satisfies any feasible spec
    MatrixX<Scalar> gauss(channels, channels);
    for (Index r = 0; r < channels; ++r)
        for (Index c = 0; c < channels; ++c) gauss(r, c) = static_cast<Scalar>(rng.normal());
    const Eigen::HouseholderQR<MatrixX<Scalar>> qr(gauss);
    const MatrixX<Scalar> q = qr.householderQ() * MatrixX<Scalar>::Identity(channels, channels);
    for (Index j = 0; j < count; ++j) pm.row(j) = q.col(j).transpose();
    return protos;
}

} // namespace detail

template <typename Scalar>
World<Scalar> make_world(const WorldSpec& spec) {
    validate_world_spec(spec);
    World<Scalar> world;
    world.spec = spec;
    Rng rng(derive_seed(spec.seed, "prototypes"));
    world.prototypes = detail::make_prototypes<Scalar>(spec.n_base + spec.n_novel, spec.channels, spec.min_angle_deg, rng);
    for (Index i = 0; i < spec.n_base; ++i) world.base_ids.push_back(static_cast<int>(i));
    for (Index i = 0; i < spec.n_novel; ++i) world.novel_ids.push_back(static_cast<int>(spec.n_base + i));
    return world;
}

namespace detail {

// Disjoint axis-aligned rectangles; falls back to fixed vertical bands when
// random placement keeps colliding, so the layout always succeeds.
template <typename Scalar>
void place_blocks(Tensor<Scalar>& labels, const std::vector<int>& object_ids, Index h, Index w, Rng& rng) {
    const Index k = static_cast<Index>(object_ids.size());
    for (Index j = 0; j < k; ++j) {
        const Index lo_h = std::max<Index>(2, h / 6), hi_h = std::max(lo_h, h / 2);
        const Index lo_w = std::max<Index>(2, w / 6), hi_w = std::max(lo_w, w / 2);
        const Index bh = rng.uniform_int(lo_h, hi_h);
        const Index bw = rng.uniform_int(lo_w, hi_w);
        bool placed = false;
        for (int attempt = 0; attempt < 40 && !placed; ++attempt) {
            const Index y0 = rng.uniform_int(0, h - bh);
            const Index x0 = rng.uniform_int(0, w - bw);
            bool clear = true;
            for (Index y = y0; y < y0 + bh && clear; ++y)
                for (Index x = x0; x < x0 + bw; ++x)
                    if (labels[y * w + x] != Scalar(0)) {
                        clear = false;
                        break;
                    }
            if (!clear) continue;
            for (Index y = y0; y < y0 + bh; ++y)
                for (Index x = x0; x < x0 + bw; ++x) labels[y * w + x] = static_cast<Scalar>(object_ids[static_cast<std::size_t>(j)]);
            placed = true;
        }
        if (!placed) {
            const Index band = std::max<Index>(1, w / k);
            const Index x0 = j * band;
            const Index bw2 = std::max<Index>(1, band / 2);
            const Index bh2 = std::max<Index>(1, h / 3);
            for (Index y = 0; y < bh2; ++y)
                for (Index x = x0; x < std::min(w, x0 + bw2); ++x)
                    labels[y * w + x] = static_cast<Scalar>(object_ids[static_cast<std::size_t>(j)]);
        }
    }
}

// Random-walk blobs over free cells; each blob keeps at least its seed cell.
template <typename Scalar>
void place_blobs(Tensor<Scalar>& labels, const std::vector<int>& object_ids, Index h, Index w, Rng& rng) {
    for (const int id : object_ids) {
        Index y = rng.uniform_int(0, h - 1);
        Index x = rng.uniform_int(0, w - 1);
        for (int attempt = 0; attempt < 100 && labels[y * w + x] != Scalar(0); ++attempt) {
            y = rng.uniform_int(0, h - 1);
            x = rng.uniform_int(0, w - 1);
        }
        if (labels[y * w + x] != Scalar(0)) continue;  // grid almost full; skip extra growth
        const Index target = std::max<Index>(4, h * w / 12);
        Index area = 0;
        labels[y * w + x] = static_cast<Scalar>(id);
        ++area;
        const Index max_steps = target * 6;
        for (Index step = 0; step < max_steps && area < target; ++step) {
            const Index dir = rng.uniform_int(0, 3);
            const Index ny = y + (dir == 0 ? -1 : dir == 1 ? 1 : 0);
            const Index nx = x + (dir == 2 ? -1 : dir == 3 ? 1 : 0);
            if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
            const Scalar cur = labels[ny * w + nx];
            if (cur == Scalar(0)) {
                labels[ny * w + nx] = static_cast<Scalar>(id);
                ++area;
            } else if (cur != static_cast<Scalar>(id)) {
                continue;  // do not cross another object
            }
            y = ny;
            x = nx;
        }
    }
}

} // namespace detail

// One image containing the given object classes over a background canvas.
template <typename Scalar>
SyntheticSample<Scalar> sample_image(const World<Scalar>& world, const std::vector<int>& object_ids, Rng& rng) {
    const auto& spec = world.spec;
    const Index h = spec.height, w = spec.width, c = spec.channels, p = h * w;
    for (const int id : object_ids)
        if (id <= 0 || id >= world.classes()) throw ConfigError("object class " + std::to_string(id) + " outside the world");

    SyntheticSample<Scalar> s;
    Tensor<Scalar> grid({h, w});
    if (spec.layout == Layout::Blocks)
        detail::place_blocks(grid, object_ids, h, w, rng);
    else
        detail::place_blobs(grid, object_ids, h, w, rng);

    s.labels = Tensor<Scalar>({Index(1), h, w}, std::vector<Scalar>(grid.data(), grid.data() + p));
    s.fg = Tensor<Scalar>({Index(1), h, w});
    for (Index q = 0; q < p; ++q) s.fg[q] = grid[q] != Scalar(0) ? Scalar(1) : Scalar(0);

    s.feat = Tensor<Scalar>({Index(1), c, h, w});
    const auto pm = world.prototypes.matrix(world.classes(), c);
    for (Index q = 0; q < p; ++q) {
        const auto cls = static_cast<Index>(grid[q]);
        for (Index ch = 0; ch < c; ++ch)
            s.feat[ch * p + q] = pm(cls, ch) + static_cast<Scalar>(spec.noise_sigma * rng.normal());
    }

    for (const int id : object_ids) {
        Index count = 0;
        for (Index q = 0; q < p; ++q)
            if (grid[q] == static_cast<Scalar>(id)) ++count;
        s.object_pixels.emplace_back(id, count);
    }
    return s;
}

// Pseudo episode of B images, each mixing classes_per_image distinct base
// object classes. Training never sees novel classes.
template <typename Scalar>
EpisodeBatch<Scalar> sample_episode(const World<Scalar>& world, Index batch, Index classes_per_image, Rng& rng) {
    const auto& spec = world.spec;
    if (batch < 1) throw ConfigError("episode batch must be >= 1");
    if (classes_per_image < 1 || classes_per_image >= spec.n_base)
        throw ConfigError("classes_per_image must lie in [1, n_base)");
    const Index h = spec.height, w = spec.width, c = spec.channels, p = h * w;

    EpisodeBatch<Scalar> ep;
    ep.feats = Tensor<Scalar>({batch, c, h, w});
    ep.fg_truth = Tensor<Scalar>({batch, h, w});
    ep.label_truth = Tensor<Scalar>({batch, h, w});
    for (Index b = 0; b < batch; ++b) {
        // draw distinct object classes from the base split (background excluded)
        std::vector<int> pool(world.base_ids.begin() + 1, world.base_ids.end());
        std::vector<int> chosen;
        for (Index j = 0; j < classes_per_image; ++j) {
            const Index pick = rng.uniform_int(0, static_cast<Index>(pool.size()) - 1);
            chosen.push_back(pool[static_cast<std::size_t>(pick)]);
            pool.erase(pool.begin() + pick);
        }
        const SyntheticSample<Scalar> s = sample_image(world, chosen, rng);
        std::copy(s.feat.data(), s.feat.data() + c * p, ep.feats.data() + b * c * p);
        std::copy(s.fg.data(), s.fg.data() + p, ep.fg_truth.data() + b * p);
        std::copy(s.labels.data(), s.labels.data() + p, ep.label_truth.data() + b * p);
    }
    return ep;
}

// K annotated shots of one novel class (with one base distractor object per
// shot when the base split offers any).
template <typename Scalar>
SupportSet<Scalar> sample_supports(const World<Scalar>& world, int class_id, Index k_shots, Rng& rng) {
    const auto& spec = world.spec;
    if (std::find(world.novel_ids.begin(), world.novel_ids.end(), class_id) == world.novel_ids.end())
        throw ConfigError("class " + std::to_string(class_id) + " is not in the novel split");
    if (k_shots < 1) throw ConfigError("k_shots must be >= 1");
    const Index h = spec.height, w = spec.width, c = spec.channels, p = h * w;

    SupportSet<Scalar> sup;
    sup.class_id = class_id;
    sup.feats = Tensor<Scalar>({k_shots, c, h, w});
    sup.masks = Tensor<Scalar>({k_shots, h, w});
    for (Index shot = 0; shot < k_shots; ++shot) {
        std::vector<int> objects{class_id};
        if (spec.n_base > 2) objects.push_back(static_cast<int>(rng.uniform_int(1, spec.n_base - 1)));
        const SyntheticSample<Scalar> s = sample_image(world, objects, rng);
        std::copy(s.feat.data(), s.feat.data() + c * p, sup.feats.data() + shot * c * p);
        for (Index q = 0; q < p; ++q)
            sup.masks[shot * p + q] = s.labels[q] == static_cast<Scalar>(class_id) ? Scalar(1) : Scalar(0);
    }
    validate_supports(sup);
    return sup;
}

// Disjoint novel-class groups for T sessions, in the world's novel order.
template <typename Scalar>
std::vector<std::vector<int>> make_cifss_stream(const World<Scalar>& world, Index sessions, Index classes_per_session) {
    if (sessions < 1 || classes_per_session < 1) throw ConfigError("cifss stream needs sessions >= 1 and classes >= 1");
    if (sessions * classes_per_session > static_cast<Index>(world.novel_ids.size()))
        throw ConfigError("cifss stream exhausts the novel pool: " + std::to_string(sessions) + " x " +
                          std::to_string(classes_per_session) + " > " + std::to_string(world.novel_ids.size()));
    std::vector<std::vector<int>> groups;
    Index next = 0;
    for (Index t = 0; t < sessions; ++t) {
        std::vector<int> g;
        for (Index j = 0; j < classes_per_session; ++j) g.push_back(world.novel_ids[static_cast<std::size_t>(next++)]);
        groups.push_back(std::move(g));
    }
    return groups;
}

// ---------------------------------------------------------------------------
// world persistence

template <typename Scalar>
void save_world(const std::filesystem::path& dir, const World<Scalar>& world) {
    std::filesystem::create_directories(dir);
    write_gfst(dir / "prototypes.gfst", world.prototypes);
    Manifest m;
    m.set("format", "gfseg-world/1");
    m.set("channels", static_cast<std::int64_t>(world.spec.channels));
    m.set("n_base", static_cast<std::int64_t>(world.spec.n_base));
    m.set("n_novel", static_cast<std::int64_t>(world.spec.n_novel));
    m.set("height", static_cast<std::int64_t>(world.spec.height));
    m.set("width", static_cast<std::int64_t>(world.spec.width));
    m.set("noise_sigma", std::to_string(world.spec.noise_sigma));
    m.set("min_angle_deg", std::to_string(world.spec.min_angle_deg));
    m.set("layout", world.spec.layout == Layout::Blocks ? "blocks" : "blobs");
    m.set("seed", world.spec.seed);
    m.set("prototypes", "prototypes.gfst");
    m.save(dir / "world.manifest");
}

template <typename Scalar>
World<Scalar> load_world(const std::filesystem::path& dir) {
    const Manifest m = Manifest::load(dir / "world.manifest");
    WorldSpec spec;
    spec.channels = m.get_int("channels");
    spec.n_base = m.get_int("n_base");
    spec.n_novel = m.get_int("n_novel");
    spec.height = m.get_int("height");
    spec.width = m.get_int("width");
    spec.noise_sigma = m.get_double("noise_sigma");
    spec.min_angle_deg = m.get_double("min_angle_deg");
    spec.layout = m.get("layout") == "blobs" ? Layout::Blobs : Layout::Blocks;
    spec.seed = static_cast<std::uint64_t>(m.get_int("seed"));
    World<Scalar> world;
    world.spec = spec;
    world.prototypes = read_gfst<Scalar>(dir / m.get("prototypes"));
    for (Index i = 0; i < spec.n_base; ++i) world.base_ids.push_back(static_cast<int>(i));
    for (Index i = 0; i < spec.n_novel; ++i) world.novel_ids.push_back(static_cast<int>(spec.n_base + i));
    return world;
}

} // namespace gfseg
