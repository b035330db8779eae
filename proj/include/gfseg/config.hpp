#pragma once

// Run configuration: a flat tree of dotted keys with defaults, loaded from a
// manifest-style file and overridden by command-line --set entries. Unknown
// keys are rejected, and the resolved tree is echoed into every output
// directory.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "gfseg/manifest.hpp"
#include "gfseg/synthgen.hpp"

namespace gfseg {

struct RunConfig {
    std::uint64_t seed = 1;
    std::string precision = "f32";  // f32 | f64

    WorldSpec world;  // world.seed is resolved from the run seed

    Index objects_per_image = 2;

    Index train_steps = 300;
    Index train_batch = 4;
    double train_lr = 2.5e-3;
    double train_momentum = 0.9;
    double train_weight_decay = 1e-4;
    double train_lambda = 0.6;

    double pkl_step_scale = 1.0;
    double pkl_fixed_alpha = -1.0;  // negative: adaptive cosine gate

    double infer_bias_b = 0.5;
    double infer_fg_threshold = 0.5;
    bool use_pkl_update = true;
    bool use_fcp = true;
    bool use_cbbi = true;
    bool novel_only_bias = false;

    Index registry_k_shots = 1;

    Index cifss_sessions = 2;
    Index cifss_classes_per_session = 1;

    Index eval_base_samples = 8;
    Index eval_per_novel_samples = 4;
};

namespace detail {

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    throw ConfigError("config key '" + key + "' expects a boolean, got '" + v + "'");
}

inline std::int64_t parse_int(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const auto out = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "' expects an integer, got '" + v + "'");
    }
}

inline double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double out = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "' expects a number, got '" + v + "'");
    }
}

} // namespace detail

// Applies one dotted key. Throws ConfigError on unknown keys or bad values.
inline void apply_config_entry(RunConfig& cfg, const std::string& key, const std::string& value) {
    using detail::parse_bool;
    using detail::parse_double;
    using detail::parse_int;
    if (key == "seed") cfg.seed = static_cast<std::uint64_t>(parse_int(key, value));
    else if (key == "precision") {
        if (value != "f32" && value != "f64") throw ConfigError("precision must be f32 or f64");
        cfg.precision = value;
    } else if (key == "world.channels") cfg.world.channels = parse_int(key, value);
    else if (key == "world.n_base") cfg.world.n_base = parse_int(key, value);
    else if (key == "world.n_novel") cfg.world.n_novel = parse_int(key, value);
    else if (key == "world.height") cfg.world.height = parse_int(key, value);
    else if (key == "world.width") cfg.world.width = parse_int(key, value);
    else if (key == "world.noise_sigma") cfg.world.noise_sigma = parse_double(key, value);
    else if (key == "world.min_angle_deg") cfg.world.min_angle_deg = parse_double(key, value);
    else if (key == "world.layout") {
        if (value == "blocks") cfg.world.layout = Layout::Blocks;
        else if (value == "blobs") cfg.world.layout = Layout::Blobs;
        else throw ConfigError("world.layout must be blocks or blobs");
    } else if (key == "episode.objects_per_image") cfg.objects_per_image = parse_int(key, value);
    else if (key == "train.steps") cfg.train_steps = parse_int(key, value);
    else if (key == "train.batch") cfg.train_batch = parse_int(key, value);
    else if (key == "train.lr") cfg.train_lr = parse_double(key, value);
    else if (key == "train.momentum") cfg.train_momentum = parse_double(key, value);
    else if (key == "train.weight_decay") cfg.train_weight_decay = parse_double(key, value);
    else if (key == "train.lambda_mix") cfg.train_lambda = parse_double(key, value);
    else if (key == "pkl.step_scale") cfg.pkl_step_scale = parse_double(key, value);
    else if (key == "pkl.fixed_alpha") cfg.pkl_fixed_alpha = parse_double(key, value);
    else if (key == "infer.bias_b") cfg.infer_bias_b = parse_double(key, value);
    else if (key == "infer.fg_threshold") cfg.infer_fg_threshold = parse_double(key, value);
    else if (key == "infer.use_pkl_update") cfg.use_pkl_update = parse_bool(key, value);
    else if (key == "infer.use_fcp") cfg.use_fcp = parse_bool(key, value);
    else if (key == "infer.use_cbbi") cfg.use_cbbi = parse_bool(key, value);
    else if (key == "infer.novel_only_bias") cfg.novel_only_bias = parse_bool(key, value);
    else if (key == "registry.k_shots") cfg.registry_k_shots = parse_int(key, value);
    else if (key == "cifss.sessions") cfg.cifss_sessions = parse_int(key, value);
    else if (key == "cifss.classes_per_session") cfg.cifss_classes_per_session = parse_int(key, value);
    else if (key == "eval.base_samples") cfg.eval_base_samples = parse_int(key, value);
    else if (key == "eval.per_novel_samples") cfg.eval_per_novel_samples = parse_int(key, value);
    else throw ConfigError("unknown config key: " + key);
}

// Defaults, then file entries, then overrides ("key=value" strings).
inline RunConfig load_run_config(const std::optional<std::filesystem::path>& file,
                                 const std::vector<std::string>& overrides) {
    RunConfig cfg;
    if (file) {
        const Manifest m = Manifest::load(*file);
        for (const auto& [k, v] : m.entries()) apply_config_entry(cfg, k, v);
    }
    for (const auto& kv : overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
        apply_config_entry(cfg, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
    }
    cfg.world.seed = cfg.seed;
    return cfg;
}

// Stable-order echo of the resolved configuration; reparseable as a config
// file.
inline Manifest echo_config(const RunConfig& cfg) {
    Manifest m;
    auto num = [](double v) {
        char buf[40];
        std::snprintf(buf, sizeof(buf), "%.12g", v);
        return std::string(buf);
    };
    m.set("seed", cfg.seed);
    m.set("precision", cfg.precision);
    m.set("world.channels", static_cast<std::int64_t>(cfg.world.channels));
    m.set("world.n_base", static_cast<std::int64_t>(cfg.world.n_base));
    m.set("world.n_novel", static_cast<std::int64_t>(cfg.world.n_novel));
    m.set("world.height", static_cast<std::int64_t>(cfg.world.height));
    m.set("world.width", static_cast<std::int64_t>(cfg.world.width));
    m.set("world.noise_sigma", num(cfg.world.noise_sigma));
    m.set("world.min_angle_deg", num(cfg.world.min_angle_deg));
    m.set("world.layout", cfg.world.layout == Layout::Blocks ? "blocks" : "blobs");
    m.set("episode.objects_per_image", static_cast<std::int64_t>(cfg.objects_per_image));
    m.set("train.steps", static_cast<std::int64_t>(cfg.train_steps));
    m.set("train.batch", static_cast<std::int64_t>(cfg.train_batch));
    m.set("train.lr", num(cfg.train_lr));
    m.set("train.momentum", num(cfg.train_momentum));
    m.set("train.weight_decay", num(cfg.train_weight_decay));
    m.set("train.lambda_mix", num(cfg.train_lambda));
    m.set("pkl.step_scale", num(cfg.pkl_step_scale));
    m.set("pkl.fixed_alpha", num(cfg.pkl_fixed_alpha));
    m.set("infer.bias_b", num(cfg.infer_bias_b));
    m.set("infer.fg_threshold", num(cfg.infer_fg_threshold));
    m.set("infer.use_pkl_update", cfg.use_pkl_update ? "true" : "false");
    m.set("infer.use_fcp", cfg.use_fcp ? "true" : "false");
    m.set("infer.use_cbbi", cfg.use_cbbi ? "true" : "false");
    m.set("infer.novel_only_bias", cfg.novel_only_bias ? "true" : "false");
    m.set("registry.k_shots", static_cast<std::int64_t>(cfg.registry_k_shots));
    m.set("cifss.sessions", static_cast<std::int64_t>(cfg.cifss_sessions));
    m.set("cifss.classes_per_session", static_cast<std::int64_t>(cfg.cifss_classes_per_session));
    m.set("eval.base_samples", static_cast<std::int64_t>(cfg.eval_base_samples));
    m.set("eval.per_novel_samples", static_cast<std::int64_t>(cfg.eval_per_novel_samples));
    return m;
}

} // namespace gfseg
