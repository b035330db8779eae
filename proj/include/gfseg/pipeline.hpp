#pragma once

// Command implementations behind the CLI: synth, train, register, infer,
// eval, cifss, ablate. Each command reads artifacts from earlier stages,
// never mutates its inputs, writes into a fresh directory, and echoes the
// resolved configuration for provenance.

#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "gfseg/cbbi.hpp"
#include "gfseg/config.hpp"
#include "gfseg/metrics.hpp"
#include "gfseg/registry.hpp"
#include "gfseg/synthgen.hpp"
#include "gfseg/training.hpp"

namespace gfseg {

namespace fs = std::filesystem;

namespace detail {

inline void prepare_out_dir(const fs::path& out) {
    if (fs::exists(out) && !fs::is_empty(out)) throw ConfigError("output directory exists and is not empty: " + out.string());
    fs::create_directories(out);
}

inline void write_config_echo(const RunConfig& cfg, const fs::path& out) { echo_config(cfg).save(out / "config.echo"); }

inline void require_artifact(const fs::path& p, const char* what) {
    if (!fs::exists(p)) throw DataError(std::string(what) + " not found: " + p.string());
}

inline std::string fmt_loss(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

} // namespace detail

struct EvalSampleRef {
    Index index = 0;
    std::vector<int> classes;  // object classes present (background implied)
    fs::path feat, labels, fg;
};

struct DatasetIndex {
    fs::path root;
    std::vector<EvalSampleRef> eval_samples;
    std::vector<int> support_classes;
    Index k_shots = 0;
};

inline DatasetIndex load_dataset_index(const fs::path& dataset) {
    detail::require_artifact(dataset / "dataset.manifest", "dataset manifest");
    const Manifest m = Manifest::load(dataset / "dataset.manifest");
    DatasetIndex idx;
    idx.root = dataset;
    idx.k_shots = m.get_int("supports.k");
    for (const auto id : m.get_int_list("supports.classes")) idx.support_classes.push_back(static_cast<int>(id));
    const Index count = m.get_int("eval.count");
    for (Index i = 0; i < count; ++i) {
        EvalSampleRef ref;
        ref.index = i;
        const std::string p = "eval." + std::to_string(i);
        for (const auto id : m.get_int_list(p + ".classes")) ref.classes.push_back(static_cast<int>(id));
        ref.feat = dataset / m.get(p + ".feat");
        ref.labels = dataset / m.get(p + ".labels");
        ref.fg = dataset / m.get(p + ".fg");
        idx.eval_samples.push_back(std::move(ref));
    }
    return idx;
}

template <typename Scalar>
SupportSet<Scalar> load_supports(const DatasetIndex& idx, int class_id) {
    const fs::path feat = idx.root / "supports" / ("class_" + std::to_string(class_id) + ".feat.gfst");
    const fs::path mask = idx.root / "supports" / ("class_" + std::to_string(class_id) + ".mask.gfst");
    detail::require_artifact(feat, "support features");
    SupportSet<Scalar> sup;
    sup.class_id = class_id;
    sup.feats = read_gfst<Scalar>(feat);
    sup.masks = read_gfst<Scalar>(mask);
    validate_supports(sup);
    return sup;
}

template <typename Scalar>
TrainConfig<Scalar> make_train_config(const RunConfig& cfg) {
    TrainConfig<Scalar> tc;
    tc.lambda_mix = static_cast<Scalar>(cfg.train_lambda);
    tc.lr = static_cast<Scalar>(cfg.train_lr);
    tc.momentum = static_cast<Scalar>(cfg.train_momentum);
    tc.weight_decay = static_cast<Scalar>(cfg.train_weight_decay);
    tc.steps = cfg.train_steps;
    tc.batch = cfg.train_batch;
    tc.seed = cfg.seed;
    tc.pkl_step_scale = static_cast<Scalar>(cfg.pkl_step_scale);
    tc.fixed_alpha = static_cast<Scalar>(cfg.pkl_fixed_alpha);
    return tc;
}

template <typename Scalar>
InferenceConfig<Scalar> make_inference_config(const RunConfig& cfg) {
    InferenceConfig<Scalar> ic;
    ic.bias_b = static_cast<Scalar>(cfg.infer_bias_b);
    ic.fg_threshold = static_cast<Scalar>(cfg.infer_fg_threshold);
    ic.use_pkl_update = cfg.use_pkl_update;
    ic.use_fcp = cfg.use_fcp;
    ic.use_cbbi = cfg.use_cbbi;
    ic.novel_only_bias = cfg.novel_only_bias;
    ic.pkl_step_scale = static_cast<Scalar>(cfg.pkl_step_scale);
    ic.fixed_alpha = static_cast<Scalar>(cfg.pkl_fixed_alpha);
    return ic;
}

// ---------------------------------------------------------------------------
// synth: world + supports + a structured evaluation pool
//
// The pool starts with base-only samples, then one block per novel class (in
// world order) whose samples contain that class plus base distractors. A
// sample qualifies for evaluation once all its classes are registered, so
// any session partition sees a well-defined, monotone pool.

template <typename Scalar>
void cmd_synth(const RunConfig& cfg, const fs::path& out) {
    detail::prepare_out_dir(out);
    const World<Scalar> world = make_world<Scalar>(cfg.world);
    save_world(out, world);

    Manifest m;
    m.set("format", "gfseg-dataset/1");
    m.set("world", "world.manifest");

    fs::create_directories(out / "supports");
    Rng sup_rng(derive_seed(cfg.seed, "supports"));
    m.set_int_list("supports.classes", world.novel_ids.begin(), world.novel_ids.end());
    m.set("supports.k", static_cast<std::int64_t>(cfg.registry_k_shots));
    for (const int id : world.novel_ids) {
        const SupportSet<Scalar> sup = sample_supports(world, id, cfg.registry_k_shots, sup_rng);
        write_gfst(out / "supports" / ("class_" + std::to_string(id) + ".feat.gfst"), sup.feats);
        write_gfst(out / "supports" / ("class_" + std::to_string(id) + ".mask.gfst"), sup.masks);
    }

    fs::create_directories(out / "eval");
    Rng eval_rng(derive_seed(cfg.seed, "eval"));
    Index sample_index = 0;
    auto emit = [&](const std::vector<int>& objects) {
        const SyntheticSample<Scalar> s = sample_image(world, objects, eval_rng);
        const std::string stem = "eval/sample_" + std::to_string(sample_index);
        write_gfst(out / (stem + ".feat.gfst"), s.feat);
        write_gfst(out / (stem + ".labels.gfst"), s.labels);
        write_gfst(out / (stem + ".fg.gfst"), s.fg);
        const std::string p = "eval." + std::to_string(sample_index);
        m.set_int_list(p + ".classes", objects.begin(), objects.end());
        m.set(p + ".feat", stem + ".feat.gfst");
        m.set(p + ".labels", stem + ".labels.gfst");
        m.set(p + ".fg", stem + ".fg.gfst");
        ++sample_index;
    };
    auto draw_base_objects = [&](Index count, std::optional<int> skip = std::nullopt) {
        std::vector<int> pool(world.base_ids.begin() + 1, world.base_ids.end());
        if (skip)
            pool.erase(std::remove(pool.begin(), pool.end(), *skip), pool.end());
        std::vector<int> chosen;
        for (Index j = 0; j < count && !pool.empty(); ++j) {
            const Index pick = eval_rng.uniform_int(0, static_cast<Index>(pool.size()) - 1);
            chosen.push_back(pool[static_cast<std::size_t>(pick)]);
            pool.erase(pool.begin() + pick);
        }
        return chosen;
    };

    for (Index i = 0; i < cfg.eval_base_samples; ++i) emit(draw_base_objects(cfg.objects_per_image));
    for (const int novel : world.novel_ids) {
        for (Index i = 0; i < cfg.eval_per_novel_samples; ++i) {
            std::vector<int> objects{novel};
            const auto extra = draw_base_objects(std::max<Index>(cfg.objects_per_image - 1, 0));
            objects.insert(objects.end(), extra.begin(), extra.end());
            emit(objects);
        }
    }
    m.set("eval.count", static_cast<std::int64_t>(sample_index));
    m.save(out / "dataset.manifest");
    detail::write_config_echo(cfg, out);
}

// ---------------------------------------------------------------------------
// train

template <typename Scalar>
FrozenModel<Scalar> cmd_train(const RunConfig& cfg, const fs::path& dataset, const fs::path& out) {
    detail::require_artifact(dataset / "world.manifest", "world");
    detail::prepare_out_dir(out);
    const World<Scalar> world = load_world<Scalar>(dataset);
    const TrainConfig<Scalar> tc = make_train_config<Scalar>(cfg);
    validate_train_config(tc);

    TrainState<Scalar> state = init_train_state<Scalar>(world.spec.n_base, world.spec.channels, cfg.seed);
    Rng ep_rng(derive_seed(cfg.seed, "episodes"));
    std::ofstream log(out / "loss_log.csv", std::ios::trunc);
    log << "step,ce_sum,iou,total\n";
    for (Index step = 0; step < tc.steps; ++step) {
        const EpisodeBatch<Scalar> ep = sample_episode(world, tc.batch, cfg.objects_per_image, ep_rng);
        const LossReport<Scalar> rep = train_step(state, ep, tc);
        log << rep.step << ',' << detail::fmt_loss(rep.ce_sum) << ',' << detail::fmt_loss(rep.iou) << ','
            << detail::fmt_loss(rep.total) << "\n";
    }
    log.close();
    const FrozenModel<Scalar> model = freeze(state);
    save_model(out, model);
    detail::write_config_echo(cfg, out);
    return model;
}

// ---------------------------------------------------------------------------
// register: GFSS registration, one novel session holding every novel class

template <typename Scalar>
SessionRegistry<Scalar> cmd_register(const RunConfig& cfg, const fs::path& dataset, const fs::path& model_dir,
                                     const fs::path& out) {
    detail::require_artifact(model_dir / "model.manifest", "model");
    const DatasetIndex idx = load_dataset_index(dataset);
    detail::prepare_out_dir(out);
    const FrozenModel<Scalar> model = load_model<Scalar>(model_dir);
    SessionRegistry<Scalar> reg = make_base_registry(model);
    if (!idx.support_classes.empty()) {
        std::vector<SupportSet<Scalar>> supports;
        for (const int id : idx.support_classes) supports.push_back(load_supports<Scalar>(idx, id));
        reg = extend_session<Scalar>(reg, model, supports, 1);
    }
    save_registry(out, reg);
    detail::write_config_echo(cfg, out);
    return reg;
}

// ---------------------------------------------------------------------------
// infer / eval

namespace detail {

template <typename Scalar>
void write_label_pgm(const fs::path& path, const Tensor<Scalar>& labels, Index h, Index w) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    os << "P5\n" << w << ' ' << h << "\n255\n";
    for (Index q = 0; q < h * w; ++q) {
        const auto v = static_cast<long>(labels[q]);
        os.put(static_cast<char>(std::min<long>(std::max<long>(v, 0), 255)));
    }
}

template <typename Scalar>
bool sample_qualifies(const EvalSampleRef& ref, const std::set<int>& registered) {
    for (const int id : ref.classes)
        if (!registered.count(id)) return false;
    return true;
}

} // namespace detail

// Inference over every qualifying evaluation sample (or one explicit feature
// file). Masks are written as GFST label tensors plus optional graymaps.
template <typename Scalar>
void cmd_infer(const RunConfig& cfg, const std::optional<fs::path>& dataset, const fs::path& model_dir,
               const fs::path& registry_dir, const std::optional<fs::path>& features, const fs::path& out,
               bool emit_pgm = false) {
    detail::require_artifact(model_dir / "model.manifest", "model");
    detail::require_artifact(registry_dir / "registry.manifest", "registry");
    detail::prepare_out_dir(out);
    const FrozenModel<Scalar> model = load_model<Scalar>(model_dir);
    const SessionRegistry<Scalar> reg = load_registry<Scalar>(registry_dir);
    const InferenceConfig<Scalar> ic = make_inference_config<Scalar>(cfg);

    Manifest m;
    m.set("format", "gfseg-predictions/1");
    if (features) {
        detail::require_artifact(*features, "feature tensor");
        const Tensor<Scalar> feat = read_gfst<Scalar>(*features);
        const Tensor<Scalar> mask = infer(model, reg, feat, ic);
        write_gfst(out / "mask.gfst", mask);
        if (emit_pgm)
            for (Index b = 0; b < mask.dim(0); ++b) {
                Tensor<Scalar> one({mask.dim(1), mask.dim(2)});
                std::copy(mask.data() + b * one.size(), mask.data() + (b + 1) * one.size(), one.data());
                detail::write_label_pgm(out / ("mask_" + std::to_string(b) + ".pgm"), one, mask.dim(1), mask.dim(2));
            }
        m.set("count", std::int64_t(1));
        m.set("single", "mask.gfst");
        m.save(out / "pred.manifest");
        detail::write_config_echo(cfg, out);
        return;
    }

    if (!dataset) throw ConfigError("infer needs --data or --features");
    const DatasetIndex idx = load_dataset_index(*dataset);
    const std::set<int> registered(reg.bank.class_ids.begin(), reg.bank.class_ids.end());
    fs::create_directories(out / "masks");
    std::vector<Index> done;
    for (const auto& ref : idx.eval_samples) {
        if (!detail::sample_qualifies<Scalar>(ref, registered)) continue;
        const Tensor<Scalar> feat = read_gfst<Scalar>(ref.feat);
        const Tensor<Scalar> mask = infer(model, reg, feat, ic);
        const std::string stem = "masks/sample_" + std::to_string(ref.index);
        write_gfst(out / (stem + ".mask.gfst"), mask);
        if (emit_pgm) {
            Tensor<Scalar> one({mask.dim(1), mask.dim(2)});
            std::copy(mask.data(), mask.data() + one.size(), one.data());
            detail::write_label_pgm(out / (stem + ".pgm"), one, mask.dim(1), mask.dim(2));
        }
        m.set("sample." + std::to_string(ref.index), stem + ".mask.gfst");
        done.push_back(ref.index);
    }
    m.set("count", static_cast<std::int64_t>(done.size()));
    m.set_int_list("samples", done.begin(), done.end());
    m.save(out / "pred.manifest");
    detail::write_config_echo(cfg, out);
}

// Confusion-based evaluation of predicted masks against the dataset truth.
template <typename Scalar>
EvalReport cmd_eval(const RunConfig& cfg, const fs::path& dataset, const fs::path& pred_dir,
                    const fs::path& registry_dir, const fs::path& out) {
    detail::require_artifact(pred_dir / "pred.manifest", "predictions");
    detail::require_artifact(registry_dir / "registry.manifest", "registry");
    const DatasetIndex idx = load_dataset_index(dataset);
    detail::prepare_out_dir(out);
    const SessionRegistry<Scalar> reg = load_registry<Scalar>(registry_dir);
    const Manifest pm = Manifest::load(pred_dir / "pred.manifest");

    std::vector<int> ids = reg.bank.class_ids;
    std::sort(ids.begin(), ids.end());
    ConfusionMatrix acc(ids);
    std::int64_t images = 0;
    for (const auto sample : pm.get_int_list("samples")) {
        const auto& ref = idx.eval_samples.at(static_cast<std::size_t>(sample));
        const Tensor<Scalar> truth = read_gfst<Scalar>(ref.labels);
        const Tensor<Scalar> pred = read_gfst<Scalar>(pred_dir / pm.get("sample." + std::to_string(sample)));
        acc = confusion_accumulate(pred, truth, std::move(acc));
        ++images;
    }
    const std::set<int> base_ids(reg.sessions.front().class_ids.begin(), reg.sessions.front().class_ids.end());
    const EvalReport rep = make_report(acc, base_ids, images);
    write_report_text(out / "report.txt", rep);
    std::ofstream csv(out / "report.csv", std::ios::trunc);
    csv << report_csv_header() << "\n" << report_csv_row("eval", rep) << "\n";
    detail::write_config_echo(cfg, out);
    return rep;
}

// ---------------------------------------------------------------------------
// cifss: session stream with per-session evaluation (Table-2 shaped rows)

namespace detail {

template <typename Scalar>
EvalReport eval_registry_in_memory(const FrozenModel<Scalar>& model, const SessionRegistry<Scalar>& reg,
                                   const DatasetIndex& idx, const InferenceConfig<Scalar>& ic) {
    const std::set<int> registered(reg.bank.class_ids.begin(), reg.bank.class_ids.end());
    std::vector<int> ids = reg.bank.class_ids;
    std::sort(ids.begin(), ids.end());
    ConfusionMatrix acc(ids);
    std::int64_t images = 0;
    for (const auto& ref : idx.eval_samples) {
        if (!sample_qualifies<Scalar>(ref, registered)) continue;
        const Tensor<Scalar> feat = read_gfst<Scalar>(ref.feat);
        const Tensor<Scalar> truth = read_gfst<Scalar>(ref.labels);
        const Tensor<Scalar> pred = infer(model, reg, feat, ic);
        acc = confusion_accumulate(pred, truth, std::move(acc));
        ++images;
    }
    const std::set<int> base_ids(reg.sessions.front().class_ids.begin(), reg.sessions.front().class_ids.end());
    return make_report(acc, base_ids, images);
}

} // namespace detail

template <typename Scalar>
std::vector<EvalReport> cmd_cifss(const RunConfig& cfg, const fs::path& dataset, const fs::path& model_dir,
                                  const fs::path& out) {
    detail::require_artifact(model_dir / "model.manifest", "model");
    const DatasetIndex idx = load_dataset_index(dataset);
    detail::prepare_out_dir(out);
    const FrozenModel<Scalar> model = load_model<Scalar>(model_dir);
    const World<Scalar> world = load_world<Scalar>(dataset);
    const InferenceConfig<Scalar> ic = make_inference_config<Scalar>(cfg);
    const auto groups = make_cifss_stream(world, cfg.cifss_sessions, cfg.cifss_classes_per_session);

    std::ofstream csv(out / "cifss_report.csv", std::ios::trunc);
    csv << "session," << report_csv_header() << "\n";
    std::vector<EvalReport> reports;

    SessionRegistry<Scalar> reg = make_base_registry(model);
    EvalReport rep = detail::eval_registry_in_memory(model, reg, idx, ic);
    write_report_text(out / "session_0.report.txt", rep);
    csv << 0 << ',' << report_csv_row("session_0", rep) << "\n";
    reports.push_back(rep);

    for (std::size_t t = 0; t < groups.size(); ++t) {
        std::vector<SupportSet<Scalar>> supports;
        for (const int id : groups[t]) supports.push_back(load_supports<Scalar>(idx, id));
        reg = extend_session<Scalar>(reg, model, supports, static_cast<int>(t + 1));
        rep = detail::eval_registry_in_memory(model, reg, idx, ic);
        const std::string tag = "session_" + std::to_string(t + 1);
        write_report_text(out / (tag + ".report.txt"), rep);
        csv << (t + 1) << ',' << report_csv_row(tag, rep) << "\n";
        reports.push_back(rep);
    }
    save_registry(out / "registry", reg);
    detail::write_config_echo(cfg, out);
    return reports;
}

// ---------------------------------------------------------------------------
// ablate: component toggles (Table-3/4 shaped CSV)

template <typename Scalar>
void cmd_ablate(const RunConfig& cfg, const fs::path& dataset, const fs::path& model_dir, const fs::path& out) {
    detail::require_artifact(model_dir / "model.manifest", "model");
    const DatasetIndex idx = load_dataset_index(dataset);
    detail::prepare_out_dir(out);
    const FrozenModel<Scalar> model = load_model<Scalar>(model_dir);

    auto registry_for = [&](const FrozenModel<Scalar>& mdl) {
        SessionRegistry<Scalar> reg = make_base_registry(mdl);
        if (!idx.support_classes.empty()) {
            std::vector<SupportSet<Scalar>> supports;
            for (const int id : idx.support_classes) supports.push_back(load_supports<Scalar>(idx, id));
            reg = extend_session<Scalar>(reg, mdl, supports, 1);
        }
        return reg;
    };
    const SessionRegistry<Scalar> reg = registry_for(model);

    std::ofstream csv(out / "ablation.csv", std::ios::trunc);
    csv << report_csv_header() << "\n";
    auto run_row = [&](const std::string& tag, const FrozenModel<Scalar>& mdl, const SessionRegistry<Scalar>& r,
                       const InferenceConfig<Scalar>& ic) {
        const EvalReport rep = detail::eval_registry_in_memory(mdl, r, idx, ic);
        csv << report_csv_row(tag, rep) << "\n";
    };

    const InferenceConfig<Scalar> base_ic = make_inference_config<Scalar>(cfg);
    run_row("full", model, reg, base_ic);
    InferenceConfig<Scalar> ic = base_ic;
    ic.use_pkl_update = false;
    run_row("no-pkl", model, reg, ic);
    ic = base_ic;
    ic.use_fcp = false;
    run_row("no-fcp", model, reg, ic);
    ic = base_ic;
    ic.use_cbbi = false;
    run_row("no-cbbi", model, reg, ic);

    // fixedALR retrains with a constant adaptation gate and applies the same
    // constant at inference refresh time.
    RunConfig fixed_cfg = cfg;
    fixed_cfg.pkl_fixed_alpha = 0.5;
    const fs::path fixed_dir = out / "fixed_alr_model";
    const FrozenModel<Scalar> fixed_model = cmd_train<Scalar>(fixed_cfg, dataset, fixed_dir);
    run_row("fixed-alr", fixed_model, registry_for(fixed_model), make_inference_config<Scalar>(fixed_cfg));
    detail::write_config_echo(cfg, out);
}

} // namespace gfseg
