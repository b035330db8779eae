// gfseg: synthetic generalized few-shot segmentation workbench.
//
// Subcommands: synth | train | register | infer | eval | cifss | ablate.
// Every command takes --config/--seed/--set overrides, writes into a fresh
// --out directory, and echoes its resolved configuration there.
//
// Exit codes: 0 ok, 2 bad config or missing artifact, 3 training produced a
// non-finite loss, 4 registry conflict (class overlap / session order).

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "gfseg/pipeline.hpp"

namespace {

struct CommonArgs {
    std::string config_file;
    std::vector<std::string> sets;
    std::optional<std::int64_t> seed;
    std::string out;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_file, "config file of 'key = value' lines");
    cmd->add_option("--set", args.sets, "override a config key, key=value (repeatable)");
    cmd->add_option("--seed", args.seed, "override the run seed");
    cmd->add_option("--out", args.out, "output directory (must be fresh)")->required();
}

gfseg::RunConfig resolve_config(const CommonArgs& args) {
    std::optional<std::filesystem::path> file;
    if (!args.config_file.empty()) file = args.config_file;
    std::vector<std::string> sets = args.sets;
    if (args.seed) sets.push_back("seed=" + std::to_string(*args.seed));
    return gfseg::load_run_config(file, sets);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"synthetic GFSS/CIFSS segmentation-head workbench"};
    app.require_subcommand(1);

    CommonArgs synth_args, train_args, reg_args, infer_args, eval_args, cifss_args, ablate_args;
    std::string train_data, reg_data, reg_model, infer_data, infer_model, infer_registry, infer_features;
    std::string eval_data, eval_pred, eval_registry, cifss_data, cifss_model, ablate_data, ablate_model;
    bool infer_pgm = false;

    auto* synth = app.add_subcommand("synth", "materialize a synthetic world, supports, and eval pool");
    add_common(synth, synth_args);

    auto* train = app.add_subcommand("train", "train kernels and the foreground branch on pseudo episodes");
    add_common(train, train_args);
    train->add_option("--data", train_data, "dataset directory from synth")->required();

    auto* reg = app.add_subcommand("register", "register every novel class as one session (GFSS)");
    add_common(reg, reg_args);
    reg->add_option("--data", reg_data, "dataset directory")->required();
    reg->add_option("--model", reg_model, "trained model directory")->required();

    auto* inf = app.add_subcommand("infer", "predict label masks for eval samples or one feature tensor");
    add_common(inf, infer_args);
    inf->add_option("--data", infer_data, "dataset directory");
    inf->add_option("--model", infer_model, "trained model directory")->required();
    inf->add_option("--registry", infer_registry, "registry directory")->required();
    inf->add_option("--features", infer_features, "single GFST feature tensor instead of the eval pool");
    inf->add_flag("--pgm", infer_pgm, "also write portable graymap previews");

    auto* ev = app.add_subcommand("eval", "score predicted masks against the dataset truth");
    add_common(ev, eval_args);
    ev->add_option("--data", eval_data, "dataset directory")->required();
    ev->add_option("--pred", eval_pred, "prediction directory from infer")->required();
    ev->add_option("--registry", eval_registry, "registry directory")->required();

    auto* cif = app.add_subcommand("cifss", "incremental session stream with per-session reports");
    add_common(cif, cifss_args);
    cif->add_option("--data", cifss_data, "dataset directory")->required();
    cif->add_option("--model", cifss_model, "trained model directory")->required();

    auto* abl = app.add_subcommand("ablate", "component-toggle rows: full, no-pkl, no-fcp, no-cbbi, fixed-alr");
    add_common(abl, ablate_args);
    abl->add_option("--data", ablate_data, "dataset directory")->required();
    abl->add_option("--model", ablate_model, "trained model directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        auto dispatch = [&](const CommonArgs& args, auto&& fn) {
            const gfseg::RunConfig cfg = resolve_config(args);
            if (cfg.precision == "f64")
                fn(cfg, double{});
            else
                fn(cfg, float{});
        };
        if (synth->parsed()) {
            dispatch(synth_args, [&](const gfseg::RunConfig& cfg, auto tag) {
                gfseg::cmd_synth<decltype(tag)>(cfg, synth_args.out);
            });
        } else if (train->parsed()) {
            dispatch(train_args, [&](const gfseg::RunConfig& cfg, auto tag) {
                gfseg::cmd_train<decltype(tag)>(cfg, train_data, train_args.out);
            });
        } else if (reg->parsed()) {
            dispatch(reg_args, [&](const gfseg::RunConfig& cfg, auto tag) {
                gfseg::cmd_register<decltype(tag)>(cfg, reg_data, reg_model, reg_args.out);
            });
        } else if (inf->parsed()) {
            dispatch(infer_args, [&](const gfseg::RunConfig& cfg, auto tag) {
                std::optional<std::filesystem::path> data, features;
                if (!infer_data.empty()) data = infer_data;
                if (!infer_features.empty()) features = infer_features;
                gfseg::cmd_infer<decltype(tag)>(cfg, data, infer_model, infer_registry, features, infer_args.out, infer_pgm);
            });
        } else if (ev->parsed()) {
            dispatch(eval_args, [&](const gfseg::RunConfig& cfg, auto tag) {
                const gfseg::EvalReport rep = gfseg::cmd_eval<decltype(tag)>(cfg, eval_data, eval_pred, eval_registry, eval_args.out);
                std::cout << gfseg::report_csv_header() << "\n" << gfseg::report_csv_row("eval", rep) << "\n";
            });
        } else if (cif->parsed()) {
            dispatch(cifss_args, [&](const gfseg::RunConfig& cfg, auto tag) {
                const auto reports = gfseg::cmd_cifss<decltype(tag)>(cfg, cifss_data, cifss_model, cifss_args.out);
                std::cout << "session," << gfseg::report_csv_header() << "\n";
                for (std::size_t t = 0; t < reports.size(); ++t)
                    std::cout << t << ',' << gfseg::report_csv_row("session_" + std::to_string(t), reports[t]) << "\n";
            });
        } else if (abl->parsed()) {
            dispatch(ablate_args, [&](const gfseg::RunConfig& cfg, auto tag) {
                gfseg::cmd_ablate<decltype(tag)>(cfg, ablate_data, ablate_model, ablate_args.out);
            });
        }
    } catch (const gfseg::TrainingError& e) {
        std::cerr << "training error: " << e.what() << "\n";
        return 3;
    } catch (const gfseg::RegistryError& e) {
        std::cerr << "registry error: " << e.what() << "\n";
        return 4;
    } catch (const gfseg::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const gfseg::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const gfseg::ShapeError& e) {
        std::cerr << "shape error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
