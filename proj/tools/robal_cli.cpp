#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "robal/run.hpp"

namespace {

int resolve_threads(int cli_threads) {
    if (cli_threads > 0) return cli_threads;
    if (const char* env = std::getenv("ROBAL_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) return n;
    }
    return 1;
}

robal::ExperimentConfig resolve_config(const std::string& config_path,
                                       const std::string& preset, uint64_t seed,
                                       bool seed_set, const std::string& out_dir) {
    robal::ExperimentConfig cfg;
    if (!preset.empty()) cfg = robal::preset_config(preset);
    if (!config_path.empty()) cfg = robal::ExperimentConfig::load(config_path);
    if (config_path.empty() && preset.empty())
        throw robal::ConfigError("pass --config or --preset");
    if (seed_set) {
        cfg.seed = seed;
        cfg.dataset.seed = seed;
    }
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"long-tailed adversarial training laboratory"};
    app.require_subcommand(1);

    std::string config_path, preset, out_dir, checkpoint, axis, run_dir;
    uint64_t seed = 1;
    bool seed_set = false;
    int threads = 0;
    bool force = false;
    std::vector<double> values;

    app.add_option("--config", config_path, "experiment config (JSON)");
    app.add_option("--preset", preset, "named preset configuration");
    app.add_option("--seed", seed, "run seed")->each([&](const std::string&) { seed_set = true; });
    app.add_option("--out", out_dir, "output directory");
    app.add_option("--threads", threads, "worker threads (ROBAL_THREADS as fallback)");
    app.add_flag("--force", force, "overwrite existing outputs");

    auto* synth = app.add_subcommand("synth", "synthesize and store a dataset");
    auto* train = app.add_subcommand("train", "train a model per the config");
    auto* finetune = app.add_subcommand("finetune", "one-epoch head fine-tuning");
    finetune->add_option("--checkpoint", checkpoint, "input checkpoint")->required();
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint under the attack suite");
    eval->add_option("--checkpoint", checkpoint, "input checkpoint")->required();
    auto* sweep = app.add_subcommand("sweep", "hyper-parameter or diagnostic sweep");
    sweep->add_option("--axis", axis, "kappa|m0|tau-diff|tau_m|tau_p|ir|pgd-steps")->required();
    sweep->add_option("--values", values, "sweep values (axis default otherwise)");
    sweep->add_option("--checkpoint", checkpoint, "checkpoint for inference-stage axes");
    auto* report = app.add_subcommand("report", "render markdown + plot data from a run");
    report->add_option("--run", run_dir, "run directory with events.jsonl")->required();
    auto* presets = app.add_subcommand("presets", "list named presets");

    CLI11_PARSE(app, argc, argv);

    try {
        if (presets->parsed()) {
            for (const auto& name : robal::preset_names()) std::cout << name << "\n";
            return 0;
        }
        if (report->parsed()) {
            robal::RunContext ctx{run_dir, resolve_threads(threads), force};
            return robal::cmd_report(run_dir, ctx);
        }
        robal::ExperimentConfig cfg = resolve_config(config_path, preset, seed, seed_set, out_dir);
        robal::RunContext ctx{cfg.out_dir, resolve_threads(threads), force};
        if (synth->parsed()) return robal::cmd_synth(cfg, ctx);
        if (train->parsed()) return robal::cmd_train(cfg, ctx);
        if (finetune->parsed()) return robal::cmd_finetune(cfg, ctx, checkpoint);
        if (eval->parsed()) return robal::cmd_eval(cfg, ctx, checkpoint);
        if (sweep->parsed()) return robal::cmd_sweep(cfg, ctx, axis, values, checkpoint);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
