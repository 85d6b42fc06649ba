#pragma once

#include <string>
#include <vector>

#include "robal/config.hpp"

namespace robal {

struct RunContext {
    std::string out_dir;
    int threads = 1;
    bool force = false;
};

struct DataBundle {
    LabeledDataset train;
    LabeledDataset test;
};

// Materializes the train/test pair for a config: synthesized Gaussian
// mixtures (lt, balanced or sml-bal flavors) or RBLT files on disk.
DataBundle build_datasets(const DatasetConfig& cfg);

PostHocRule rule_from_config(const PosthocConfig& cfg, const TrainState& state);

// Pipeline stages behind the CLI subcommands. All return 0 on success and
// write a manifest plus a JSON-lines event stream into the run directory.
int cmd_synth(const ExperimentConfig& cfg, const RunContext& ctx);
int cmd_train(const ExperimentConfig& cfg, const RunContext& ctx);
int cmd_finetune(const ExperimentConfig& cfg, const RunContext& ctx,
                 const std::string& checkpoint_path);
int cmd_eval(const ExperimentConfig& cfg, const RunContext& ctx,
             const std::string& checkpoint_path);
int cmd_sweep(const ExperimentConfig& cfg, const RunContext& ctx, const std::string& axis,
              std::vector<double> values, const std::string& checkpoint_path);
int cmd_report(const std::string& run_dir, const RunContext& ctx);

std::vector<double> default_sweep_values(const std::string& axis);

}  // namespace robal
