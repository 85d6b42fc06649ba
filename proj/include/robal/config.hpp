#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "robal/eval.hpp"
#include "robal/trainer.hpp"

namespace robal {

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};

struct DatasetConfig {
    std::string source = "synth";  // synth | file
    std::string path;              // file source, or synth output
    std::string kind = "lt";       // lt | balanced | sml-bal
    int classes = 10;
    int64_t n_max = 1000;
    double ir = 50.0;
    int dim = 16;
    double spread = 0.16;
    int64_t test_per_class = 100;
    uint64_t seed = 1;
};

struct ModelConfig {
    std::string arch = "mlp";  // mlp | conv
    int hidden = 64;
    int feature_dim = 16;
    std::string head = "linear";  // linear | cosine
    double s = 10.0;
    double gamma = 0.0;
};

struct TrainingConfig {
    std::string method = "ce";  // ce|ldam|cos-margin|cdt|la|focal|cb|resample|robal
    std::string mode = "outer";
    int epochs = 40;
    int batch = 64;
    double lr = 0.05;
    std::vector<int> lr_decay_epochs = {30, 37};
    double lr_decay_factor = 10.0;
    double momentum = 0.9;
    double weight_decay = 2e-4;
    int pgd_steps = 5;
    double pgd_eta = 2.0 / 255.0;
    double epsilon = 8.0 / 255.0;
    bool pgd_random_init = true;
    double alpha = 6.0;
    double m0 = 0.0;
    double tau_b = 0.0;
    double tau_m = 0.0;
    double delta_max = 0.5;
    double margin = 0.2;
    double cdt_gamma = 0.3;
    double la_tau = 1.0;
    double cb_beta = 0.9999;
    double focal_gamma = 2.0;
    std::string finetune = "none";  // none | resample | reweight | lws

    ATConfig at_config(uint64_t seed) const;
};

struct PosthocConfig {
    std::string rule = "none";
    double tau = 0.0;
    double alpha = 0.1;
    double tau_p = 0.0;
};

struct AttackConfig {
    std::string name = "pgd";
    double epsilon = 8.0 / 255.0;
    double eta = 2.0 / 255.0;
    int steps = 20;
    int restarts = 1;
    double mu = 1.0;
    double cw_c = 1.0;
    double cw_kappa = 0.0;
    int cw_steps = 200;
    double cw_lr = 0.01;
    bool random_init = true;
    std::string loss = "ce";

    AttackSpec spec() const;
};

struct ExperimentConfig {
    DatasetConfig dataset;
    ModelConfig model;
    TrainingConfig training;
    PosthocConfig posthoc;
    std::vector<AttackConfig> attacks;
    std::string out_dir = "runs/out";
    uint64_t seed = 1;

    std::string to_json() const;                        // canonical serialization
    static ExperimentConfig from_json(const std::string& text);
    static ExperimentConfig load(const std::string& path);
    void save(const std::string& path) const;
    std::string hash() const;  // FNV-1a of the canonical serialization
};

// Named presets: the AT baseline, every Table-1 row, and the RoBal
// emphasis settings.
ExperimentConfig preset_config(const std::string& name);
std::vector<std::string> preset_names();

bool operator==(const ExperimentConfig& a, const ExperimentConfig& b);

}  // namespace robal
