#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "robal/attacks.hpp"
#include "robal/data.hpp"
#include "robal/heads.hpp"
#include "robal/model.hpp"

namespace robal {

struct TrainDivergence : std::runtime_error {
    explicit TrainDivergence(const std::string& m) : std::runtime_error(m) {}
};

// SGD with momentum and weight decay: v <- m v + (g + wd p); p <- p - lr v.
struct OptimState {
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 2e-4;
    std::vector<Array> velocity;  // aligned with the parameter list

    void init_for(const std::vector<ParamRef>& params);
};

void sgd_step(const std::vector<ParamRef>& params, const std::vector<Array>& grads,
              OptimState& state);

struct LrSchedule {
    double base = 0.1;
    std::vector<int> boundaries;  // epochs at which the rate decays
    double factor = 10.0;
};

// Piecewise constant: base, then base/factor after each boundary.
double lr_at(int epoch, const LrSchedule& schedule);

// Training losses: the Table-1 rows, focal, class-balanced re-weighting,
// plain CE, and the margin + KL objective of the cosine classifier.
enum class TrainLoss {
    Ce,              // CE over the head's base logits (linear or cosine)
    Ldam,            // class-aware margin
    CosMargin,       // cosine with uniform margin
    Cdt,             // class-aware temperature
    La,              // class-aware bias
    Focal,           // sigmoid focal BCE
    Cb,              // class-balanced re-weighted CE
    Robal,           // margins, boundary-aware loss, KL regularizer
};
TrainLoss train_loss_from_name(const std::string& name);
std::string train_loss_name(TrainLoss loss);

enum class LossMode { Inner, Outer, Both };
LossMode loss_mode_from_name(const std::string& name);

struct ATConfig {
    TrainLoss method = TrainLoss::Ce;
    LossMode mode = LossMode::Outer;
    int epochs = 40;
    int batch = 64;
    LrSchedule schedule;
    double momentum = 0.9;
    double weight_decay = 2e-4;
    int pgd_steps = 5;
    double pgd_eta = 2.0 / 255.0;
    double epsilon = 8.0 / 255.0;
    bool pgd_random_init = true;
    bool resample = false;  // class-aware sampling for the whole training run
    double alpha = 6.0;     // KL weight (robal)
    MarginSpec margins;     // robal
    Table1Hyper hyper;
    double cb_beta = 0.9999;
    double focal_gamma = 2.0;
    uint64_t seed = 1;

    void validate() const;
};

struct EpochStats {
    int epoch = 0;
    double lr = 0.0;
    double mean_loss = 0.0;
    double clean_train_acc = 0.0;
};

struct TrainState {
    Network net;
    ClassStats stats;
    OptimState optim;
    Array tde_ema;  // running mean of normalized features
    int epoch = 0;

    static TrainState make(Network net, const ClassStats& stats);
};

// Substitution-mode resolution: which loss drives the inner maximization
// and which the outer minimization. The robal objective always attacks
// plain CE on the cosine outputs.
std::pair<TrainLoss, TrainLoss> resolve_losses(const ATConfig& cfg);  // {inner, outer}

// Inner maximization: PGD in input space on the given attack loss with
// the parameters held constant.
Array adversarial_batch(const TrainState& state, const Array& x, const std::vector<int>& y,
                        const ATConfig& cfg, TrainLoss inner_kind, uint64_t init_seed);

// One pass over the data: inner maximization by PGD on the configured
// attack loss, outer SGD step on the configured training loss. With
// epsilon = 0 the inner stage is skipped entirely and the update sequence
// matches standard training bit for bit.
EpochStats at_epoch(TrainState& state, const LabeledDataset& data, const ATConfig& cfg);

enum class FinetuneMethod { Resample, Reweight, Lws };
FinetuneMethod finetune_from_name(const std::string& name);

// Exactly one epoch over clean inputs with the backbone frozen; lws
// learns only the per-class scale vector.
EpochStats finetune_one_epoch(TrainState& state, const LabeledDataset& data,
                              FinetuneMethod method, const ATConfig& cfg);

// Portable checkpoint: architecture descriptor plus every parameter array,
// class counts and the TDE direction. Bit-exact round trip.
struct Checkpoint {
    std::string descriptor;  // JSON: architecture, head, metadata
    std::vector<std::pair<std::string, Array>> arrays;
};

Checkpoint make_checkpoint(const TrainState& state, uint64_t seed);
TrainState state_from_checkpoint(const Checkpoint& ckpt);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace robal
