#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "robal/heads.hpp"
#include "robal/model.hpp"

namespace robal {

struct AttackBudget {
    double epsilon = 8.0 / 255.0;  // l-inf bound
    double eta = 2.0 / 255.0;      // step size
    int steps = 20;
    int restarts = 1;
    double clip_lo = 0.0;
    double clip_hi = 1.0;
    double mu = 1.0;        // MIM decay
    double cw_c = 1.0;      // C&W trade-off constant
    double cw_kappa = 0.0;  // C&W confidence margin
    int cw_steps = 200;     // C&W optimizer steps
    double cw_lr = 0.01;    // C&W optimizer learning rate
    bool random_init = true;

    void validate() const;
};

// The attackable classifier: backbone features, optional inference-stage
// rule, and a uniform positive logit scaling (the kappa diagnostic).
struct Scorer {
    const Network* net = nullptr;
    const PostHocRule* rule = nullptr;  // nullptr means no transform
    const ClassStats* stats = nullptr;
    double logit_scale = 1.0;

    Var logits(Tape& t, Var x) const;
    Array logits_value(const Array& x) const;
    std::vector<int> predict(const Array& x) const;
};

struct PerturbResult {
    Array x_adv;
    std::vector<uint8_t> success;    // prediction changed from the correct label
    std::vector<double> loss_trace;  // batch-mean objective per step
    std::vector<double> distortion;  // cw_l2 only: best l2 distortion, inf if failed
};

enum class PgdLoss { Ce, CwMargin, Dlr, TargetedDlr };
PgdLoss pgd_loss_from_name(const std::string& name);

struct PgdOptions {
    PgdLoss loss = PgdLoss::Ce;
    bool random_init = true;
    uint64_t seed = 0;
    // global sample ids for per-sample init seeding; row index when absent
    const std::vector<int64_t>* sample_indices = nullptr;
    const std::vector<int>* targets = nullptr;  // targeted-dlr
};

// x_adv = clip_{[0,1]}(x + epsilon * sign(grad_x CE))
PerturbResult fgsm(const Scorer& scorer, const Array& x, const std::vector<int>& y,
                   const AttackBudget& budget);

// Iterated sign steps projected onto the epsilon-ball intersected with the
// clip box; optional uniform random start, multi-restart.
PerturbResult pgd_attack(const Scorer& scorer, const Array& x, const std::vector<int>& y,
                         const AttackBudget& budget, const PgdOptions& opt = {});

// Momentum attack: g <- mu g + grad/||grad||_1, step on sign(g); zero init.
PerturbResult mim_attack(const Scorer& scorer, const Array& x, const std::vector<int>& y,
                         const AttackBudget& budget);

// l2 attack in tanh space: minimize c f(x') + ||x'-x||_2^2 over omega with
// x' = (tanh omega + 1)/2; returns the lowest-distortion successful iterate.
PerturbResult cw_l2(const Scorer& scorer, const Array& x, const std::vector<int>& y,
                    const AttackBudget& budget, int opt_steps, double lr);

// l-inf projected ascent on the margin loss with kappa = budget.cw_kappa.
PerturbResult cw_linf(const Scorer& scorer, const Array& x, const std::vector<int>& y,
                      const AttackBudget& budget, uint64_t seed = 0,
                      const std::vector<int64_t>* sample_indices = nullptr);

// Scale-invariant logit-gap losses on a single logit vector.
double dlr_loss(const std::vector<double>& z, int y);
double dlr_loss_targeted(const std::vector<double>& z, int y, int target);

// Curriculum ensemble: multi-restart PGD-CE, then targeted-DLR PGD against
// the top-ranked target classes; already-broken samples skip later stages.
std::vector<uint8_t> ensemble_eval(const Scorer& scorer, const Array& x,
                                   const std::vector<int>& y, const AttackBudget& budget,
                                   uint64_t seed = 0,
                                   const std::vector<int64_t>* sample_indices = nullptr);

}  // namespace robal
