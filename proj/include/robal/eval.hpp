#pragma once

#include <map>
#include <string>
#include <vector>

#include "robal/attacks.hpp"
#include "robal/data.hpp"
#include "robal/trainer.hpp"

namespace robal {

// One configured attack of the evaluation suite.
struct AttackSpec {
    std::string name;  // fgsm | pgd | mim | cw | cw-l2 | ensemble
    AttackBudget budget;
    PgdLoss pgd_loss = PgdLoss::Ce;  // pgd only
};

struct EvalReport {
    double a_nat = 0.0;
    std::vector<std::string> attack_names;
    std::map<std::string, double> a_rob;
    std::map<std::string, double> r_bdy;  // A_nat - A_rob, per attack
    std::vector<double> recall_clean;
    std::map<std::string, std::vector<double>> recall_attack;
    std::vector<int64_t> class_sizes;
    double gap = 0.0;  // A_nat - A_rob(ensemble) when the ensemble ran
    bool has_gap = false;
};

// A_nat, per-attack robust accuracy (clean-correct AND attack survived),
// per-class recalls, boundary errors. The attacked prediction uses the
// same posthoc rule and logit scaling as the clean one.
EvalReport evaluate(const Scorer& scorer, const LabeledDataset& test,
                    const std::vector<AttackSpec>& attacks, uint64_t seed, int threads = 1);

struct KappaPoint {
    double kappa = 0.0;
    double a_nat = 0.0;
    double pgd_acc = 0.0;
    double ensemble_acc = 0.0;
    double zero_grad_ratio = 0.0;          // over all test samples
    double zero_grad_ratio_correct = 0.0;  // over clean-correct samples only
};

struct KappaSweep {
    std::vector<KappaPoint> points;
};

// Scales the classifier output by 10^kappa and re-runs the evaluation:
// natural accuracy, PGD-CE accuracy, ensemble accuracy and the ratio of
// exactly-zero input-gradient coordinates.
KappaSweep kappa_sweep(const Network& net, const ClassStats& stats, const PostHocRule* rule,
                       const LabeledDataset& test, const std::vector<double>& grid,
                       const AttackBudget& pgd_budget, const AttackBudget& ensemble_budget,
                       uint64_t seed, int threads = 1);

struct HistSummary {
    int64_t count = 0;
    double mean = 0.0;
    double p10 = 0.0, p50 = 0.0, p90 = 0.0;
    std::vector<int64_t> bins;
    double bin_lo = 0.0, bin_hi = 0.0;
};

struct FeatureNormStats {
    HistSummary attacked;  // clean-correct samples broken by the attack
    HistSummary robust;    // clean-correct samples that survived
};

// ||f(x+delta)|| / ||f(x)|| over clean-correct samples, split by attack
// success.
FeatureNormStats feature_norm_stats(const Network& net, const ClassStats& stats,
                                    const PostHocRule* rule, const LabeledDataset& test,
                                    const AttackSpec& attack, uint64_t seed);

// Per-class classifier row norms ||W_i||.
std::vector<double> weight_norm_profile(const Network& net);

// || grad_f CE - ((1/C) sum_i W_i - W_y) || / || (1/C) sum_i W_i - W_y ||
// with logits divided by `compression` (weights and target scaled alike).
double direction_averaging_check(const Network& net, const Array& x, int y, double compression);

// Largest absolute input-gradient coordinate of CE with logits scaled by
// `amplification`, over the given samples.
double max_input_gradient(const Network& net, const ClassStats& stats, const Array& x,
                          const std::vector<int>& y, double amplification);

std::string eval_accuracy_csv(const EvalReport& report);
std::string eval_recall_csv(const EvalReport& report);
std::string kappa_sweep_csv(const KappaSweep& sweep);

}  // namespace robal
