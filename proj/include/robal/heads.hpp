#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "robal/tape.hpp"

namespace robal {

struct LinearHead {
    Array W;  // (C, d), rows are class weight vectors
    Array b;  // (C)
};

// Scale-invariant classifier: cos(theta_i) between gamma-smoothed
// normalized rows and the normalized feature, scaled by temperature s.
struct CosineHead {
    Array W;  // (C, d)
    double s = 10.0;
    double gamma = 0.0;  // row normalization uses ||W_i|| + gamma
};

struct MarginSpec {
    double m0 = 0.0;
    double tau_b = 0.0;
    double tau_m = 0.0;
};

struct ClassStats {
    std::vector<int64_t> counts;
    int64_t n_min = 0;
    int64_t n_max = 0;
    std::vector<double> priors;  // n_i / sum_j n_j

    static ClassStats from_counts(const std::vector<int64_t>& counts);
    int classes() const { return static_cast<int>(counts.size()); }
};

// Logit transforms applied during training (Table-1 training rows).
enum class Table1Method {
    ClassAwareMargin,       // LDAM: z - 1{i=y} delta_i, delta ~ n^(-1/4)
    CosineWithMargin,       // s * (cos - 1{i=y} m)
    ClassAwareTemperature,  // CDT-train: z * (n_i / n_max)^gamma
    ClassAwareBias,         // LA-train: z + tau * ln(n_i)
};

struct Table1Hyper {
    double delta_max = 0.5;  // LDAM
    double margin = 0.2;     // cosine margin m
    double s = 10.0;         // cosine temperature
    double gamma = 0.3;      // CDT exponent
    double tau = 1.0;        // LA bias scale
};

Table1Method table1_method_from_name(const std::string& name);

// `base` is linear logits, except for CosineWithMargin where it is the
// cos(theta) matrix. Shapes: base (B,C), labels length B.
Var table1_train_logits(Tape& t, Table1Method method, Var base, const ClassStats& stats,
                        const std::vector<int>& labels, const Table1Hyper& hyper);

enum class ReweightMethod { None, ClassBalanced };

// Class-balanced weight (1-beta) / (1-beta^n_y); None returns 1.
double reweight_factor(ReweightMethod method, const ClassStats& stats, int label, double beta);

Var linear_logits(Tape& t, const LinearHead& head, Var f);

// cos(theta) matrix (B,C); errors on a zero feature vector.
Var cosine_scores(Tape& t, const CosineHead& head, Var f);
Var cosine_scores_from(Tape& t, Var w, double gamma, Var f);  // w bound on tape

// Mean cross-entropy over the batch; per-sample weights optional.
Var ce_loss(Tape& t, Var logits, const std::vector<int>& labels);
Var weighted_ce_loss(Tape& t, Var logits, const std::vector<int>& labels,
                     const std::vector<double>& weights);

// Per-class sigmoid focal loss, summed over classes, mean over batch.
Var focal_bce_loss(Tape& t, Var logits, const std::vector<int>& labels, double gamma);

// m_{yi} = (tau_b/s) ln(n_i/n_y) + (tau_m/s) ln(n_y/n_min) + m0, as a (C,C)
// matrix indexed [y][i]; diagonal entries are defined but unused by the loss.
Array robal_margin_matrix(const MarginSpec& spec, const ClassStats& stats, double s);

// L1 = ln(1 + sum_{i!=y} exp(s (cos_i - cos_y + m_{yi}))), mean over batch,
// evaluated in log-softmax form so it cannot overflow.
Var robal_loss_from_cos(Tape& t, Var cos, double s, const std::vector<int>& labels,
                        const Array& margins);
Var robal_loss(Tape& t, const CosineHead& head, Var f, const std::vector<int>& labels,
               const Array& margins);

// KL(softmax(za) || softmax(zb)) per sample, mean over batch.
Var kl_divergence(Tape& t, Var logits_a, Var logits_b);

// L = L1(adv) + alpha * KL(softmax(s cos_adv) || softmax(s cos_clean));
// margins enter only through L1.
Var robal_total_loss(Tape& t, const CosineHead& head, Var f_clean, Var f_adv,
                     const std::vector<int>& labels, const Array& margins, double alpha);

// Inference-stage logit transforms (Table-1 inference rows and the
// boundary adjustment of the cosine classifier).
struct PostHocRule {
    enum class Kind {
        None,
        LaPost,     // W f + b - tau ln(n_i)
        TauNorm,    // (W_i / ||W_i||^tau) . f
        CdtPost,    // (W_i / n_i^tau) . f
        Tde,        // W (f - alpha cos(f,d) d)
        Lws,        // s_i W_i . f
        RobalBias,  // s cos_i - tau_p ln(n_i / sum_j n_j)
    };
    Kind kind = Kind::None;
    double tau = 0.0;
    double alpha = 0.0;
    double tau_p = 0.0;
    Array tde_direction;  // normalized to unit length on use
    Array lws_scales;     // per-class s_i

    static Kind kind_from_name(const std::string& name);
    static std::string kind_name(Kind k);
};

struct HeadRef {
    const LinearHead* linear = nullptr;
    const CosineHead* cosine = nullptr;
};

Var posthoc_logits(Tape& t, const PostHocRule& rule, const HeadRef& head, Var f,
                   const ClassStats& stats);

// Index of the maximum logit; ties break to the lowest index; NaN rejected.
int argmax_predict(const std::vector<double>& logits);

}  // namespace robal
