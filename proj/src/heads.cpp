#include "robal/heads.hpp"

#include <algorithm>
#include <cmath>

namespace robal {

namespace {

Var softplus(Tape& t, Var x) {
    // relu(x) + log(1 + exp(-|x|)); safe for any magnitude
    Var ax = t.add(t.relu(x), t.relu(t.scale(x, -1.0)));
    Var ones = t.constant(Array::full(x.shape(), 1.0));
    return t.add(t.relu(x), t.log(t.add(ones, t.exp(t.scale(ax, -1.0)))));
}

}  // namespace

ClassStats ClassStats::from_counts(const std::vector<int64_t>& counts) {
    if (counts.empty()) throw std::invalid_argument("empty class counts");
    ClassStats s;
    s.counts = counts;
    s.n_min = counts[0];
    s.n_max = counts[0];
    int64_t total = 0;
    for (int64_t c : counts) {
        if (c < 1) throw std::invalid_argument("class counts must be >= 1");
        s.n_min = std::min(s.n_min, c);
        s.n_max = std::max(s.n_max, c);
        total += c;
    }
    s.priors.resize(counts.size());
    for (size_t i = 0; i < counts.size(); ++i)
        s.priors[i] = static_cast<double>(counts[i]) / static_cast<double>(total);
    return s;
}

Table1Method table1_method_from_name(const std::string& name) {
    if (name == "class-aware-margin") return Table1Method::ClassAwareMargin;
    if (name == "cosine-with-margin") return Table1Method::CosineWithMargin;
    if (name == "class-aware-temperature") return Table1Method::ClassAwareTemperature;
    if (name == "class-aware-bias") return Table1Method::ClassAwareBias;
    throw std::invalid_argument("unknown Table-1 method: " + name);
}

Var table1_train_logits(Tape& t, Table1Method method, Var base, const ClassStats& stats,
                        const std::vector<int>& labels, const Table1Hyper& hyper) {
    const Shape& s = base.shape();
    if (s.size() != 2) throw ShapeError("train logits expect (B,C) input");
    const int B = s[0], C = s[1];
    if (C != stats.classes()) throw ShapeError("logit width does not match class stats");

    switch (method) {
        case Table1Method::ClassAwareMargin: {
            if (static_cast<int>(labels.size()) != B)
                throw ShapeError("labels do not match batch");
            // delta_i = delta_max * n_i^(-1/4) / max_j n_j^(-1/4)
            //         = delta_max * (n_min / n_i)^(1/4)
            Array delta = Array::zeros({B, C});
            for (int b = 0; b < B; ++b) {
                const int y = labels[static_cast<size_t>(b)];
                const double d =
                    hyper.delta_max *
                    std::pow(static_cast<double>(stats.n_min) /
                                 static_cast<double>(stats.counts[static_cast<size_t>(y)]),
                             0.25);
                delta.v[static_cast<size_t>(b * C + y)] = d;
            }
            return t.sub(base, t.constant(std::move(delta)));
        }
        case Table1Method::CosineWithMargin: {
            if (static_cast<int>(labels.size()) != B)
                throw ShapeError("labels do not match batch");
            Array m = Array::zeros({B, C});
            for (int b = 0; b < B; ++b)
                m.v[static_cast<size_t>(b * C + labels[static_cast<size_t>(b)])] = hyper.margin;
            return t.scale(t.sub(base, t.constant(std::move(m))), hyper.s);
        }
        case Table1Method::ClassAwareTemperature: {
            Array mult = Array::zeros({1, C});
            for (int i = 0; i < C; ++i)
                mult.v[static_cast<size_t>(i)] =
                    std::pow(static_cast<double>(stats.counts[static_cast<size_t>(i)]) /
                                 static_cast<double>(stats.n_max),
                             hyper.gamma);
            return t.mul(base, t.broadcast_to(t.constant(std::move(mult)), s));
        }
        case Table1Method::ClassAwareBias: {
            Array bias = Array::zeros({1, C});
            for (int i = 0; i < C; ++i)
                bias.v[static_cast<size_t>(i)] =
                    hyper.tau * std::log(static_cast<double>(stats.counts[static_cast<size_t>(i)]));
            return t.add(base, t.broadcast_to(t.constant(std::move(bias)), s));
        }
    }
    throw std::invalid_argument("unknown Table-1 method");
}

double reweight_factor(ReweightMethod method, const ClassStats& stats, int label, double beta) {
    switch (method) {
        case ReweightMethod::None:
            return 1.0;
        case ReweightMethod::ClassBalanced: {
            if (!(beta >= 0.0 && beta < 1.0))
                throw std::invalid_argument("class-balanced beta must lie in [0,1)");
            const int64_t n = stats.counts.at(static_cast<size_t>(label));
            if (beta == 0.0) return 1.0;
            return (1.0 - beta) / (1.0 - std::pow(beta, static_cast<double>(n)));
        }
    }
    throw std::invalid_argument("unknown reweight method");
}

Var linear_logits(Tape& t, const LinearHead& head, Var f) {
    Var w = t.constant(head.W);
    Var logits = t.matmul(f, w, false, true);
    Var bias = t.constant(Array::from({1, head.W.shape[0]}, head.b.v));
    return t.add(logits, t.broadcast_to(bias, logits.shape()));
}

Var cosine_scores_from(Tape& t, Var w, double gamma, Var f) {
    const Shape& fs = f.shape();
    if (fs.size() != 2) throw ShapeError("cosine scores expect (B,d) features");
    Var fn = t.l2norm(f, 1);  // (B,1)
    for (double n : fn.val().v)
        if (n == 0.0) throw DomainError("zero feature vector cannot be normalized");
    Var f_unit = t.div(f, t.broadcast_to(fn, fs));
    Var wn = t.l2norm(w, 1);  // (C,1)
    Var wn_smoothed = t.add(wn, t.constant(Array::full(wn.shape(), gamma)));
    Var w_unit = t.div(w, t.broadcast_to(wn_smoothed, w.shape()));
    return t.matmul(f_unit, w_unit, false, true);
}

Var cosine_scores(Tape& t, const CosineHead& head, Var f) {
    return cosine_scores_from(t, t.constant(head.W), head.gamma, f);
}

Var ce_loss(Tape& t, Var logits, const std::vector<int>& labels) {
    Var lsm = t.log_softmax(logits, 1);
    Var picked = t.gather_rows(lsm, labels);
    return t.scale(t.mean_all(picked), -1.0);
}

Var weighted_ce_loss(Tape& t, Var logits, const std::vector<int>& labels,
                     const std::vector<double>& weights) {
    if (weights.size() != labels.size())
        throw ShapeError("per-sample weight count does not match labels");
    Var lsm = t.log_softmax(logits, 1);
    Var picked = t.gather_rows(lsm, labels);
    Var w = t.constant(Array::from({static_cast<int>(weights.size())}, weights));
    return t.scale(t.mean_all(t.mul(picked, w)), -1.0);
}

Var focal_bce_loss(Tape& t, Var logits, const std::vector<int>& labels, double gamma) {
    const Shape& s = logits.shape();
    if (s.size() != 2) throw ShapeError("focal loss expects (B,C) logits");
    const int B = s[0], C = s[1];
    if (static_cast<int>(labels.size()) != B) throw ShapeError("labels do not match batch");
    // u = z for the positive class, -z otherwise; p_t = sigmoid(u).
    Array sign = Array::full({B, C}, -1.0);
    for (int b = 0; b < B; ++b)
        sign.v[static_cast<size_t>(b * C + labels[static_cast<size_t>(b)])] = 1.0;
    Var u = t.mul(logits, t.constant(std::move(sign)));
    // (1 - p_t)^gamma = sigmoid(-u)^gamma = exp(-gamma * softplus(u))
    Var focal = t.exp(t.scale(softplus(t, u), -gamma));
    // -ln p_t = softplus(-u)
    Var bce = softplus(t, t.scale(u, -1.0));
    Var per_class = t.mul(focal, bce);
    Var per_sample = t.sum(per_class, {1});
    return t.mean_all(per_sample);
}

Array robal_margin_matrix(const MarginSpec& spec, const ClassStats& stats, double s) {
    if (s <= 0.0) throw std::invalid_argument("temperature s must be positive");
    const int C = stats.classes();
    Array m = Array::zeros({C, C});
    for (int y = 0; y < C; ++y) {
        const double ny = static_cast<double>(stats.counts[static_cast<size_t>(y)]);
        const double class_term = spec.tau_m / s * std::log(ny / static_cast<double>(stats.n_min));
        for (int i = 0; i < C; ++i) {
            const double ni = static_cast<double>(stats.counts[static_cast<size_t>(i)]);
            m.v[static_cast<size_t>(y * C + i)] =
                spec.tau_b / s * std::log(ni / ny) + class_term + spec.m0;
        }
    }
    return m;
}

Var robal_loss_from_cos(Tape& t, Var cos, double s, const std::vector<int>& labels,
                        const Array& margins) {
    const Shape& sh = cos.shape();
    if (sh.size() != 2) throw ShapeError("robal loss expects (B,C) cosine scores");
    const int B = sh[0], C = sh[1];
    if (margins.shape != Shape{C, C}) throw ShapeError("margin matrix must be (C,C)");
    // adjusted logits z_i = s (cos_i + m_{yi}) for i != y, z_y = s cos_y;
    // L1 is exactly the cross-entropy over z.
    Array add = Array::zeros({B, C});
    for (int b = 0; b < B; ++b) {
        const int y = labels[static_cast<size_t>(b)];
        for (int i = 0; i < C; ++i)
            if (i != y)
                add.v[static_cast<size_t>(b * C + i)] = margins.v[static_cast<size_t>(y * C + i)];
    }
    Var z = t.scale(t.add(cos, t.constant(std::move(add))), s);
    return ce_loss(t, z, labels);
}

Var robal_loss(Tape& t, const CosineHead& head, Var f, const std::vector<int>& labels,
               const Array& margins) {
    Var cos = cosine_scores(t, head, f);
    return robal_loss_from_cos(t, cos, head.s, labels, margins);
}

Var kl_divergence(Tape& t, Var logits_a, Var logits_b) {
    Var lp = t.log_softmax(logits_a, 1);
    Var lq = t.log_softmax(logits_b, 1);
    Var p = t.exp(lp);
    Var per_sample = t.sum(t.mul(p, t.sub(lp, lq)), {1});
    return t.mean_all(per_sample);
}

Var robal_total_loss(Tape& t, const CosineHead& head, Var f_clean, Var f_adv,
                     const std::vector<int>& labels, const Array& margins, double alpha) {
    if (alpha < 0.0) throw std::invalid_argument("alpha must be non-negative");
    Var cos_adv = cosine_scores(t, head, f_adv);
    Var l1 = robal_loss_from_cos(t, cos_adv, head.s, labels, margins);
    if (alpha == 0.0) return l1;
    // the KL couples the raw cosine outputs; pushing them through the
    // temperature first makes the regularizer overwhelm the margin loss
    // and training settles on constant features
    Var cos_clean = cosine_scores(t, head, f_clean);
    Var kl = kl_divergence(t, cos_adv, cos_clean);
    return t.add(l1, t.scale(kl, alpha));
}

PostHocRule::Kind PostHocRule::kind_from_name(const std::string& name) {
    if (name == "none") return Kind::None;
    if (name == "la-post") return Kind::LaPost;
    if (name == "tau-norm") return Kind::TauNorm;
    if (name == "cdt-post") return Kind::CdtPost;
    if (name == "tde") return Kind::Tde;
    if (name == "lws") return Kind::Lws;
    if (name == "robal-bias") return Kind::RobalBias;
    throw std::invalid_argument("unknown posthoc rule: " + name);
}

std::string PostHocRule::kind_name(Kind k) {
    switch (k) {
        case Kind::None: return "none";
        case Kind::LaPost: return "la-post";
        case Kind::TauNorm: return "tau-norm";
        case Kind::CdtPost: return "cdt-post";
        case Kind::Tde: return "tde";
        case Kind::Lws: return "lws";
        case Kind::RobalBias: return "robal-bias";
    }
    return "none";
}

namespace {

const LinearHead& require_linear(const HeadRef& head, const char* rule) {
    if (!head.linear)
        throw std::invalid_argument(std::string(rule) + " applies to linear heads only");
    return *head.linear;
}

Var matmul_const_w(Tape& t, Array w, Var f) {
    return t.matmul(f, t.constant(std::move(w)), false, true);
}

}  // namespace

Var posthoc_logits(Tape& t, const PostHocRule& rule, const HeadRef& head, Var f,
                   const ClassStats& stats) {
    switch (rule.kind) {
        case PostHocRule::Kind::None: {
            if (head.linear) return linear_logits(t, *head.linear, f);
            if (head.cosine)
                return t.scale(cosine_scores(t, *head.cosine, f), head.cosine->s);
            throw std::invalid_argument("no head supplied");
        }
        case PostHocRule::Kind::LaPost: {
            PostHocRule none;
            Var base = posthoc_logits(t, none, head, f, stats);
            const int C = base.shape()[1];
            Array bias = Array::zeros({1, C});
            for (int i = 0; i < C; ++i)
                bias.v[static_cast<size_t>(i)] =
                    rule.tau * std::log(static_cast<double>(stats.counts[static_cast<size_t>(i)]));
            return t.sub(base, t.broadcast_to(t.constant(std::move(bias)), base.shape()));
        }
        case PostHocRule::Kind::TauNorm: {
            const LinearHead& lin = require_linear(head, "tau-norm");
            const int C = lin.W.shape[0], d = lin.W.shape[1];
            Array w = lin.W;
            for (int i = 0; i < C; ++i) {
                double norm = 0.0;
                for (int j = 0; j < d; ++j) {
                    const double v = w.v[static_cast<size_t>(i * d + j)];
                    norm += v * v;
                }
                norm = std::sqrt(norm);
                const double denom = std::pow(norm, rule.tau);
                if (denom == 0.0) throw DomainError("tau-norm on a zero weight row");
                for (int j = 0; j < d; ++j) w.v[static_cast<size_t>(i * d + j)] /= denom;
            }
            return matmul_const_w(t, std::move(w), f);
        }
        case PostHocRule::Kind::CdtPost: {
            const LinearHead& lin = require_linear(head, "cdt-post");
            const int C = lin.W.shape[0], d = lin.W.shape[1];
            Array w = lin.W;
            for (int i = 0; i < C; ++i) {
                const double denom =
                    std::pow(static_cast<double>(stats.counts[static_cast<size_t>(i)]), rule.tau);
                for (int j = 0; j < d; ++j) w.v[static_cast<size_t>(i * d + j)] /= denom;
            }
            return matmul_const_w(t, std::move(w), f);
        }
        case PostHocRule::Kind::Tde: {
            const LinearHead& lin = require_linear(head, "tde");
            if (rule.tde_direction.v.empty())
                throw std::invalid_argument("tde rule requires a stored direction");
            Array d = rule.tde_direction;
            double norm = 0.0;
            for (double v : d.v) norm += v * v;
            norm = std::sqrt(norm);
            if (norm == 0.0) throw DomainError("tde direction has zero norm");
            for (double& v : d.v) v /= norm;
            const int dim = static_cast<int>(d.v.size());
            // cos(f,d) = (f . d) / ||f||
            Var dv = t.constant(Array::from({dim, 1}, d.v));
            Var fd = t.matmul(f, dv);                      // (B,1)
            Var fn = t.l2norm(f, 1);                       // (B,1)
            Var cosfd = t.div(fd, fn);                     // (B,1)
            Var coef = t.scale(cosfd, rule.alpha);         // (B,1)
            Var drow = t.constant(Array::from({1, dim}, d.v));
            Var shift = t.mul(t.broadcast_to(coef, f.shape()),
                              t.broadcast_to(drow, f.shape()));
            Var adjusted = t.sub(f, shift);
            return matmul_const_w(t, lin.W, adjusted);
        }
        case PostHocRule::Kind::Lws: {
            const LinearHead& lin = require_linear(head, "lws");
            const int C = lin.W.shape[0], d = lin.W.shape[1];
            if (static_cast<int>(rule.lws_scales.v.size()) != C)
                throw std::invalid_argument("lws rule requires one scale per class");
            Array w = lin.W;
            for (int i = 0; i < C; ++i)
                for (int j = 0; j < d; ++j)
                    w.v[static_cast<size_t>(i * d + j)] *= rule.lws_scales.v[static_cast<size_t>(i)];
            return matmul_const_w(t, std::move(w), f);
        }
        case PostHocRule::Kind::RobalBias: {
            if (!head.cosine)
                throw std::invalid_argument("robal-bias applies to cosine heads only");
            Var scores = t.scale(cosine_scores(t, *head.cosine, f), head.cosine->s);
            const int C = scores.shape()[1];
            Array bias = Array::zeros({1, C});
            for (int i = 0; i < C; ++i)
                bias.v[static_cast<size_t>(i)] =
                    rule.tau_p * std::log(stats.priors[static_cast<size_t>(i)]);
            return t.sub(scores, t.broadcast_to(t.constant(std::move(bias)), scores.shape()));
        }
    }
    throw std::invalid_argument("unknown posthoc rule");
}

int argmax_predict(const std::vector<double>& logits) {
    if (logits.empty()) throw std::invalid_argument("argmax of empty logits");
    int best = 0;
    for (size_t i = 0; i < logits.size(); ++i) {
        if (std::isnan(logits[i])) throw DomainError("NaN logit in argmax_predict");
        if (logits[i] > logits[static_cast<size_t>(best)]) best = static_cast<int>(i);
    }
    return best;
}

}  // namespace robal
