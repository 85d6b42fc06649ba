#include "robal/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "robal/rng.hpp"

namespace robal {

namespace {

double sign0(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

struct Box {
    std::vector<double> lo, hi;
};

Box ball_box(const Array& x0, const AttackBudget& b) {
    Box box;
    box.lo.resize(x0.v.size());
    box.hi.resize(x0.v.size());
    for (size_t i = 0; i < x0.v.size(); ++i) {
        box.lo[i] = std::max(b.clip_lo, x0.v[i] - b.epsilon);
        box.hi[i] = std::min(b.clip_hi, x0.v[i] + b.epsilon);
    }
    return box;
}

void project(Array& x, const Box& box) {
    for (size_t i = 0; i < x.v.size(); ++i)
        x.v[i] = std::min(std::max(x.v[i], box.lo[i]), box.hi[i]);
}

std::vector<int> row_predictions(const Array& logits) {
    const int B = logits.shape[0], C = logits.shape[1];
    std::vector<int> out(static_cast<size_t>(B));
    std::vector<double> row(static_cast<size_t>(C));
    for (int b = 0; b < B; ++b) {
        std::copy_n(logits.v.begin() + static_cast<int64_t>(b) * C, C, row.begin());
        out[static_cast<size_t>(b)] = argmax_predict(row);
    }
    return out;
}

// ranks logits of one row in descending order, returns index list
std::vector<int> desc_order(const double* z, int C) {
    std::vector<int> idx(static_cast<size_t>(C));
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return z[a] > z[b]; });
    return idx;
}

// Attack objectives as tape expressions; all are maximized by the attack
// loop. Order statistics are taken from the current forward values and
// enter the graph as constant gather indices.
Var attack_objective(Tape& t, Var logits, const std::vector<int>& y, PgdLoss kind,
                     double kappa, const std::vector<int>* targets) {
    const int B = logits.shape()[0];
    const int C = logits.shape()[1];
    switch (kind) {
        case PgdLoss::Ce: {
            Var lsm = t.log_softmax(logits, 1);
            return t.scale(t.sum_all(t.gather_rows(lsm, y)), -1.0);
        }
        case PgdLoss::CwMargin: {
            // maximize -f with f = max(z_y - max_{i != y} z_i, -kappa)
            std::vector<int> other(static_cast<size_t>(B));
            const auto& zv = logits.val().v;
            for (int b = 0; b < B; ++b) {
                int best = -1;
                for (int i = 0; i < C; ++i) {
                    if (i == y[static_cast<size_t>(b)]) continue;
                    if (best < 0 || zv[static_cast<size_t>(b * C + i)] >
                                        zv[static_cast<size_t>(b * C + best)])
                        best = i;
                }
                other[static_cast<size_t>(b)] = best;
            }
            Var zy = t.gather_rows(logits, y);
            Var zo = t.gather_rows(logits, other);
            Var f = t.clamp(t.sub(zy, zo), -kappa, HUGE_VAL);
            return t.scale(t.sum_all(f), -1.0);
        }
        case PgdLoss::Dlr: {
            if (C < 3) throw std::invalid_argument("untargeted DLR needs C >= 3");
            std::vector<int> i1(static_cast<size_t>(B)), i3(static_cast<size_t>(B)),
                other(static_cast<size_t>(B));
            const auto& zv = logits.val().v;
            for (int b = 0; b < B; ++b) {
                auto ord = desc_order(zv.data() + static_cast<int64_t>(b) * C, C);
                i1[static_cast<size_t>(b)] = ord[0];
                i3[static_cast<size_t>(b)] = ord[2];
                other[static_cast<size_t>(b)] =
                    ord[0] == y[static_cast<size_t>(b)] ? ord[1] : ord[0];
            }
            Var zy = t.gather_rows(logits, y);
            Var zo = t.gather_rows(logits, other);
            Var z1 = t.gather_rows(logits, i1);
            Var z3 = t.gather_rows(logits, i3);
            Var value = t.div(t.sub(zo, zy), t.sub(z1, z3));
            return t.sum_all(value);
        }
        case PgdLoss::TargetedDlr: {
            if (C < 4) throw std::invalid_argument("targeted DLR needs C >= 4");
            if (!targets || static_cast<int>(targets->size()) != B)
                throw std::invalid_argument("targeted DLR needs one target per sample");
            std::vector<int> i1(static_cast<size_t>(B)), i3(static_cast<size_t>(B)),
                i4(static_cast<size_t>(B));
            const auto& zv = logits.val().v;
            for (int b = 0; b < B; ++b) {
                auto ord = desc_order(zv.data() + static_cast<int64_t>(b) * C, C);
                i1[static_cast<size_t>(b)] = ord[0];
                i3[static_cast<size_t>(b)] = ord[2];
                i4[static_cast<size_t>(b)] = ord[3];
            }
            Var zy = t.gather_rows(logits, y);
            Var zt = t.gather_rows(logits, *targets);
            Var z1 = t.gather_rows(logits, i1);
            Var z34 = t.scale(t.add(t.gather_rows(logits, i3), t.gather_rows(logits, i4)), 0.5);
            Var value = t.div(t.sub(zt, zy), t.sub(z1, z34));
            return t.sum_all(value);
        }
    }
    throw std::invalid_argument("unknown attack loss");
}

}  // namespace

void AttackBudget::validate() const {
    if (epsilon < 0.0) throw std::invalid_argument("epsilon must be >= 0");
    if (steps > 0 && eta <= 0.0) throw std::invalid_argument("eta must be > 0 when steps > 0");
    if (restarts < 1) throw std::invalid_argument("restarts must be >= 1");
    if (mu < 0.0) throw std::invalid_argument("mim decay mu must be >= 0");
}

Var Scorer::logits(Tape& t, Var x) const {
    const Shape& xs = x.shape();
    Var input = x;
    if (net->arch == Network::Arch::Mlp && xs.size() != 2)
        input = t.reshape(x, {xs[0], static_cast<int>(numel(xs) / xs[0])});
    Var f = net->features_const(t, input);
    LinearHead lin;
    CosineHead cos;
    HeadRef ref = net->head_ref(lin, cos);
    PostHocRule none;
    PostHocRule effective = rule ? *rule : none;
    if (effective.kind == PostHocRule::Kind::Lws && effective.lws_scales.v.empty())
        effective.lws_scales = net->lws_scales;
    static const ClassStats empty_stats;
    const ClassStats& st = stats ? *stats : empty_stats;
    Var z = posthoc_logits(t, effective, ref, f, st);
    if (logit_scale != 1.0) z = t.scale(z, logit_scale);
    return z;
}

Array Scorer::logits_value(const Array& x) const {
    Tape t;
    Var xv = t.leaf(x, false);
    return logits(t, xv).val();
}

std::vector<int> Scorer::predict(const Array& x) const { return row_predictions(logits_value(x)); }

PgdLoss pgd_loss_from_name(const std::string& name) {
    if (name == "ce") return PgdLoss::Ce;
    if (name == "cw-margin") return PgdLoss::CwMargin;
    if (name == "dlr") return PgdLoss::Dlr;
    if (name == "targeted-dlr") return PgdLoss::TargetedDlr;
    throw std::invalid_argument("unknown pgd loss kind: " + name);
}

PerturbResult fgsm(const Scorer& scorer, const Array& x, const std::vector<int>& y,
                   const AttackBudget& budget) {
    budget.validate();
    Tape t;
    Var xv = t.leaf(x, true);
    Var z = scorer.logits(t, xv);
    Var obj = attack_objective(t, z, y, PgdLoss::Ce, 0.0, nullptr);
    t.backward(obj);
    const auto& g = t.grad(xv.id);

    PerturbResult res;
    res.x_adv = x;
    for (size_t i = 0; i < x.v.size(); ++i) {
        double v = x.v[i] + budget.epsilon * sign0(g[i]);
        res.x_adv.v[i] = std::min(std::max(v, budget.clip_lo), budget.clip_hi);
    }
    res.loss_trace.push_back(obj.scalar() / x.shape[0]);
    const auto pred = scorer.predict(res.x_adv);
    res.success.resize(y.size());
    for (size_t i = 0; i < y.size(); ++i)
        res.success[i] = pred[i] != y[i] ? 1 : 0;
    return res;
}

PerturbResult pgd_attack(const Scorer& scorer, const Array& x, const std::vector<int>& y,
                         const AttackBudget& budget, const PgdOptions& opt) {
    budget.validate();
    const int B = x.shape[0];
    const int64_t D = numel(x.shape) / B;
    const Box box = ball_box(x, budget);

    PerturbResult res;
    res.x_adv = x;
    res.success.assign(y.size(), 0);

    for (int r = 0; r < budget.restarts; ++r) {
        Array cur = x;
        if (opt.random_init) {
            for (int b = 0; b < B; ++b) {
                const int64_t gid = opt.sample_indices
                                        ? (*opt.sample_indices)[static_cast<size_t>(b)]
                                        : static_cast<int64_t>(b);
                Rng rng(derive_seed(opt.seed, static_cast<uint64_t>(gid),
                                    static_cast<uint64_t>(r), 0x50474449ULL));
                for (int64_t j = 0; j < D; ++j) {
                    const size_t i = static_cast<size_t>(b * D + j);
                    cur.v[i] = x.v[i] + rng.uniform(-budget.epsilon, budget.epsilon);
                }
            }
            project(cur, box);
        }
        for (int step = 0; step <= budget.steps; ++step) {
            Tape t;
            Var xv = t.leaf(cur, step < budget.steps);
            Var z = scorer.logits(t, xv);
            // record any break at the current iterate
            const auto pred = row_predictions(z.val());
            for (int b = 0; b < B; ++b) {
                const size_t sb = static_cast<size_t>(b);
                if (!res.success[sb] && pred[sb] != y[sb]) {
                    res.success[sb] = 1;
                    std::copy_n(cur.v.begin() + b * D, D, res.x_adv.v.begin() + b * D);
                }
            }
            if (step == budget.steps) break;
            Var obj = attack_objective(t, z, y, opt.loss, budget.cw_kappa, opt.targets);
            if (r == 0) res.loss_trace.push_back(obj.scalar() / B);
            t.backward(obj);
            const auto& g = t.grad(xv.id);
            for (size_t i = 0; i < cur.v.size(); ++i) cur.v[i] += budget.eta * sign0(g[i]);
            project(cur, box);
        }
        if (r == budget.restarts - 1) {
            for (int b = 0; b < B; ++b)
                if (!res.success[static_cast<size_t>(b)])
                    std::copy_n(cur.v.begin() + b * D, D, res.x_adv.v.begin() + b * D);
        }
    }
    return res;
}

PerturbResult mim_attack(const Scorer& scorer, const Array& x, const std::vector<int>& y,
                         const AttackBudget& budget) {
    budget.validate();
    const int B = x.shape[0];
    const int64_t D = numel(x.shape) / B;
    const Box box = ball_box(x, budget);

    PerturbResult res;
    res.x_adv = x;
    res.success.assign(y.size(), 0);

    Array cur = x;
    std::vector<double> acc(x.v.size(), 0.0);
    for (int step = 0; step <= budget.steps; ++step) {
        Tape t;
        Var xv = t.leaf(cur, step < budget.steps);
        Var z = scorer.logits(t, xv);
        const auto pred = row_predictions(z.val());
        for (int b = 0; b < B; ++b) {
            const size_t sb = static_cast<size_t>(b);
            if (!res.success[sb] && pred[sb] != y[sb]) {
                res.success[sb] = 1;
                std::copy_n(cur.v.begin() + b * D, D, res.x_adv.v.begin() + b * D);
            }
        }
        if (step == budget.steps) break;
        Var obj = attack_objective(t, z, y, PgdLoss::Ce, 0.0, nullptr);
        res.loss_trace.push_back(obj.scalar() / B);
        t.backward(obj);
        const auto& g = t.grad(xv.id);
        for (int b = 0; b < B; ++b) {
            double l1 = 0.0;
            for (int64_t j = 0; j < D; ++j) l1 += std::abs(g[static_cast<size_t>(b * D + j)]);
            for (int64_t j = 0; j < D; ++j) {
                const size_t i = static_cast<size_t>(b * D + j);
                // zero gradient contributes nothing; with mu = 0 the step
                // is skipped through sign(0) = 0
                acc[i] = budget.mu * acc[i] + (l1 > 0.0 ? g[i] / l1 : 0.0);
            }
        }
        for (size_t i = 0; i < cur.v.size(); ++i) cur.v[i] += budget.eta * sign0(acc[i]);
        project(cur, box);
    }
    for (int b = 0; b < B; ++b)
        if (!res.success[static_cast<size_t>(b)])
            std::copy_n(cur.v.begin() + b * D, D, res.x_adv.v.begin() + b * D);
    return res;
}

PerturbResult cw_l2(const Scorer& scorer, const Array& x, const std::vector<int>& y,
                    const AttackBudget& budget, int opt_steps, double lr) {
    if (budget.cw_c <= 0.0) throw std::invalid_argument("cw trade-off constant c must be > 0");
    const int B = x.shape[0];
    const int64_t D = numel(x.shape) / B;

    // change of variables x' = (tanh w + 1)/2; start at (a shrunk copy of) x
    const double shrink = 1e-6;
    Array w0 = x;
    for (double& v : w0.v) {
        const double c = std::min(std::max(v, shrink), 1.0 - shrink);
        v = std::atanh(2.0 * c - 1.0);
    }

    PerturbResult res;
    res.x_adv = x;
    res.success.assign(y.size(), 0);
    res.distortion.assign(y.size(), std::numeric_limits<double>::infinity());
    std::vector<double> best_obj(y.size(), std::numeric_limits<double>::infinity());

    Array w = w0;
    std::vector<double> m(w.v.size(), 0.0), v2(w.v.size(), 0.0);
    const double b1 = 0.9, b2 = 0.999, adam_eps = 1e-8;

    for (int step = 0; step <= opt_steps; ++step) {
        Tape t;
        Var wv = t.leaf(w, step < opt_steps);
        Var half = t.constant(Array::full(w.shape, 0.5));
        Var xp = t.add(t.scale(t.tanh(wv), 0.5), half);
        Var z = scorer.logits(t, xp);

        // distortions and success bookkeeping at the current iterate
        const Array& xp_val = xp.val();
        const auto pred = row_predictions(z.val());
        for (int b = 0; b < B; ++b) {
            const size_t sb = static_cast<size_t>(b);
            double dist2 = 0.0;
            for (int64_t j = 0; j < D; ++j) {
                const double d = xp_val.v[static_cast<size_t>(b * D + j)] -
                                 x.v[static_cast<size_t>(b * D + j)];
                dist2 += d * d;
            }
            if (pred[sb] != y[sb] && dist2 < best_obj[sb]) {
                best_obj[sb] = dist2;
                res.success[sb] = 1;
                res.distortion[sb] = std::sqrt(dist2);
                std::copy_n(xp_val.v.begin() + b * D, D, res.x_adv.v.begin() + b * D);
            }
        }
        if (step == opt_steps) break;

        Var xc = t.constant(x);
        Var diff = t.sub(xp, xc);
        Var flat = t.reshape(diff, {B, static_cast<int>(D)});
        Var dist = t.sum(t.mul(flat, flat), {1});  // (B)

        std::vector<int> other(static_cast<size_t>(B));
        const int C = z.shape()[1];
        const auto& zv = z.val().v;
        for (int b = 0; b < B; ++b) {
            int best = -1;
            for (int i = 0; i < C; ++i) {
                if (i == y[static_cast<size_t>(b)]) continue;
                if (best < 0 ||
                    zv[static_cast<size_t>(b * C + i)] > zv[static_cast<size_t>(b * C + best)])
                    best = i;
            }
            other[static_cast<size_t>(b)] = best;
        }
        Var f = t.clamp(t.sub(t.gather_rows(z, y), t.gather_rows(z, other)), -budget.cw_kappa,
                        HUGE_VAL);
        Var obj = t.sum_all(t.add(t.scale(f, budget.cw_c), dist));
        res.loss_trace.push_back(obj.scalar() / B);
        t.backward(obj);
        const auto& g = t.grad(wv.id);

        const double bc1 = 1.0 - std::pow(b1, step + 1);
        const double bc2 = 1.0 - std::pow(b2, step + 1);
        for (size_t i = 0; i < w.v.size(); ++i) {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v2[i] = b2 * v2[i] + (1.0 - b2) * g[i] * g[i];
            w.v[i] -= lr * (m[i] / bc1) / (std::sqrt(v2[i] / bc2) + adam_eps);
        }
    }
    // keep the final iterate for samples never broken
    {
        Tape t;
        Var wv = t.leaf(w, false);
        Var half = t.constant(Array::full(w.shape, 0.5));
        const Array& xp = t.add(t.scale(t.tanh(wv), 0.5), half).val();
        for (int b = 0; b < B; ++b)
            if (!res.success[static_cast<size_t>(b)])
                std::copy_n(xp.v.begin() + b * D, D, res.x_adv.v.begin() + b * D);
    }
    return res;
}

PerturbResult cw_linf(const Scorer& scorer, const Array& x, const std::vector<int>& y,
                      const AttackBudget& budget, uint64_t seed,
                      const std::vector<int64_t>* sample_indices) {
    PgdOptions opt;
    opt.loss = PgdLoss::CwMargin;
    opt.random_init = budget.random_init;
    opt.seed = seed;
    opt.sample_indices = sample_indices;
    return pgd_attack(scorer, x, y, budget, opt);
}

double dlr_loss(const std::vector<double>& z, int y) {
    const int C = static_cast<int>(z.size());
    if (C < 3) throw std::invalid_argument("untargeted DLR needs C >= 3");
    auto ord = desc_order(z.data(), C);
    const double z1 = z[static_cast<size_t>(ord[0])];
    const double z3 = z[static_cast<size_t>(ord[2])];
    const double max_other =
        ord[0] == y ? z[static_cast<size_t>(ord[1])] : z1;
    return -(z[static_cast<size_t>(y)] - max_other) / (z1 - z3);
}

double dlr_loss_targeted(const std::vector<double>& z, int y, int target) {
    const int C = static_cast<int>(z.size());
    if (C < 4) throw std::invalid_argument("targeted DLR needs C >= 4");
    auto ord = desc_order(z.data(), C);
    const double z1 = z[static_cast<size_t>(ord[0])];
    const double z3 = z[static_cast<size_t>(ord[2])];
    const double z4 = z[static_cast<size_t>(ord[3])];
    return -(z[static_cast<size_t>(y)] - z[static_cast<size_t>(target)]) /
           (z1 - 0.5 * (z3 + z4));
}

std::vector<uint8_t> ensemble_eval(const Scorer& scorer, const Array& x,
                                   const std::vector<int>& y, const AttackBudget& budget,
                                   uint64_t seed, const std::vector<int64_t>* sample_indices) {
    budget.validate();
    const int B = x.shape[0];
    const int64_t D = numel(x.shape) / B;
    const int C = scorer.net->classes;
    std::vector<uint8_t> robust(static_cast<size_t>(B), 1);

    std::vector<int64_t> ids(static_cast<size_t>(B));
    for (int b = 0; b < B; ++b)
        ids[static_cast<size_t>(b)] =
            sample_indices ? (*sample_indices)[static_cast<size_t>(b)] : b;

    // stage 1: PGD with cross-entropy, multi-restart
    {
        PgdOptions opt;
        opt.loss = PgdLoss::Ce;
        opt.random_init = budget.random_init;
        opt.seed = derive_seed(seed, 0xce);
        opt.sample_indices = &ids;
        auto res = pgd_attack(scorer, x, y, budget, opt);
        for (int b = 0; b < B; ++b)
            if (res.success[static_cast<size_t>(b)]) robust[static_cast<size_t>(b)] = 0;
    }

    // stage 2: targeted DLR against the top-ranked classes by clean logit
    if (C >= 4) {
        const Array clean_logits = scorer.logits_value(x);
        std::vector<std::vector<int>> ranking(static_cast<size_t>(B));
        for (int b = 0; b < B; ++b) {
            auto ord = desc_order(clean_logits.v.data() + static_cast<int64_t>(b) * C, C);
            for (int i : ord)
                if (i != y[static_cast<size_t>(b)]) ranking[static_cast<size_t>(b)].push_back(i);
        }
        const int n_targets = std::min(C - 1, 9);
        AttackBudget tb = budget;
        tb.restarts = 1;
        for (int r = 0; r < n_targets; ++r) {
            std::vector<int64_t> active;
            for (int b = 0; b < B; ++b)
                if (robust[static_cast<size_t>(b)]) active.push_back(b);
            if (active.empty()) break;
            Array xs = Array::zeros([&] {
                Shape s = x.shape;
                s[0] = static_cast<int>(active.size());
                return s;
            }());
            std::vector<int> ys(active.size());
            std::vector<int> targets(active.size());
            std::vector<int64_t> sub_ids(active.size());
            for (size_t a = 0; a < active.size(); ++a) {
                const int64_t b = active[a];
                std::copy_n(x.v.begin() + b * D, D,
                            xs.v.begin() + static_cast<int64_t>(a) * D);
                ys[a] = y[static_cast<size_t>(b)];
                targets[a] = ranking[static_cast<size_t>(b)][static_cast<size_t>(r)];
                sub_ids[a] = ids[static_cast<size_t>(b)];
            }
            PgdOptions opt;
            opt.loss = PgdLoss::TargetedDlr;
            opt.random_init = budget.random_init;
            opt.seed = derive_seed(seed, 0xd1, static_cast<uint64_t>(r));
            opt.sample_indices = &sub_ids;
            opt.targets = &targets;
            auto res = pgd_attack(scorer, xs, ys, tb, opt);
            for (size_t a = 0; a < active.size(); ++a)
                if (res.success[a]) robust[static_cast<size_t>(active[a])] = 0;
        }
    }
    return robust;
}

}  // namespace robal
