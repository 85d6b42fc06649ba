#include "robal/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <thread>

namespace robal {

namespace {

constexpr int64_t kChunk = 512;

void parallel_chunks(int64_t n, int threads,
                     const std::function<void(int64_t, int64_t)>& fn) {
    const int64_t n_chunks = (n + kChunk - 1) / kChunk;
    if (threads <= 1 || n_chunks <= 1) {
        for (int64_t c = 0; c < n_chunks; ++c)
            fn(c * kChunk, std::min(n, (c + 1) * kChunk));
        return;
    }
    std::atomic<int64_t> next{0};
    auto worker = [&] {
        for (;;) {
            const int64_t c = next.fetch_add(1);
            if (c >= n_chunks) return;
            fn(c * kChunk, std::min(n, (c + 1) * kChunk));
        }
    };
    std::vector<std::thread> pool;
    const int n_threads = static_cast<int>(std::min<int64_t>(threads, n_chunks));
    pool.reserve(static_cast<size_t>(n_threads));
    for (int i = 0; i < n_threads; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
}

std::vector<int64_t> iota_ids(int64_t lo, int64_t hi) {
    std::vector<int64_t> ids(static_cast<size_t>(hi - lo));
    std::iota(ids.begin(), ids.end(), lo);
    return ids;
}

// per-sample survival under one attack; survived == prediction kept the
// true label at every recorded adversarial point
std::vector<uint8_t> run_attack_survival(const Scorer& scorer, const AttackSpec& spec,
                                         const Array& x, const std::vector<int>& y,
                                         uint64_t seed, const std::vector<int64_t>& ids) {
    std::vector<uint8_t> survived(y.size(), 1);
    auto apply_success = [&](const std::vector<uint8_t>& success) {
        for (size_t i = 0; i < y.size(); ++i) survived[i] = success[i] ? 0 : 1;
    };
    if (spec.name == "fgsm") {
        apply_success(fgsm(scorer, x, y, spec.budget).success);
    } else if (spec.name == "pgd") {
        PgdOptions opt;
        opt.loss = spec.pgd_loss;
        opt.random_init = spec.budget.random_init;
        opt.seed = derive_seed(seed, 0x706764ULL);
        opt.sample_indices = &ids;
        apply_success(pgd_attack(scorer, x, y, spec.budget, opt).success);
    } else if (spec.name == "mim") {
        apply_success(mim_attack(scorer, x, y, spec.budget).success);
    } else if (spec.name == "cw") {
        apply_success(cw_linf(scorer, x, y, spec.budget, derive_seed(seed, 0x6377ULL), &ids)
                          .success);
    } else if (spec.name == "cw-l2") {
        apply_success(
            cw_l2(scorer, x, y, spec.budget, spec.budget.cw_steps, spec.budget.cw_lr).success);
    } else if (spec.name == "ensemble") {
        survived = ensemble_eval(scorer, x, y, spec.budget, derive_seed(seed, 0x656e73ULL), &ids);
    } else {
        throw std::invalid_argument("unknown attack name: " + spec.name);
    }
    return survived;
}

HistSummary summarize(std::vector<double> values, double lo, double hi, int n_bins) {
    HistSummary h;
    h.count = static_cast<int64_t>(values.size());
    h.bin_lo = lo;
    h.bin_hi = hi;
    h.bins.assign(static_cast<size_t>(n_bins), 0);
    if (values.empty()) return h;
    double sum = 0.0;
    for (double v : values) sum += v;
    h.mean = sum / static_cast<double>(values.size());
    std::sort(values.begin(), values.end());
    auto pct = [&](double p) {
        const size_t i = static_cast<size_t>(p * (values.size() - 1) + 0.5);
        return values[std::min(i, values.size() - 1)];
    };
    h.p10 = pct(0.10);
    h.p50 = pct(0.50);
    h.p90 = pct(0.90);
    const double width = (hi - lo) > 0 ? (hi - lo) : 1.0;
    for (double v : values) {
        int b = static_cast<int>((v - lo) / width * n_bins);
        b = std::min(std::max(b, 0), n_bins - 1);
        ++h.bins[static_cast<size_t>(b)];
    }
    return h;
}

}  // namespace

EvalReport evaluate(const Scorer& scorer, const LabeledDataset& test,
                    const std::vector<AttackSpec>& attacks, uint64_t seed, int threads) {
    const int64_t n = test.size();
    const int C = test.C;
    std::vector<uint8_t> clean_correct(static_cast<size_t>(n), 0);
    std::map<std::string, std::vector<uint8_t>> robust;
    for (const auto& a : attacks) robust[a.name].assign(static_cast<size_t>(n), 0);

    parallel_chunks(n, threads, [&](int64_t lo, int64_t hi) {
        const auto ids = iota_ids(lo, hi);
        const Array x = test.batch(ids);
        const auto y = test.batch_labels(ids);
        const auto pred = scorer.predict(x);
        for (size_t i = 0; i < ids.size(); ++i)
            clean_correct[static_cast<size_t>(ids[i])] = pred[i] == y[i] ? 1 : 0;
        for (const auto& spec : attacks) {
            const auto survived = run_attack_survival(scorer, spec, x, y, seed, ids);
            auto& slot = robust[spec.name];
            for (size_t i = 0; i < ids.size(); ++i)
                slot[static_cast<size_t>(ids[i])] =
                    (pred[i] == y[i] && survived[i]) ? 1 : 0;
        }
    });

    EvalReport report;
    report.class_sizes.assign(static_cast<size_t>(C), 0);
    std::vector<int64_t> clean_hits(static_cast<size_t>(C), 0);
    for (int64_t i = 0; i < n; ++i) {
        const int y = test.labels[static_cast<size_t>(i)];
        ++report.class_sizes[static_cast<size_t>(y)];
        if (clean_correct[static_cast<size_t>(i)]) ++clean_hits[static_cast<size_t>(y)];
    }
    int64_t clean_total = 0;
    for (int64_t h : clean_hits) clean_total += h;
    report.a_nat = static_cast<double>(clean_total) / static_cast<double>(n);
    report.recall_clean.resize(static_cast<size_t>(C));
    for (int c = 0; c < C; ++c)
        report.recall_clean[static_cast<size_t>(c)] =
            static_cast<double>(clean_hits[static_cast<size_t>(c)]) /
            static_cast<double>(report.class_sizes[static_cast<size_t>(c)]);

    for (const auto& spec : attacks) {
        report.attack_names.push_back(spec.name);
        const auto& flags = robust[spec.name];
        std::vector<int64_t> hits(static_cast<size_t>(C), 0);
        int64_t total = 0;
        for (int64_t i = 0; i < n; ++i)
            if (flags[static_cast<size_t>(i)]) {
                ++total;
                ++hits[static_cast<size_t>(test.labels[static_cast<size_t>(i)])];
            }
        const double acc = static_cast<double>(total) / static_cast<double>(n);
        report.a_rob[spec.name] = acc;
        report.r_bdy[spec.name] = report.a_nat - acc;
        auto& rec = report.recall_attack[spec.name];
        rec.resize(static_cast<size_t>(C));
        for (int c = 0; c < C; ++c)
            rec[static_cast<size_t>(c)] = static_cast<double>(hits[static_cast<size_t>(c)]) /
                                          static_cast<double>(report.class_sizes[static_cast<size_t>(c)]);
        if (spec.name == "ensemble") {
            report.gap = report.a_nat - acc;
            report.has_gap = true;
        }
    }
    return report;
}

namespace {

// zero-gradient counts of grad_x CE at the given logit scaling
void zero_grad_ratios(const Scorer& scorer, const LabeledDataset& test, int threads,
                      double& ratio_all, double& ratio_correct) {
    const int64_t n = test.size();
    std::atomic<int64_t> zeros_all{0}, coords_all{0}, zeros_cor{0}, coords_cor{0};
    parallel_chunks(n, threads, [&](int64_t lo, int64_t hi) {
        const auto ids = iota_ids(lo, hi);
        const Array x = test.batch(ids);
        const auto y = test.batch_labels(ids);
        Tape t;
        Var xv = t.leaf(x, true);
        Var z = scorer.logits(t, xv);
        Var lsm = t.log_softmax(z, 1);
        Var loss = t.scale(t.sum_all(t.gather_rows(lsm, y)), -1.0);
        t.backward(loss);
        const auto& g = t.grad(xv.id);
        const auto pred = scorer.predict(x);
        const int64_t D = numel(x.shape) / x.shape[0];
        int64_t za = 0, ca = 0, zc = 0, cc = 0;
        for (size_t b = 0; b < ids.size(); ++b) {
            const bool correct = pred[b] == y[b];
            for (int64_t j = 0; j < D; ++j) {
                const double v = std::abs(g[b * static_cast<size_t>(D) + static_cast<size_t>(j)]);
                const bool zero = v < 1e-300;  // true f64 underflow
                ++ca;
                za += zero;
                if (correct) {
                    ++cc;
                    zc += zero;
                }
            }
        }
        zeros_all += za;
        coords_all += ca;
        zeros_cor += zc;
        coords_cor += cc;
    });
    ratio_all = coords_all > 0 ? static_cast<double>(zeros_all) / coords_all : 0.0;
    ratio_correct = coords_cor > 0 ? static_cast<double>(zeros_cor) / coords_cor : 0.0;
}

}  // namespace

KappaSweep kappa_sweep(const Network& net, const ClassStats& stats, const PostHocRule* rule,
                       const LabeledDataset& test, const std::vector<double>& grid,
                       const AttackBudget& pgd_budget, const AttackBudget& ensemble_budget,
                       uint64_t seed, int threads) {
    KappaSweep sweep;
    for (double kappa : grid) {
        Scorer scorer{&net, rule, &stats, std::pow(10.0, kappa)};
        std::vector<AttackSpec> attacks;
        attacks.push_back({"pgd", pgd_budget, PgdLoss::Ce});
        attacks.push_back({"ensemble", ensemble_budget, PgdLoss::Ce});
        const EvalReport rep = evaluate(scorer, test, attacks, seed, threads);
        KappaPoint pt;
        pt.kappa = kappa;
        pt.a_nat = rep.a_nat;
        pt.pgd_acc = rep.a_rob.at("pgd");
        pt.ensemble_acc = rep.a_rob.at("ensemble");
        zero_grad_ratios(scorer, test, threads, pt.zero_grad_ratio, pt.zero_grad_ratio_correct);
        sweep.points.push_back(pt);
    }
    return sweep;
}

FeatureNormStats feature_norm_stats(const Network& net, const ClassStats& stats,
                                    const PostHocRule* rule, const LabeledDataset& test,
                                    const AttackSpec& attack, uint64_t seed) {
    if (attack.name == "ensemble")
        throw std::invalid_argument("feature norm stats need a single attack, not the ensemble");
    Scorer scorer{&net, rule, &stats, 1.0};
    const int64_t n = test.size();
    std::vector<double> attacked, robust;

    auto feat_norms = [&](const Array& x) {
        Tape t;
        Var xv = t.leaf(x, false);
        Var input = xv;
        if (net.arch == Network::Arch::Mlp && x.shape.size() != 2)
            input = t.reshape(xv, {x.shape[0], static_cast<int>(numel(x.shape) / x.shape[0])});
        const Array f = net.features_const(t, input).val();
        const int B = f.shape[0], Fd = f.shape[1];
        std::vector<double> norms(static_cast<size_t>(B), 0.0);
        for (int b = 0; b < B; ++b) {
            double acc = 0.0;
            for (int j = 0; j < Fd; ++j) {
                const double v = f.v[static_cast<size_t>(b * Fd + j)];
                acc += v * v;
            }
            norms[static_cast<size_t>(b)] = std::sqrt(acc);
        }
        return norms;
    };

    for (int64_t lo = 0; lo < n; lo += kChunk) {
        const int64_t hi = std::min(n, lo + kChunk);
        const auto ids = iota_ids(lo, hi);
        const Array x = test.batch(ids);
        const auto y = test.batch_labels(ids);
        const auto pred = scorer.predict(x);

        PerturbResult res;
        if (attack.name == "fgsm") {
            res = fgsm(scorer, x, y, attack.budget);
        } else if (attack.name == "pgd") {
            PgdOptions opt;
            opt.loss = attack.pgd_loss;
            opt.random_init = attack.budget.random_init;
            opt.seed = derive_seed(seed, 0x706764ULL);
            opt.sample_indices = &ids;
            res = pgd_attack(scorer, x, y, attack.budget, opt);
        } else if (attack.name == "mim") {
            res = mim_attack(scorer, x, y, attack.budget);
        } else if (attack.name == "cw") {
            res = cw_linf(scorer, x, y, attack.budget, derive_seed(seed, 0x6377ULL), &ids);
        } else if (attack.name == "cw-l2") {
            res = cw_l2(scorer, x, y, attack.budget, attack.budget.cw_steps,
                        attack.budget.cw_lr);
        } else {
            throw std::invalid_argument("unknown attack name: " + attack.name);
        }

        const auto clean_norms = feat_norms(x);
        const auto adv_norms = feat_norms(res.x_adv);
        for (size_t i = 0; i < ids.size(); ++i) {
            if (pred[i] != y[i]) continue;  // only originally-correct samples
            if (clean_norms[i] == 0.0) continue;
            const double ratio = adv_norms[i] / clean_norms[i];
            (res.success[i] ? attacked : robust).push_back(ratio);
        }
    }

    double lo = 1.0, hi = 1.0;
    for (double v : attacked) lo = std::min(lo, v), hi = std::max(hi, v);
    for (double v : robust) lo = std::min(lo, v), hi = std::max(hi, v);
    FeatureNormStats out;
    out.attacked = summarize(std::move(attacked), lo, hi, 20);
    out.robust = summarize(std::move(robust), lo, hi, 20);
    return out;
}

std::vector<double> weight_norm_profile(const Network& net) {
    const int C = net.head_w.shape[0], d = net.head_w.shape[1];
    std::vector<double> norms(static_cast<size_t>(C), 0.0);
    for (int i = 0; i < C; ++i) {
        double acc = 0.0;
        for (int j = 0; j < d; ++j) {
            const double v = net.head_w.v[static_cast<size_t>(i * d + j)];
            acc += v * v;
        }
        norms[static_cast<size_t>(i)] = std::sqrt(acc);
    }
    return norms;
}

double direction_averaging_check(const Network& net, const Array& x, int y, double compression) {
    if (net.head_kind != Network::HeadKind::Linear)
        throw std::invalid_argument("direction averaging check expects a linear head");
    if (compression <= 0.0) throw std::invalid_argument("compression must be positive");
    // features of the single sample, taken as a constant point
    Array f0;
    {
        Tape t;
        Var xv = t.leaf(x, false);
        f0 = net.features_const(t, xv).val();
    }
    Tape t;
    Var f = t.leaf(f0, true);
    Var w = t.constant(net.head_w);
    Var z = t.matmul(f, w, false, true);
    Var bias = t.constant(Array::from({1, net.classes}, net.head_b.v));
    z = t.scale(t.add(z, t.broadcast_to(bias, z.shape())), 1.0 / compression);
    Var lsm = t.log_softmax(z, 1);
    Var loss = t.scale(t.sum_all(t.gather_rows(lsm, {y})), -1.0);
    t.backward(loss);
    const auto& g = t.grad(f.id);

    const int C = net.classes, d = net.feat_dim;
    std::vector<double> target(static_cast<size_t>(d), 0.0);
    for (int j = 0; j < d; ++j) {
        double mean = 0.0;
        for (int i = 0; i < C; ++i) mean += net.head_w.v[static_cast<size_t>(i * d + j)];
        mean /= C;
        target[static_cast<size_t>(j)] =
            (mean - net.head_w.v[static_cast<size_t>(y * d + j)]) / compression;
    }
    double num = 0.0, den = 0.0;
    for (int j = 0; j < d; ++j) {
        const double diff = g[static_cast<size_t>(j)] - target[static_cast<size_t>(j)];
        num += diff * diff;
        den += target[static_cast<size_t>(j)] * target[static_cast<size_t>(j)];
    }
    if (den == 0.0)
        throw DomainError("mean weight vector equals the label row; direction undefined");
    return std::sqrt(num / den);
}

double max_input_gradient(const Network& net, const ClassStats& stats, const Array& x,
                          const std::vector<int>& y, double amplification) {
    Scorer scorer{&net, nullptr, &stats, amplification};
    Tape t;
    Var xv = t.leaf(x, true);
    Var z = scorer.logits(t, xv);
    Var lsm = t.log_softmax(z, 1);
    Var loss = t.scale(t.sum_all(t.gather_rows(lsm, y)), -1.0);
    t.backward(loss);
    const auto& g = t.grad(xv.id);
    double mx = 0.0;
    for (double v : g) mx = std::max(mx, std::abs(v));
    return mx;
}

std::string eval_accuracy_csv(const EvalReport& report) {
    std::ostringstream os;
    os.precision(17);
    os << "name,accuracy,boundary_error\n";
    os << "clean," << report.a_nat << ",0\n";
    for (const auto& name : report.attack_names)
        os << name << "," << report.a_rob.at(name) << "," << report.r_bdy.at(name) << "\n";
    return os.str();
}

std::string eval_recall_csv(const EvalReport& report) {
    std::ostringstream os;
    os.precision(17);
    os << "class,count,clean";
    for (const auto& name : report.attack_names) os << "," << name;
    os << "\n";
    for (size_t c = 0; c < report.recall_clean.size(); ++c) {
        os << c << "," << report.class_sizes[c] << "," << report.recall_clean[c];
        for (const auto& name : report.attack_names)
            os << "," << report.recall_attack.at(name)[c];
        os << "\n";
    }
    return os.str();
}

std::string kappa_sweep_csv(const KappaSweep& sweep) {
    std::ostringstream os;
    os.precision(17);
    os << "kappa,a_nat,pgd_acc,ensemble_acc,zero_grad_ratio,zero_grad_ratio_correct\n";
    for (const auto& p : sweep.points)
        os << p.kappa << "," << p.a_nat << "," << p.pgd_acc << "," << p.ensemble_acc << ","
           << p.zero_grad_ratio << "," << p.zero_grad_ratio_correct << "\n";
    return os.str();
}

}  // namespace robal
