#include "robal/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace robal {

namespace {

using nlohmann::json;

std::vector<std::vector<int64_t>> epoch_batches(int64_t n, int batch, Rng& rng) {
    std::vector<int64_t> order(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    rng.shuffle(order);
    std::vector<std::vector<int64_t>> out;
    for (int64_t at = 0; at < n; at += batch) {
        const int64_t end = std::min(n, at + batch);
        out.emplace_back(order.begin() + at, order.begin() + end);
    }
    return out;
}

// Training loss over bound parameters. `f_clean` is consulted only by the
// KL regularizer of the robal objective.
Var train_loss_var(Tape& t, const Network& net, const Network::Bound& bound, Var f_adv,
                   const Var* f_clean, const std::vector<int>& labels, const ClassStats& stats,
                   const ATConfig& cfg, TrainLoss kind, const Array* robal_margins) {
    switch (kind) {
        case TrainLoss::Ce:
            return ce_loss(t, net.head_logits(t, f_adv, bound), labels);
        case TrainLoss::Ldam: {
            if (net.head_kind != Network::HeadKind::Linear)
                throw std::invalid_argument("class-aware margin expects a linear head");
            Var base = net.head_logits(t, f_adv, bound);
            Var z = table1_train_logits(t, Table1Method::ClassAwareMargin, base, stats, labels,
                                        cfg.hyper);
            return ce_loss(t, z, labels);
        }
        case TrainLoss::CosMargin: {
            Var cos = net.head_cos(t, f_adv, bound);
            Table1Hyper hyper = cfg.hyper;
            hyper.s = net.cos_s;
            Var z = table1_train_logits(t, Table1Method::CosineWithMargin, cos, stats, labels,
                                        hyper);
            return ce_loss(t, z, labels);
        }
        case TrainLoss::Cdt: {
            Var base = net.head_logits(t, f_adv, bound);
            Var z = table1_train_logits(t, Table1Method::ClassAwareTemperature, base, stats,
                                        labels, cfg.hyper);
            return ce_loss(t, z, labels);
        }
        case TrainLoss::La: {
            Var base = net.head_logits(t, f_adv, bound);
            Var z = table1_train_logits(t, Table1Method::ClassAwareBias, base, stats, labels,
                                        cfg.hyper);
            return ce_loss(t, z, labels);
        }
        case TrainLoss::Focal:
            return focal_bce_loss(t, net.head_logits(t, f_adv, bound), labels, cfg.focal_gamma);
        case TrainLoss::Cb: {
            std::vector<double> w(labels.size());
            for (size_t i = 0; i < labels.size(); ++i)
                w[i] = reweight_factor(ReweightMethod::ClassBalanced, stats, labels[i],
                                       cfg.cb_beta);
            return weighted_ce_loss(t, net.head_logits(t, f_adv, bound), labels, w);
        }
        case TrainLoss::Robal: {
            if (net.head_kind != Network::HeadKind::Cosine)
                throw std::invalid_argument("robal loss expects a cosine head");
            if (!robal_margins) throw std::invalid_argument("robal loss needs a margin matrix");
            Var cos_adv = net.head_cos(t, f_adv, bound);
            Var l1 = robal_loss_from_cos(t, cos_adv, net.cos_s, labels, *robal_margins);
            if (cfg.alpha == 0.0 || !f_clean) return l1;
            // KL over the raw cosine outputs; see robal_total_loss
            Var cos_clean = net.head_cos(t, *f_clean, bound);
            Var kl = kl_divergence(t, cos_adv, cos_clean);
            return t.add(l1, t.scale(kl, cfg.alpha));
        }
    }
    throw std::invalid_argument("unknown training loss");
}

Array inner_maximize(const TrainState& st, const Array& x0, const std::vector<int>& y,
                     const ATConfig& cfg, TrainLoss inner_kind, const Array* robal_margins,
                     uint64_t init_seed) {
    std::vector<double> lo(x0.v.size()), hi(x0.v.size());
    for (size_t i = 0; i < x0.v.size(); ++i) {
        lo[i] = std::max(0.0, x0.v[i] - cfg.epsilon);
        hi[i] = std::min(1.0, x0.v[i] + cfg.epsilon);
    }
    Array x = x0;
    if (cfg.pgd_random_init) {
        Rng rng(init_seed);
        for (size_t i = 0; i < x.v.size(); ++i)
            x.v[i] = std::min(std::max(x0.v[i] + rng.uniform(-cfg.epsilon, cfg.epsilon), lo[i]),
                              hi[i]);
    }
    for (int step = 0; step < cfg.pgd_steps; ++step) {
        Tape t;
        auto bound = st.net.bind(t, false, false);
        Var xl = t.leaf(x, true);
        Var f = st.net.features(t, xl, bound);
        Var loss = train_loss_var(t, st.net, bound, f, nullptr, y, st.stats, cfg, inner_kind,
                                  robal_margins);
        t.backward(loss);
        const auto& g = t.grad(xl.id);
        for (size_t i = 0; i < x.v.size(); ++i) {
            const double s = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
            x.v[i] = std::min(std::max(x.v[i] + cfg.pgd_eta * s, lo[i]), hi[i]);
        }
    }
    return x;
}

double clean_accuracy(const TrainState& st, const LabeledDataset& data) {
    Scorer scorer{&st.net, nullptr, &st.stats, 1.0};
    int64_t correct = 0;
    const int64_t chunk = 512;
    for (int64_t at = 0; at < data.size(); at += chunk) {
        std::vector<int64_t> idx;
        for (int64_t i = at; i < std::min(data.size(), at + chunk); ++i) idx.push_back(i);
        const auto pred = scorer.predict(data.batch(idx));
        const auto y = data.batch_labels(idx);
        for (size_t i = 0; i < y.size(); ++i)
            if (pred[i] == y[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

void append_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void append_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
    const uint8_t* p;
    size_t n;
    size_t off = 0;
    void need(size_t k, const char* what) {
        if (off + k > n)
            throw TruncatedError(std::string("truncated checkpoint reading ") + what);
    }
    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[off + i]) << (8 * i);
        off += 4;
        return v;
    }
    uint64_t u64(const char* what) {
        need(8, what);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[off + i]) << (8 * i);
        off += 8;
        return v;
    }
    std::string str(const char* what) {
        const uint32_t len = u32(what);
        need(len, what);
        std::string s(reinterpret_cast<const char*>(p + off), len);
        off += len;
        return s;
    }
};

}  // namespace

void OptimState::init_for(const std::vector<ParamRef>& params) {
    velocity.clear();
    for (const auto& p : params) velocity.push_back(Array::zeros(p.array->shape));
}

void sgd_step(const std::vector<ParamRef>& params, const std::vector<Array>& grads,
              OptimState& state) {
    if (params.size() != grads.size() || params.size() != state.velocity.size())
        throw ShapeError("sgd_step: parameter, gradient and velocity counts differ");
    for (size_t p = 0; p < params.size(); ++p) {
        Array& w = *params[p].array;
        const Array& g = grads[p];
        Array& v = state.velocity[p];
        if (g.shape != w.shape || v.shape != w.shape)
            throw ShapeError("sgd_step: shape mismatch for " + params[p].name);
        const double wd = params[p].weight_decay ? state.weight_decay : 0.0;
        for (size_t i = 0; i < w.v.size(); ++i) {
            v.v[i] = state.momentum * v.v[i] + (g.v[i] + wd * w.v[i]);
            w.v[i] -= state.lr * v.v[i];
        }
    }
}

double lr_at(int epoch, const LrSchedule& schedule) {
    if (epoch < 0) throw std::invalid_argument("epoch must be >= 0");
    double lr = schedule.base;
    for (int b : schedule.boundaries)
        if (epoch >= b) lr /= schedule.factor;
    return lr;
}

TrainLoss train_loss_from_name(const std::string& name) {
    if (name == "ce") return TrainLoss::Ce;
    if (name == "ldam") return TrainLoss::Ldam;
    if (name == "cos-margin") return TrainLoss::CosMargin;
    if (name == "cdt") return TrainLoss::Cdt;
    if (name == "la") return TrainLoss::La;
    if (name == "focal") return TrainLoss::Focal;
    if (name == "cb") return TrainLoss::Cb;
    if (name == "robal") return TrainLoss::Robal;
    throw std::invalid_argument("unknown training loss: " + name);
}

std::string train_loss_name(TrainLoss loss) {
    switch (loss) {
        case TrainLoss::Ce: return "ce";
        case TrainLoss::Ldam: return "ldam";
        case TrainLoss::CosMargin: return "cos-margin";
        case TrainLoss::Cdt: return "cdt";
        case TrainLoss::La: return "la";
        case TrainLoss::Focal: return "focal";
        case TrainLoss::Cb: return "cb";
        case TrainLoss::Robal: return "robal";
    }
    return "ce";
}

LossMode loss_mode_from_name(const std::string& name) {
    if (name == "inner") return LossMode::Inner;
    if (name == "outer") return LossMode::Outer;
    if (name == "both") return LossMode::Both;
    throw std::invalid_argument("unknown loss mode: " + name);
}

void ATConfig::validate() const {
    if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
    if (batch < 1) throw std::invalid_argument("batch must be >= 1");
    if (epsilon < 0.0) throw std::invalid_argument("epsilon must be >= 0");
    if (epsilon > 0.0 && pgd_steps < 1)
        throw std::invalid_argument("inner maximization needs pgd_steps >= 1");
    if (epsilon > 0.0 && pgd_eta <= 0.0)
        throw std::invalid_argument("inner maximization needs pgd_eta > 0");
    if (alpha < 0.0) throw std::invalid_argument("alpha must be >= 0");
    if (!(cb_beta >= 0.0 && cb_beta < 1.0))
        throw std::invalid_argument("cb_beta must lie in [0,1)");
}

TrainState TrainState::make(Network net, const ClassStats& stats) {
    TrainState st;
    st.net = std::move(net);
    st.stats = stats;
    st.tde_ema = Array::zeros({st.net.feat_dim});
    return st;
}

std::pair<TrainLoss, TrainLoss> resolve_losses(const ATConfig& cfg) {
    TrainLoss outer_kind = cfg.method;
    TrainLoss inner_kind = cfg.method;
    if (cfg.mode == LossMode::Inner) outer_kind = TrainLoss::Ce;
    if (cfg.mode == LossMode::Outer) inner_kind = TrainLoss::Ce;
    if (cfg.method == TrainLoss::Robal) {
        outer_kind = TrainLoss::Robal;
        inner_kind = TrainLoss::Ce;
    }
    return {inner_kind, outer_kind};
}

Array adversarial_batch(const TrainState& state, const Array& x, const std::vector<int>& y,
                        const ATConfig& cfg, TrainLoss inner_kind, uint64_t init_seed) {
    Array margins;
    const Array* margins_ptr = nullptr;
    if (inner_kind == TrainLoss::Robal) {
        margins = robal_margin_matrix(cfg.margins, state.stats, state.net.cos_s);
        margins_ptr = &margins;
    }
    return inner_maximize(state, x, y, cfg, inner_kind, margins_ptr, init_seed);
}

EpochStats at_epoch(TrainState& st, const LabeledDataset& data, const ATConfig& cfg) {
    cfg.validate();
    auto params = st.net.params();
    if (st.optim.velocity.empty()) st.optim.init_for(params);
    st.optim.lr = lr_at(st.epoch, cfg.schedule);
    st.optim.momentum = cfg.momentum;
    st.optim.weight_decay = cfg.weight_decay;

    const auto [inner_kind, outer_kind] = resolve_losses(cfg);

    Array margins;
    const Array* margins_ptr = nullptr;
    if (outer_kind == TrainLoss::Robal || inner_kind == TrainLoss::Robal) {
        margins = robal_margin_matrix(cfg.margins, st.stats, st.net.cos_s);
        margins_ptr = &margins;
    }

    std::vector<std::vector<int64_t>> batches;
    if (cfg.resample) {
        ClassAwareSampler sampler(data, derive_seed(cfg.seed, 0x5253ULL,
                                                    static_cast<uint64_t>(st.epoch)));
        const int64_t n_batches = (data.size() + cfg.batch - 1) / cfg.batch;
        for (int64_t i = 0; i < n_batches; ++i) batches.push_back(sampler.next(cfg.batch));
    } else {
        Rng shuffle_rng(derive_seed(cfg.seed, 0x53484655ULL, static_cast<uint64_t>(st.epoch)));
        batches = epoch_batches(data.size(), cfg.batch, shuffle_rng);
    }

    double loss_sum = 0.0;
    int64_t batch_count = 0;
    const bool needs_clean = outer_kind == TrainLoss::Robal && cfg.alpha > 0.0;

    for (size_t bi = 0; bi < batches.size(); ++bi) {
        const Array x0 = data.batch(batches[bi]);
        const std::vector<int> y = data.batch_labels(batches[bi]);

        Array x_adv = x0;
        if (cfg.epsilon > 0.0) {
            const uint64_t init_seed = derive_seed(cfg.seed, 0x41494e49ULL,
                                                   static_cast<uint64_t>(st.epoch),
                                                   static_cast<uint64_t>(bi));
            x_adv = inner_maximize(st, x0, y, cfg, inner_kind, margins_ptr, init_seed);
        }

        Tape t;
        auto bound = st.net.bind(t, true, true);
        Var xa = t.leaf(x_adv, false);
        Var f_adv = st.net.features(t, xa, bound);
        Var f_clean;
        if (needs_clean) {
            Var xc = t.leaf(x0, false);
            f_clean = st.net.features(t, xc, bound);
        }
        Var loss = train_loss_var(t, st.net, bound, f_adv, needs_clean ? &f_clean : nullptr, y,
                                  st.stats, cfg, outer_kind, margins_ptr);
        const double lv = loss.scalar();
        if (!std::isfinite(lv))
            throw TrainDivergence("non-finite loss at epoch " + std::to_string(st.epoch) +
                                  " batch " + std::to_string(bi));
        loss_sum += lv;
        ++batch_count;
        t.backward(loss);
        std::vector<Array> grads;
        grads.reserve(params.size());
        for (const auto& v : bound.vars) grads.push_back(t.grad_array(v.id));
        sgd_step(params, grads, st.optim);

        // TDE direction: running mean of normalized training features
        const Array& fv = f_adv.val();
        const int B = fv.shape[0], Fd = fv.shape[1];
        std::vector<double> mean(static_cast<size_t>(Fd), 0.0);
        for (int b = 0; b < B; ++b) {
            double norm = 0.0;
            for (int j = 0; j < Fd; ++j) {
                const double v = fv.v[static_cast<size_t>(b * Fd + j)];
                norm += v * v;
            }
            norm = std::sqrt(norm);
            if (norm == 0.0) continue;
            for (int j = 0; j < Fd; ++j)
                mean[static_cast<size_t>(j)] += fv.v[static_cast<size_t>(b * Fd + j)] / norm;
        }
        for (int j = 0; j < Fd; ++j) {
            mean[static_cast<size_t>(j)] /= B;
            st.tde_ema.v[static_cast<size_t>(j)] =
                0.9 * st.tde_ema.v[static_cast<size_t>(j)] + 0.1 * mean[static_cast<size_t>(j)];
        }
    }

    EpochStats stats;
    stats.epoch = st.epoch;
    stats.lr = st.optim.lr;
    stats.mean_loss = batch_count > 0 ? loss_sum / static_cast<double>(batch_count) : 0.0;
    stats.clean_train_acc = clean_accuracy(st, data);
    ++st.epoch;
    return stats;
}

FinetuneMethod finetune_from_name(const std::string& name) {
    if (name == "resample") return FinetuneMethod::Resample;
    if (name == "reweight") return FinetuneMethod::Reweight;
    if (name == "lws") return FinetuneMethod::Lws;
    throw std::invalid_argument("unknown finetune method: " + name);
}

EpochStats finetune_one_epoch(TrainState& st, const LabeledDataset& data, FinetuneMethod method,
                              const ATConfig& cfg) {
    cfg.validate();
    if (method == FinetuneMethod::Lws && st.net.lws_scales.v.empty())
        st.net.lws_scales = Array::full({st.net.classes}, 1.0);

    // only the declared subset of parameters may move
    auto all = st.net.params();
    std::vector<ParamRef> subset;
    for (auto& p : all) {
        if (method == FinetuneMethod::Lws) {
            if (p.name == "head.lws_s") subset.push_back(p);
        } else if (p.head && p.name != "head.lws_s") {
            subset.push_back(p);
        }
    }
    OptimState optim;
    optim.lr = lr_at(0, cfg.schedule);
    optim.momentum = cfg.momentum;
    optim.weight_decay = cfg.weight_decay;
    optim.init_for(subset);

    std::vector<std::vector<int64_t>> batches;
    if (method == FinetuneMethod::Resample) {
        ClassAwareSampler sampler(data, derive_seed(cfg.seed, 0x4654ULL));
        const int64_t n_batches = (data.size() + cfg.batch - 1) / cfg.batch;
        for (int64_t i = 0; i < n_batches; ++i) batches.push_back(sampler.next(cfg.batch));
    } else {
        Rng shuffle_rng(derive_seed(cfg.seed, 0x4654ULL));
        batches = epoch_batches(data.size(), cfg.batch, shuffle_rng);
    }

    double loss_sum = 0.0;
    for (const auto& idx : batches) {
        const Array x0 = data.batch(idx);
        const std::vector<int> y = data.batch_labels(idx);
        Tape t;
        const bool head_grad = method != FinetuneMethod::Lws;
        auto bound = st.net.bind(t, false, head_grad);
        Var x = t.leaf(x0, false);
        Var f = st.net.features(t, x, bound);
        Var loss;
        std::vector<Var> grad_vars;
        if (method == FinetuneMethod::Lws) {
            // h_i = s_i W_i . f with W frozen
            Var w = t.constant(st.net.head_w);
            Var base = t.matmul(f, w, false, true);
            Var s = t.leaf(st.net.lws_scales, true);
            Var z = t.mul(base, t.broadcast_to(t.reshape(s, {1, st.net.classes}), base.shape()));
            loss = ce_loss(t, z, y);
            grad_vars = {s};
        } else {
            Var z = st.net.head_logits(t, f, bound);
            if (method == FinetuneMethod::Reweight) {
                std::vector<double> w(y.size());
                for (size_t i = 0; i < y.size(); ++i)
                    w[i] = reweight_factor(ReweightMethod::ClassBalanced, st.stats, y[i],
                                           cfg.cb_beta);
                loss = weighted_ce_loss(t, z, y, w);
            } else {
                loss = ce_loss(t, z, y);
            }
            const int base = st.net.backbone_param_count();
            for (size_t i = 0; i < subset.size(); ++i)
                grad_vars.push_back(bound.vars[static_cast<size_t>(base) + i]);
        }
        const double lv = loss.scalar();
        if (!std::isfinite(lv)) throw TrainDivergence("non-finite loss during fine-tuning");
        loss_sum += lv;
        t.backward(loss);
        std::vector<Array> grads;
        for (const auto& v : grad_vars) grads.push_back(t.grad_array(v.id));
        sgd_step(subset, grads, optim);
    }

    EpochStats stats;
    stats.epoch = st.epoch;
    stats.lr = optim.lr;
    stats.mean_loss = batches.empty() ? 0.0 : loss_sum / static_cast<double>(batches.size());
    stats.clean_train_acc = clean_accuracy(st, data);
    return stats;
}

Checkpoint make_checkpoint(const TrainState& st, uint64_t seed) {
    Checkpoint ckpt;
    json desc;
    desc["format"] = "robal-checkpoint";
    desc["arch"] = st.net.arch_name();
    desc["input_shape"] = st.net.input_shape;
    desc["hidden"] = st.net.hidden;
    desc["feature_dim"] = st.net.feat_dim;
    desc["classes"] = st.net.classes;
    desc["head"] = {{"kind", st.net.head_name()},
                    {"s", st.net.cos_s},
                    {"gamma", st.net.cos_gamma}};
    desc["epoch"] = st.epoch;
    desc["seed"] = seed;
    ckpt.descriptor = desc.dump();

    auto self = const_cast<TrainState&>(st);
    for (const auto& p : self.net.params()) ckpt.arrays.emplace_back(p.name, *p.array);
    Array counts = Array::zeros({static_cast<int>(st.stats.counts.size())});
    for (size_t i = 0; i < st.stats.counts.size(); ++i)
        counts.v[i] = static_cast<double>(st.stats.counts[i]);
    ckpt.arrays.emplace_back("stats.class_counts", std::move(counts));
    ckpt.arrays.emplace_back("tde.ema", st.tde_ema);
    return ckpt;
}

TrainState state_from_checkpoint(const Checkpoint& ckpt) {
    json desc = json::parse(ckpt.descriptor);
    if (desc.value("format", "") != "robal-checkpoint")
        throw BadFieldError("unrecognized checkpoint descriptor");
    const std::string arch = desc.at("arch").get<std::string>();
    const Shape input_shape = desc.at("input_shape").get<Shape>();
    const int hidden = desc.at("hidden").get<int>();
    const int feat = desc.at("feature_dim").get<int>();
    const int classes = desc.at("classes").get<int>();
    const std::string head_kind = desc.at("head").at("kind").get<std::string>();
    const double s = desc.at("head").at("s").get<double>();
    const double gamma = desc.at("head").at("gamma").get<double>();
    const auto kind = head_kind == "cosine" ? Network::HeadKind::Cosine
                                            : Network::HeadKind::Linear;
    Network net = arch == "conv"
                      ? Network::make_conv(input_shape, feat, classes, kind, s, gamma, 0)
                      : Network::make_mlp(input_shape.at(0), hidden, feat, classes, kind, s,
                                          gamma, 0);

    auto find = [&](const std::string& name) -> const Array* {
        for (const auto& kv : ckpt.arrays)
            if (kv.first == name) return &kv.second;
        return nullptr;
    };
    if (find("head.lws_s")) net.lws_scales = Array::full({classes}, 1.0);
    for (const auto& p : net.params()) {
        const Array* a = find(p.name);
        if (!a) throw BadFieldError("checkpoint is missing array " + p.name);
        if (a->shape != p.array->shape)
            throw BadFieldError("checkpoint shape mismatch for " + p.name + ": stored " +
                                shape_str(a->shape) + " expected " + shape_str(p.array->shape));
        *p.array = *a;
    }
    const Array* counts = find("stats.class_counts");
    if (!counts) throw BadFieldError("checkpoint is missing class counts");
    std::vector<int64_t> c(counts->v.size());
    for (size_t i = 0; i < c.size(); ++i) c[i] = std::llround(counts->v[i]);
    TrainState st = TrainState::make(std::move(net), ClassStats::from_counts(c));
    const Array* tde = find("tde.ema");
    if (tde) st.tde_ema = *tde;
    st.epoch = desc.value("epoch", 0);
    return st;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::string buf;
    buf.append("RBCK");
    append_u32(buf, 1);
    append_u32(buf, static_cast<uint32_t>(ckpt.descriptor.size()));
    buf.append(ckpt.descriptor);
    append_u32(buf, static_cast<uint32_t>(ckpt.arrays.size()));
    for (const auto& [name, a] : ckpt.arrays) {
        append_u32(buf, static_cast<uint32_t>(name.size()));
        buf.append(name);
        append_u32(buf, static_cast<uint32_t>(a.shape.size()));
        for (int d : a.shape) append_u64(buf, static_cast<uint64_t>(d));
        for (double v : a.v) append_u64(buf, std::bit_cast<uint64_t>(v));
    }
    append_u64(buf, static_cast<uint64_t>(buf.size()));
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw IoError("write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    Reader r{reinterpret_cast<const uint8_t*>(buf.data()), buf.size()};
    if (buf.size() < 4 || std::memcmp(buf.data(), "RBCK", 4) != 0)
        throw BadMagicError("bad magic in " + path);
    r.off = 4;
    const uint32_t version = r.u32("version");
    if (version != 1)
        throw BadVersionError("unsupported checkpoint version " + std::to_string(version));
    Checkpoint ckpt;
    ckpt.descriptor = r.str("descriptor");
    const uint32_t count = r.u32("array count");
    for (uint32_t i = 0; i < count; ++i) {
        const std::string name = r.str("array name");
        const uint32_t rank = r.u32("rank");
        Shape shape;
        int64_t n = 1;
        for (uint32_t d = 0; d < rank; ++d) {
            const uint64_t e = r.u64("extent");
            if (e == 0 || e > (1ULL << 32)) throw BadFieldError("bad extent in " + name);
            shape.push_back(static_cast<int>(e));
            n *= static_cast<int64_t>(e);
        }
        Array a = Array::zeros(shape);
        for (int64_t j = 0; j < n; ++j)
            a.v[static_cast<size_t>(j)] = std::bit_cast<double>(r.u64("values"));
        ckpt.arrays.emplace_back(name, std::move(a));
    }
    const size_t before = r.off;
    const uint64_t checksum = r.u64("checksum");
    if (checksum != before)
        throw BadFieldError("checkpoint length checksum mismatch: stored " +
                            std::to_string(checksum) + " actual " + std::to_string(before));
    return ckpt;
}

}  // namespace robal
