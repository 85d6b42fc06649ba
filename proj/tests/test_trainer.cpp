#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdio>
#include <fstream>

#include "doctest.h"
#include "robal/run.hpp"
#include "robal/trainer.hpp"

using namespace robal;

namespace {

LabeledDataset toy_lt(int seed = 1) {
    return synth_gaussians(4, 6, 0.08, {60, 30, 12, 6}, static_cast<uint64_t>(seed));
}

TrainState fresh_state(const LabeledDataset& data, Network::HeadKind kind, uint64_t seed,
                       double s = 10.0, double gamma = 0.0) {
    Network net = Network::make_mlp(static_cast<int>(data.sample_shape[0]), 24, 8, data.C, kind,
                                    s, gamma, seed);
    return TrainState::make(std::move(net), ClassStats::from_counts(data.class_counts));
}

ATConfig quick_cfg(uint64_t seed, double epsilon = 0.0) {
    ATConfig cfg;
    cfg.method = TrainLoss::Ce;
    cfg.epochs = 1;
    cfg.batch = 16;
    cfg.schedule = {0.05, {}, 10.0};
    cfg.pgd_steps = 3;
    cfg.pgd_eta = 2.0 / 255.0;
    cfg.epsilon = epsilon;
    cfg.seed = seed;
    return cfg;
}

bool same_params(TrainState& a, TrainState& b) {
    auto pa = a.net.params();
    auto pb = b.net.params();
    if (pa.size() != pb.size()) return false;
    for (size_t i = 0; i < pa.size(); ++i)
        if (pa[i].array->v != pb[i].array->v) return false;
    return true;
}

}  // namespace

TEST_CASE("sgd step: frozen rate, plain descent, quadratic recurrence") {
    Array p = Array::from({2}, {1.0, -2.0});
    std::vector<ParamRef> params = {{"p", &p, true, false}};
    OptimState st;
    st.init_for(params);

    SUBCASE("lr = 0 leaves parameters unchanged") {
        st.lr = 0.0;
        sgd_step(params, {Array::from({2}, {3.0, 4.0})}, st);
        CHECK(p.v == std::vector<double>{1.0, -2.0});
    }
    SUBCASE("no momentum, no decay: p - lr g") {
        st.lr = 0.1;
        st.momentum = 0.0;
        st.weight_decay = 0.0;
        sgd_step(params, {Array::from({2}, {3.0, 4.0})}, st);
        CHECK(p.v[0] == doctest::Approx(1.0 - 0.3).epsilon(1e-15));
        CHECK(p.v[1] == doctest::Approx(-2.0 - 0.4).epsilon(1e-15));
    }
    SUBCASE("two steps on a 1-D quadratic match the hand recurrence") {
        // f(w) = 0.5 a w^2, grad = a w; v <- m v + (g + wd w); w <- w - lr v
        Array w = Array::from({1}, {2.0});
        std::vector<ParamRef> ps = {{"w", &w, true, false}};
        OptimState o;
        o.init_for(ps);
        o.lr = 0.1;
        o.momentum = 0.9;
        o.weight_decay = 0.01;
        const double a = 3.0;
        double wr = 2.0, vr = 0.0;
        for (int i = 0; i < 2; ++i) {
            sgd_step(ps, {Array::from({1}, {a * w.v[0]})}, o);
            vr = 0.9 * vr + (a * wr + 0.01 * wr);
            wr = wr - 0.1 * vr;
        }
        CHECK(w.v[0] == doctest::Approx(wr).epsilon(1e-15));
    }
    SUBCASE("decay-exempt parameters see no decay pull at zero gradient") {
        Array s = Array::from({1}, {1.0});
        std::vector<ParamRef> ps = {{"s", &s, /*weight_decay=*/false, true}};
        OptimState o;
        o.init_for(ps);
        o.lr = 0.1;
        o.weight_decay = 0.5;
        sgd_step(ps, {Array::from({1}, {0.0})}, o);
        CHECK(s.v[0] == 1.0);
    }
    SUBCASE("shape mismatch is rejected") {
        st.lr = 0.1;
        CHECK_THROWS_AS(sgd_step(params, {Array::from({3}, {1.0, 2.0, 3.0})}, st), ShapeError);
    }
}

TEST_CASE("lr schedule") {
    LrSchedule paper{0.1, {60, 75}, 10.0};
    CHECK(lr_at(0, paper) == doctest::Approx(0.1));
    CHECK(lr_at(59, paper) == doctest::Approx(0.1));
    CHECK(lr_at(60, paper) == doctest::Approx(0.01));
    CHECK(lr_at(75, paper) == doctest::Approx(0.001));
    CHECK(lr_at(79, paper) == doctest::Approx(0.001));

    LrSchedule flat{0.05, {}, 10.0};
    CHECK(lr_at(100, flat) == doctest::Approx(0.05));

    LrSchedule decayed{0.1, {0}, 10.0};
    CHECK(lr_at(0, decayed) == doctest::Approx(0.01));
}

TEST_CASE("substitution-mode resolution") {
    ATConfig cfg;
    cfg.method = TrainLoss::Cb;
    cfg.mode = LossMode::Outer;
    CHECK(resolve_losses(cfg) == std::pair{TrainLoss::Ce, TrainLoss::Cb});
    cfg.mode = LossMode::Inner;
    CHECK(resolve_losses(cfg) == std::pair{TrainLoss::Cb, TrainLoss::Ce});
    cfg.mode = LossMode::Both;
    CHECK(resolve_losses(cfg) == std::pair{TrainLoss::Cb, TrainLoss::Cb});
    cfg.method = TrainLoss::Robal;
    CHECK(resolve_losses(cfg) == std::pair{TrainLoss::Ce, TrainLoss::Robal});
}

TEST_CASE("mode=outer produces the same adversarial batch as plain CE") {
    auto data = toy_lt();
    auto state = fresh_state(data, Network::HeadKind::Linear, 3);
    std::vector<int64_t> idx = {0, 5, 60, 100};
    const Array x = data.batch(idx);
    const auto y = data.batch_labels(idx);

    // class-aware bias reweights the non-label classes against each other,
    // so it can turn the gradient sign pattern; transforms that only touch
    // the label logit (margins, per-sample weights) cannot
    ATConfig outer = quick_cfg(9, 8.0 / 255.0);
    outer.method = TrainLoss::La;
    outer.mode = LossMode::Outer;
    outer.hyper.tau = 4.0;
    ATConfig plain = quick_cfg(9, 8.0 / 255.0);
    const auto adv_outer =
        adversarial_batch(state, x, y, outer, resolve_losses(outer).first, 1234);
    const auto adv_plain =
        adversarial_batch(state, x, y, plain, resolve_losses(plain).first, 1234);
    CHECK(adv_outer.v == adv_plain.v);

    // with mode=inner the weighted loss changes the perturbation
    ATConfig inner = outer;
    inner.mode = LossMode::Inner;
    const auto adv_inner =
        adversarial_batch(state, x, y, inner, resolve_losses(inner).first, 1234);
    CHECK(adv_inner.v != adv_plain.v);
}

TEST_CASE("training is deterministic: same seed and config, bit-identical parameters") {
    auto data = toy_lt();
    auto s1 = fresh_state(data, Network::HeadKind::Linear, 7);
    auto s2 = fresh_state(data, Network::HeadKind::Linear, 7);
    ATConfig cfg = quick_cfg(21, 8.0 / 255.0);
    cfg.epochs = 2;
    for (int e = 0; e < 2; ++e) {
        at_epoch(s1, data, cfg);
        at_epoch(s2, data, cfg);
    }
    CHECK(same_params(s1, s2));

    // a different seed must actually change the trajectory
    auto s3 = fresh_state(data, Network::HeadKind::Linear, 7);
    ATConfig other = cfg;
    other.seed = 22;
    at_epoch(s3, data, other);
    CHECK(!same_params(s1, s3));
}

TEST_CASE("epsilon = 0 reproduces a hand-rolled standard epoch bit for bit") {
    auto data = toy_lt();
    auto state = fresh_state(data, Network::HeadKind::Linear, 5);
    auto reference = fresh_state(data, Network::HeadKind::Linear, 5);
    ATConfig cfg = quick_cfg(11, 0.0);

    at_epoch(state, data, cfg);

    // reference: plain shuffled CE epoch over the same streams
    {
        auto params = reference.net.params();
        OptimState optim;
        optim.init_for(params);
        optim.lr = cfg.schedule.base;
        optim.momentum = cfg.momentum;
        optim.weight_decay = cfg.weight_decay;
        Rng shuffle_rng(derive_seed(cfg.seed, 0x53484655ULL, 0));
        std::vector<int64_t> order(static_cast<size_t>(data.size()));
        for (int64_t i = 0; i < data.size(); ++i) order[static_cast<size_t>(i)] = i;
        shuffle_rng.shuffle(order);
        for (int64_t at = 0; at < data.size(); at += cfg.batch) {
            const int64_t end = std::min<int64_t>(data.size(), at + cfg.batch);
            std::vector<int64_t> idx(order.begin() + at, order.begin() + end);
            Tape t;
            auto bound = reference.net.bind(t, true, true);
            Var x = t.leaf(data.batch(idx), false);
            Var f = reference.net.features(t, x, bound);
            Var loss = ce_loss(t, reference.net.head_logits(t, f, bound),
                               data.batch_labels(idx));
            t.backward(loss);
            std::vector<Array> grads;
            for (const auto& v : bound.vars) grads.push_back(t.grad_array(v.id));
            sgd_step(params, grads, optim);
        }
    }
    auto pa = state.net.params();
    auto pb = reference.net.params();
    for (size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].array->v == pb[i].array->v);
}

TEST_CASE("standard training separates the gaussian benchmark") {
    // spread 0.05, C = 10, dim = 16, 200 per class: a linear head fit by the
    // trainer reaches at least 99% train accuracy
    auto data = synth_gaussians(10, 16, 0.05, std::vector<int64_t>(10, 200), 31);
    Network net = Network::make_mlp(16, 32, 12, 10, Network::HeadKind::Linear, 10.0, 0.0, 31);
    auto state = TrainState::make(std::move(net), ClassStats::from_counts(data.class_counts));
    ATConfig cfg = quick_cfg(31, 0.0);
    cfg.batch = 64;
    cfg.schedule = {0.05, {20}, 10.0};
    cfg.epochs = 25;
    EpochStats last;
    double prev_loss = 1e300;
    int decreases = 0;
    for (int e = 0; e < cfg.epochs; ++e) {
        last = at_epoch(state, data, cfg);
        if (last.mean_loss < prev_loss) ++decreases;
        prev_loss = last.mean_loss;
    }
    CHECK(last.clean_train_acc >= 0.99);
    CHECK(decreases >= cfg.epochs / 2);
}

TEST_CASE("adversarial training on the cosine head with the robal objective runs") {
    auto data = toy_lt();
    auto state = fresh_state(data, Network::HeadKind::Cosine, 13, 10.0, 1.0 / 16.0);
    ATConfig cfg = quick_cfg(13, 8.0 / 255.0);
    cfg.method = TrainLoss::Robal;
    cfg.margins = {0.1, 1.5, 0.3};
    cfg.alpha = 6.0;
    cfg.epochs = 2;
    for (int e = 0; e < cfg.epochs; ++e) {
        auto stats = at_epoch(state, data, cfg);
        CHECK(std::isfinite(stats.mean_loss));
    }
}

TEST_CASE("divergence aborts with a diagnostic") {
    auto data = toy_lt();
    auto state = fresh_state(data, Network::HeadKind::Linear, 17);
    ATConfig cfg = quick_cfg(17, 0.0);
    cfg.schedule = {1e18, {}, 10.0};  // guaranteed blow-up
    cfg.epochs = 1;
    bool diverged = false;
    try {
        for (int e = 0; e < 6; ++e) at_epoch(state, data, cfg);
    } catch (const TrainDivergence& e) {
        diverged = true;
        CHECK(std::string(e.what()).find("epoch") != std::string::npos);
    }
    CHECK(diverged);
}

TEST_CASE("fine-tuning freezes the declared parameter subsets") {
    auto data = toy_lt();
    auto state = fresh_state(data, Network::HeadKind::Linear, 19);
    ATConfig cfg = quick_cfg(19, 0.0);
    at_epoch(state, data, cfg);

    SUBCASE("resample and reweight touch only the head") {
        for (const auto method : {FinetuneMethod::Resample, FinetuneMethod::Reweight}) {
            auto before_w0 = state.net.w0.v;
            auto before_w2 = state.net.w2.v;
            auto before_head = state.net.head_w.v;
            finetune_one_epoch(state, data, method, cfg);
            CHECK(state.net.w0.v == before_w0);
            CHECK(state.net.w2.v == before_w2);
            CHECK(state.net.head_w.v != before_head);
        }
    }
    SUBCASE("lws touches only the scale vector") {
        auto before_head = state.net.head_w.v;
        auto before_b = state.net.head_b.v;
        finetune_one_epoch(state, data, FinetuneMethod::Lws, cfg);
        CHECK(state.net.head_w.v == before_head);
        CHECK(state.net.head_b.v == before_b);
        REQUIRE(state.net.lws_scales.v.size() == 4);
        CHECK(state.net.lws_scales.v != std::vector<double>(4, 1.0));
    }
}

TEST_CASE("lws on a balanced well-trained model stays near uniform") {
    auto data = synth_gaussians(4, 8, 0.05, std::vector<int64_t>(4, 80), 23);
    Network net = Network::make_mlp(8, 24, 8, 4, Network::HeadKind::Linear, 10.0, 0.0, 23);
    auto state = TrainState::make(std::move(net), ClassStats::from_counts(data.class_counts));
    ATConfig cfg = quick_cfg(23, 0.0);
    cfg.epochs = 15;
    cfg.schedule = {0.1, {12}, 10.0};
    for (int e = 0; e < cfg.epochs; ++e) at_epoch(state, data, cfg);
    ATConfig ft = cfg;
    ft.schedule = {0.01, {}, 10.0};
    finetune_one_epoch(state, data, FinetuneMethod::Lws, ft);
    for (double s : state.net.lws_scales.v) CHECK(std::abs(s - 1.0) <= 0.05);
}

TEST_CASE("resampling fine-tune raises tail recall on the LT toy model (3 seeds)") {
    int improved = 0;
    for (uint64_t seed : {101ULL, 102ULL, 103ULL}) {
        auto data = synth_gaussians(4, 6, 0.22, {240, 80, 24, 10},
                                    seed);  // strongly imbalanced, overlapping
        auto test = synth_gaussians(4, 6, 0.22, std::vector<int64_t>(4, 60),
                                    derive_seed(seed, 999));
        auto state = fresh_state(data, Network::HeadKind::Linear, seed);
        ATConfig cfg = quick_cfg(seed, 0.0);
        cfg.epochs = 12;
        cfg.schedule = {0.1, {10}, 10.0};
        for (int e = 0; e < cfg.epochs; ++e) at_epoch(state, data, cfg);

        auto tail_recall = [&](TrainState& st) {
            Scorer scorer{&st.net, nullptr, &st.stats, 1.0};
            std::vector<int64_t> idx;
            for (int64_t i = 0; i < test.size(); ++i)
                if (test.labels[static_cast<size_t>(i)] == 3) idx.push_back(i);
            const auto pred = scorer.predict(test.batch(idx));
            int hit = 0;
            for (int p : pred) hit += p == 3;
            return static_cast<double>(hit) / static_cast<double>(idx.size());
        };
        const double before = tail_recall(state);
        ATConfig ft = cfg;
        ft.schedule = {0.02, {}, 10.0};
        finetune_one_epoch(state, data, FinetuneMethod::Resample, ft);
        const double after = tail_recall(state);
        if (after > before) ++improved;
    }
    CHECK(improved >= 2);
}

TEST_CASE("checkpoints round-trip bit-exactly") {
    auto data = toy_lt();
    auto state = fresh_state(data, Network::HeadKind::Cosine, 29, 10.0, 1.0 / 32.0);
    ATConfig cfg = quick_cfg(29, 8.0 / 255.0);
    cfg.method = TrainLoss::Robal;
    cfg.margins = {0.1, 1.2, 0.0};
    at_epoch(state, data, cfg);

    const std::string path = "/tmp/robal_test_ckpt.rbck";
    Checkpoint ckpt = make_checkpoint(state, 29);
    save_checkpoint(path, ckpt);
    Checkpoint loaded = load_checkpoint(path);
    CHECK(loaded.descriptor == ckpt.descriptor);
    REQUIRE(loaded.arrays.size() == ckpt.arrays.size());
    for (size_t i = 0; i < ckpt.arrays.size(); ++i) {
        CHECK(loaded.arrays[i].first == ckpt.arrays[i].first);
        CHECK(loaded.arrays[i].second.shape == ckpt.arrays[i].second.shape);
        CHECK(loaded.arrays[i].second.v == ckpt.arrays[i].second.v);
    }

    TrainState restored = state_from_checkpoint(loaded);
    CHECK(restored.epoch == state.epoch);
    CHECK(restored.net.cos_gamma == state.net.cos_gamma);
    CHECK(restored.stats.counts == state.stats.counts);
    CHECK(restored.tde_ema.v == state.tde_ema.v);
    auto pa = state.net.params();
    auto pb = restored.net.params();
    for (size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].array->v == pb[i].array->v);
    std::remove(path.c_str());
}

TEST_CASE("checkpoint error kinds") {
    const std::string path = "/tmp/robal_test_ckpt_bad.rbck";
    {
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        f << "NOPE";
    }
    CHECK_THROWS_AS(load_checkpoint(path), BadMagicError);
    {
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        f << "RBCK";
        const uint32_t v = 9;
        f.write(reinterpret_cast<const char*>(&v), 4);
    }
    CHECK_THROWS_AS(load_checkpoint(path), BadVersionError);
    {
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        f << "RBCK";
        const uint32_t v = 1;
        f.write(reinterpret_cast<const char*>(&v), 4);
        const uint32_t len = 100;  // descriptor longer than the file
        f.write(reinterpret_cast<const char*>(&len), 4);
    }
    CHECK_THROWS_AS(load_checkpoint(path), TruncatedError);

    // hand-written minimal checkpoint: descriptor + one 2-element array
    {
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        auto u32 = [&](uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); };
        auto u64 = [&](uint64_t v) { f.write(reinterpret_cast<const char*>(&v), 8); };
        f << "RBCK";
        u32(1);
        const std::string desc = "{}";
        u32(static_cast<uint32_t>(desc.size()));
        f << desc;
        u32(1);  // one array
        const std::string name = "w";
        u32(static_cast<uint32_t>(name.size()));
        f << name;
        u32(1);  // rank
        u64(2);  // extent
        const double vals[2] = {1.5, -2.5};
        f.write(reinterpret_cast<const char*>(vals), 16);
        const uint64_t total = 4 + 4 + 4 + 2 + 4 + 4 + 1 + 4 + 8 + 16;
        u64(total);
    }
    Checkpoint ck = load_checkpoint(path);
    CHECK(ck.descriptor == "{}");
    REQUIRE(ck.arrays.size() == 1);
    CHECK(ck.arrays[0].first == "w");
    CHECK(ck.arrays[0].second.shape == Shape{2});
    CHECK(ck.arrays[0].second.v == std::vector<double>{1.5, -2.5});

    // corrupt the trailing length checksum
    {
        std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
        f.seekp(-8, std::ios::end);
        const uint64_t wrong = 12345;
        f.write(reinterpret_cast<const char*>(&wrong), 8);
    }
    CHECK_THROWS_AS(load_checkpoint(path), BadFieldError);
    std::remove(path.c_str());
}
