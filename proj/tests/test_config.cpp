#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "robal/run.hpp"

using namespace robal;

TEST_CASE("config round trip: parse -> serialize -> parse is identity") {
    ExperimentConfig cfg = preset_config("robal-r");
    cfg.attacks.push_back([] {
        AttackConfig a;
        a.name = "cw";
        a.cw_kappa = 0.0;
        return a;
    }());
    const std::string text = cfg.to_json();
    ExperimentConfig again = ExperimentConfig::from_json(text);
    CHECK(cfg == again);
    CHECK(again.to_json() == text);
    CHECK(cfg.hash() == again.hash());
}

TEST_CASE("unknown keys are rejected at every level") {
    CHECK_THROWS_AS(ExperimentConfig::from_json(R"({"surprise": 1})"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json(R"({"dataset": {"clases": 10}})"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json(R"({"model": {"head": "cosine", "shape": 3}})"),
                    ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json(R"({"training": {"taub": 1.5}})"), ConfigError);
    CHECK_THROWS_AS(
        ExperimentConfig::from_json(R"({"attacks": [{"name": "pgd", "step": 20}]})"),
        ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json("not json"), ConfigError);
}

TEST_CASE("field validation") {
    CHECK_THROWS_AS(ExperimentConfig::from_json(R"({"dataset": {"ir": 0.5}})"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json(R"({"model": {"arch": "transformer"}})"),
                    ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json(R"({"training": {"method": "magic"}})"),
                    ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json(R"({"posthoc": {"rule": "unknown"}})"),
                    ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json(R"({"attacks": [{"name": "square"}]})"),
                    ConfigError);
    // robal training requires the cosine head
    CHECK_THROWS_AS(ExperimentConfig::from_json(
                        R"({"model": {"head": "linear"}, "training": {"method": "robal"}})"),
                    ConfigError);
}

TEST_CASE("presets carry the documented hyper-parameters") {
    const auto names = preset_names();
    CHECK(names.size() >= 15);
    for (const auto& name : names) {
        ExperimentConfig cfg = preset_config(name);
        // every preset round-trips through the strict parser
        CHECK(ExperimentConfig::from_json(cfg.to_json()) == cfg);
    }

    ExperimentConfig rn = preset_config("robal-n");
    CHECK(rn.training.method == "robal");
    CHECK(rn.training.m0 == 0.1);
    CHECK(rn.training.tau_b == 0.0);
    CHECK(rn.training.alpha == 6.0);
    CHECK(rn.model.s == 10.0);
    CHECK(rn.posthoc.rule == "robal-bias");
    CHECK(rn.posthoc.tau_p == 1.5);

    ExperimentConfig rr = preset_config("robal-r");
    CHECK(rr.training.tau_b - rr.training.tau_m == doctest::Approx(1.2));
    CHECK(rr.training.tau_m == 0.3);

    ExperimentConfig ldam = preset_config("ldam");
    CHECK(ldam.training.delta_max == 0.5);
    ExperimentConfig cm = preset_config("cos-margin");
    CHECK(cm.training.margin == 0.2);
    CHECK(cm.model.s == 10.0);
    ExperimentConfig vc = preset_config("vanilla-cos");
    CHECK(vc.model.s == 16.0);
    CHECK(vc.model.gamma == 0.0);
    ExperimentConfig cb = preset_config("cb");
    CHECK(cb.training.cb_beta == 0.9999);
    CHECK_THROWS_AS(preset_config("unheard-of"), ConfigError);
}

TEST_CASE("synth writes datasets the pipeline can reload; force is honored") {
    namespace fs = std::filesystem;
    const std::string dir = "/tmp/robal_test_synth";
    fs::remove_all(dir);
    ExperimentConfig cfg = preset_config("at-baseline");
    cfg.dataset.classes = 4;
    cfg.dataset.n_max = 30;
    cfg.dataset.ir = 5.0;
    cfg.dataset.dim = 5;
    cfg.dataset.test_per_class = 10;
    cfg.dataset.path = dir + "/data";
    cfg.out_dir = dir;
    RunContext ctx{dir, 1, false};
    CHECK(cmd_synth(cfg, ctx) == 0);
    CHECK(fs::exists(dir + "/data/train.rblt"));
    CHECK(fs::exists(dir + "/data/test.rblt"));
    CHECK(fs::exists(dir + "/manifest.json"));

    // overwrite without --force is an error, with --force it succeeds
    CHECK_THROWS_AS(cmd_synth(cfg, ctx), IoError);
    RunContext forced{dir, 1, true};
    CHECK(cmd_synth(cfg, forced) == 0);

    auto train = load_binary(dir + "/data/train.rblt");
    CHECK(train.C == 4);
    CHECK(train.class_counts == make_longtail_counts({4, 30, 5.0}));
    fs::remove_all(dir);
}

TEST_CASE("train/eval/report pipeline produces its artifacts") {
    namespace fs = std::filesystem;
    const std::string dir = "/tmp/robal_test_pipeline";
    fs::remove_all(dir);
    ExperimentConfig cfg = preset_config("at-baseline");
    cfg.dataset.classes = 4;
    cfg.dataset.n_max = 40;
    cfg.dataset.ir = 8.0;
    cfg.dataset.dim = 6;
    cfg.dataset.test_per_class = 15;
    cfg.model.hidden = 16;
    cfg.model.feature_dim = 8;
    cfg.training.epochs = 2;
    cfg.training.batch = 32;
    cfg.training.pgd_steps = 2;
    cfg.attacks = {[] {
        AttackConfig a;
        a.name = "pgd";
        a.steps = 3;
        return a;
    }()};
    cfg.out_dir = dir;
    RunContext ctx{dir, 1, true};
    REQUIRE(cmd_train(cfg, ctx) == 0);
    CHECK(fs::exists(dir + "/checkpoint.rbck"));
    CHECK(fs::exists(dir + "/events.jsonl"));
    REQUIRE(cmd_eval(cfg, ctx, dir + "/checkpoint.rbck") == 0);
    CHECK(fs::exists(dir + "/accuracies.csv"));
    CHECK(fs::exists(dir + "/recalls.csv"));
    REQUIRE(cmd_report(dir, ctx) == 0);
    CHECK(fs::exists(dir + "/report.md"));
    CHECK(fs::exists(dir + "/recall_bars.csv"));
    CHECK(fs::exists(dir + "/accuracy_grid.csv"));
    CHECK(fs::exists(dir + "/training_curve.csv"));

    // recall csv multiplied back by counts gives integer hit totals
    std::ifstream rec(dir + "/recall_bars.csv");
    std::string line;
    std::getline(rec, line);  // header
    while (std::getline(rec, line)) {
        const auto c1 = line.find(',');
        const auto c2 = line.find(',', c1 + 1);
        const auto c3 = line.find(',', c2 + 1);
        const double count = std::stod(line.substr(c1 + 1, c2 - c1 - 1));
        const double clean = std::stod(line.substr(c2 + 1, c3 - c2 - 1));
        const double hits = clean * count;
        CHECK(hits == doctest::Approx(std::round(hits)).epsilon(1e-9));
    }
    fs::remove_all(dir);
}

TEST_CASE("report on an empty directory warns but succeeds") {
    namespace fs = std::filesystem;
    const std::string dir = "/tmp/robal_test_empty_report";
    fs::remove_all(dir);
    fs::create_directories(dir);
    RunContext ctx{dir, 1, false};
    CHECK(cmd_report(dir, ctx) == 0);
    CHECK(fs::exists(dir + "/report.md"));
    fs::remove_all(dir);
}
