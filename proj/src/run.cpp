#include "robal/run.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>

#include "json.hpp"

namespace robal {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void append_event(const std::string& dir, const json& event) {
    std::ofstream f(dir + "/events.jsonl", std::ios::app);
    if (!f) throw IoError("cannot append to " + dir + "/events.jsonl");
    f << event.dump() << "\n";
}

void write_manifest(const ExperimentConfig& cfg, const RunContext& ctx,
                    const std::string& command) {
    json m;
    m["command"] = command;
    m["config"] = json::parse(cfg.to_json());
    m["config_hash"] = cfg.hash();
    m["seed"] = cfg.seed;
    m["threads"] = ctx.threads;
    m["version"] = "0.1.0";
    std::ofstream f(ctx.out_dir + "/manifest.json", std::ios::trunc);
    if (!f) throw IoError("cannot write manifest in " + ctx.out_dir);
    f << m.dump(2) << "\n";
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write " + path);
    f << text;
}

Network network_from_config(const ExperimentConfig& cfg, int in_dim, const Shape& sample_shape) {
    const auto kind = cfg.model.head == "cosine" ? Network::HeadKind::Cosine
                                                 : Network::HeadKind::Linear;
    if (cfg.model.arch == "conv")
        return Network::make_conv(sample_shape, cfg.model.feature_dim, cfg.dataset.classes, kind,
                                  cfg.model.s, cfg.model.gamma, cfg.seed);
    return Network::make_mlp(in_dim, cfg.model.hidden, cfg.model.feature_dim,
                             cfg.dataset.classes, kind, cfg.model.s, cfg.model.gamma, cfg.seed);
}

std::vector<AttackSpec> attack_specs(const ExperimentConfig& cfg) {
    std::vector<AttackSpec> specs;
    for (const auto& a : cfg.attacks) specs.push_back(a.spec());
    return specs;
}

json report_to_json(const EvalReport& rep) {
    json j;
    j["a_nat"] = rep.a_nat;
    j["a_rob"] = rep.a_rob;
    j["r_bdy"] = rep.r_bdy;
    j["recall_clean"] = rep.recall_clean;
    j["recall_attack"] = rep.recall_attack;
    j["class_sizes"] = rep.class_sizes;
    if (rep.has_gap) j["gap"] = rep.gap;
    return j;
}

}  // namespace

DataBundle build_datasets(const DatasetConfig& cfg) {
    DataBundle out;
    if (cfg.source == "file") {
        if (cfg.path.empty()) throw ConfigError("dataset.source=file needs dataset.path");
        out.train = load_binary(cfg.path + "/train.rblt");
        out.test = load_binary(cfg.path + "/test.rblt");
        return out;
    }
    ImbalanceProfile profile{cfg.classes, cfg.n_max, cfg.ir};
    std::vector<int64_t> counts;
    if (cfg.kind == "lt") {
        counts = make_longtail_counts(profile);
        out.train = synth_gaussians(cfg.classes, cfg.dim, cfg.spread, counts, cfg.seed);
    } else if (cfg.kind == "balanced") {
        counts.assign(static_cast<size_t>(cfg.classes), cfg.n_max);
        out.train = synth_gaussians(cfg.classes, cfg.dim, cfg.spread, counts, cfg.seed);
    } else {  // sml-bal: balanced subset matching the LT total
        const auto lt_counts = make_longtail_counts(profile);
        LabeledDataset lt =
            synth_gaussians(cfg.classes, cfg.dim, cfg.spread, lt_counts, cfg.seed);
        std::vector<int64_t> base_counts(static_cast<size_t>(cfg.classes), cfg.n_max);
        LabeledDataset base = synth_gaussians(cfg.classes, cfg.dim, cfg.spread, base_counts,
                                              derive_seed(cfg.seed, 0x62617365ULL));
        out.train = make_small_balanced(lt, base, cfg.seed);
    }
    // balanced test set by convention
    std::vector<int64_t> test_counts(static_cast<size_t>(cfg.classes), cfg.test_per_class);
    out.test = synth_gaussians(cfg.classes, cfg.dim, cfg.spread, test_counts,
                               derive_seed(cfg.seed, 0x74657374ULL));
    return out;
}

PostHocRule rule_from_config(const PosthocConfig& cfg, const TrainState& state) {
    PostHocRule rule;
    rule.kind = PostHocRule::kind_from_name(cfg.rule);
    rule.tau = cfg.tau;
    rule.alpha = cfg.alpha;
    rule.tau_p = cfg.tau_p;
    if (rule.kind == PostHocRule::Kind::Tde) rule.tde_direction = state.tde_ema;
    if (rule.kind == PostHocRule::Kind::Lws) {
        if (state.net.lws_scales.v.empty())
            throw ConfigError("lws rule needs a checkpoint with learned scales");
        rule.lws_scales = state.net.lws_scales;
    }
    return rule;
}

int cmd_synth(const ExperimentConfig& cfg, const RunContext& ctx) {
    fs::create_directories(ctx.out_dir);
    const std::string dir = cfg.dataset.path.empty() ? ctx.out_dir : cfg.dataset.path;
    fs::create_directories(dir);
    const std::string train_path = dir + "/train.rblt";
    const std::string test_path = dir + "/test.rblt";
    if (!ctx.force && (fs::exists(train_path) || fs::exists(test_path)))
        throw IoError("dataset files exist in " + dir + "; pass --force to overwrite");
    DatasetConfig synth_cfg = cfg.dataset;
    synth_cfg.source = "synth";
    DataBundle data = build_datasets(synth_cfg);
    save_binary(data.train, train_path);
    save_binary(data.test, test_path);
    write_manifest(cfg, ctx, "synth");
    json counts = json::array();
    for (int64_t c : data.train.class_counts) counts.push_back(c);
    append_event(ctx.out_dir, json{{"event", "synth"},
                                   {"train", train_path},
                                   {"test", test_path},
                                   {"class_counts", counts}});
    std::cout << "class counts:";
    for (int64_t c : data.train.class_counts) std::cout << " " << c;
    std::cout << "\n";
    return 0;
}

int cmd_train(const ExperimentConfig& cfg, const RunContext& ctx) {
    fs::create_directories(ctx.out_dir);
    write_manifest(cfg, ctx, "train");
    DataBundle data = build_datasets(cfg.dataset);

    Network net = network_from_config(cfg, data.train.sample_shape.back(),
                                      data.train.sample_shape);
    TrainState state = TrainState::make(std::move(net),
                                        ClassStats::from_counts(data.train.class_counts));
    ATConfig at = cfg.training.at_config(cfg.seed);
    const std::string ckpt_path = ctx.out_dir + "/checkpoint.rbck";

    Checkpoint last_good = make_checkpoint(state, cfg.seed);
    try {
        for (int e = 0; e < at.epochs; ++e) {
            EpochStats stats = at_epoch(state, data.train, at);
            append_event(ctx.out_dir, json{{"event", "epoch"},
                                           {"epoch", stats.epoch},
                                           {"lr", stats.lr},
                                           {"loss", stats.mean_loss},
                                           {"clean_train_acc", stats.clean_train_acc}});
            last_good = make_checkpoint(state, cfg.seed);
        }
        if (cfg.training.finetune != "none") {
            EpochStats stats = finetune_one_epoch(state, data.train,
                                                  finetune_from_name(cfg.training.finetune), at);
            append_event(ctx.out_dir, json{{"event", "finetune"},
                                           {"method", cfg.training.finetune},
                                           {"loss", stats.mean_loss},
                                           {"clean_train_acc", stats.clean_train_acc}});
            last_good = make_checkpoint(state, cfg.seed);
        }
    } catch (const TrainDivergence& e) {
        save_checkpoint(ckpt_path, last_good);
        append_event(ctx.out_dir, json{{"event", "divergence"}, {"what", e.what()}});
        std::cerr << "training diverged: " << e.what() << " (last good checkpoint kept)\n";
        return 1;
    }
    save_checkpoint(ckpt_path, make_checkpoint(state, cfg.seed));
    append_event(ctx.out_dir, json{{"event", "checkpoint"}, {"path", ckpt_path}});
    return 0;
}

int cmd_finetune(const ExperimentConfig& cfg, const RunContext& ctx,
                 const std::string& checkpoint_path) {
    fs::create_directories(ctx.out_dir);
    write_manifest(cfg, ctx, "finetune");
    if (cfg.training.finetune == "none")
        throw ConfigError("finetune command needs training.finetune set");
    DataBundle data = build_datasets(cfg.dataset);
    TrainState state = state_from_checkpoint(load_checkpoint(checkpoint_path));
    ATConfig at = cfg.training.at_config(cfg.seed);
    EpochStats stats =
        finetune_one_epoch(state, data.train, finetune_from_name(cfg.training.finetune), at);
    append_event(ctx.out_dir, json{{"event", "finetune"},
                                   {"method", cfg.training.finetune},
                                   {"loss", stats.mean_loss},
                                   {"clean_train_acc", stats.clean_train_acc}});
    const std::string out_path = ctx.out_dir + "/checkpoint.rbck";
    save_checkpoint(out_path, make_checkpoint(state, cfg.seed));
    append_event(ctx.out_dir, json{{"event", "checkpoint"}, {"path", out_path}});
    return 0;
}

int cmd_eval(const ExperimentConfig& cfg, const RunContext& ctx,
             const std::string& checkpoint_path) {
    fs::create_directories(ctx.out_dir);
    write_manifest(cfg, ctx, "eval");
    DataBundle data = build_datasets(cfg.dataset);
    TrainState state = state_from_checkpoint(load_checkpoint(checkpoint_path));
    if (state.net.classes != data.test.C)
        throw ConfigError("checkpoint classes do not match the dataset");
    if (numel(state.net.input_shape) != data.test.sample_size())
        throw ConfigError("checkpoint input shape does not match the dataset");

    PostHocRule rule = rule_from_config(cfg.posthoc, state);
    Scorer scorer{&state.net, &rule, &state.stats, 1.0};
    EvalReport rep = evaluate(scorer, data.test, attack_specs(cfg), cfg.seed, ctx.threads);

    write_text(ctx.out_dir + "/accuracies.csv", eval_accuracy_csv(rep));
    write_text(ctx.out_dir + "/recalls.csv", eval_recall_csv(rep));
    json ev = report_to_json(rep);
    ev["event"] = "eval";
    append_event(ctx.out_dir, ev);

    // norm-scaling diagnostic against the first single attack, when any
    for (const auto& a : cfg.attacks) {
        if (a.name == "ensemble") continue;
        FeatureNormStats ns = feature_norm_stats(state.net, state.stats, &rule, data.test,
                                                 a.spec(), cfg.seed);
        json e;
        e["event"] = "norm_stats";
        e["attack"] = a.name;
        e["attacked"] = {{"count", ns.attacked.count}, {"mean", ns.attacked.mean},
                         {"p10", ns.attacked.p10},     {"p50", ns.attacked.p50},
                         {"p90", ns.attacked.p90},     {"bins", ns.attacked.bins}};
        e["robust"] = {{"count", ns.robust.count}, {"mean", ns.robust.mean},
                       {"p10", ns.robust.p10},     {"p50", ns.robust.p50},
                       {"p90", ns.robust.p90},     {"bins", ns.robust.bins}};
        e["bin_lo"] = ns.attacked.bin_lo;
        e["bin_hi"] = ns.attacked.bin_hi;
        append_event(ctx.out_dir, e);
        break;
    }

    std::cout << "A_nat " << rep.a_nat;
    for (const auto& name : rep.attack_names)
        std::cout << "  " << name << " " << rep.a_rob.at(name);
    std::cout << "\n";
    return 0;
}

std::vector<double> default_sweep_values(const std::string& axis) {
    if (axis == "kappa") {
        std::vector<double> grid;
        for (double k = -4.0; k <= 4.0 + 1e-9; k += 0.5) grid.push_back(k);
        return grid;
    }
    if (axis == "m0") return {0.0, 0.1, 0.2, 0.3};
    if (axis == "tau-diff") return {0.0, 0.5, 1.0, 1.5};
    if (axis == "tau_m") return {-0.3, 0.0, 0.3, 0.6};
    if (axis == "tau_p") return {0.0, 0.5, 1.0, 1.5, 2.0};
    if (axis == "ir") return {100.0, 50.0, 20.0, 10.0};
    if (axis == "pgd-steps") return {1.0, 3.0, 5.0, 7.0, 10.0};
    throw ConfigError("unknown sweep axis: " + axis);
}

int cmd_sweep(const ExperimentConfig& cfg, const RunContext& ctx, const std::string& axis,
              std::vector<double> values, const std::string& checkpoint_path) {
    fs::create_directories(ctx.out_dir);
    write_manifest(cfg, ctx, "sweep");
    if (values.empty()) values = default_sweep_values(axis);

    if (axis == "kappa") {
        if (checkpoint_path.empty()) throw ConfigError("kappa sweep needs --checkpoint");
        DataBundle data = build_datasets(cfg.dataset);
        TrainState state = state_from_checkpoint(load_checkpoint(checkpoint_path));
        PostHocRule rule = rule_from_config(cfg.posthoc, state);
        AttackBudget pgd_budget, ens_budget;
        ens_budget.steps = 50;
        ens_budget.restarts = 5;
        for (const auto& a : cfg.attacks) {
            if (a.name == "pgd") pgd_budget = a.spec().budget;
            if (a.name == "ensemble") ens_budget = a.spec().budget;
        }
        KappaSweep sweep = kappa_sweep(state.net, state.stats, &rule, data.test, values,
                                       pgd_budget, ens_budget, cfg.seed, ctx.threads);
        write_text(ctx.out_dir + "/sweep.csv", kappa_sweep_csv(sweep));
        for (const auto& p : sweep.points)
            append_event(ctx.out_dir,
                         json{{"event", "kappa_point"},
                              {"kappa", p.kappa},
                              {"a_nat", p.a_nat},
                              {"pgd_acc", p.pgd_acc},
                              {"ensemble_acc", p.ensemble_acc},
                              {"zero_grad_ratio", p.zero_grad_ratio},
                              {"zero_grad_ratio_correct", p.zero_grad_ratio_correct}});
        return 0;
    }

    if (axis == "tau_p") {
        if (checkpoint_path.empty()) throw ConfigError("tau_p sweep needs --checkpoint");
        DataBundle data = build_datasets(cfg.dataset);
        TrainState state = state_from_checkpoint(load_checkpoint(checkpoint_path));
        std::ostringstream csv;
        csv.precision(17);
        csv << "tau_p,clean";
        for (const auto& a : cfg.attacks) csv << "," << a.name;
        csv << ",gap\n";
        for (double v : values) {
            PosthocConfig pc = cfg.posthoc;
            pc.rule = "robal-bias";
            pc.tau_p = v;
            PostHocRule rule = rule_from_config(pc, state);
            Scorer scorer{&state.net, &rule, &state.stats, 1.0};
            EvalReport rep = evaluate(scorer, data.test, attack_specs(cfg), cfg.seed,
                                      ctx.threads);
            csv << v << "," << rep.a_nat;
            for (const auto& a : cfg.attacks) csv << "," << rep.a_rob.at(a.name);
            csv << "," << (rep.has_gap ? rep.gap : 0.0) << "\n";
            json ev = report_to_json(rep);
            ev["event"] = "sweep_point";
            ev["axis"] = axis;
            ev["value"] = v;
            append_event(ctx.out_dir, ev);
        }
        write_text(ctx.out_dir + "/sweep.csv", csv.str());
        return 0;
    }

    // training-stage axes retrain per value
    std::ostringstream csv;
    csv.precision(17);
    csv << axis << ",clean";
    for (const auto& a : cfg.attacks) csv << "," << a.name;
    csv << ",gap\n";
    bool any_failed = false;
    for (double v : values) {
        ExperimentConfig point = cfg;
        if (axis == "m0") {
            point.training.m0 = v;
        } else if (axis == "tau-diff") {
            point.training.tau_b = point.training.tau_m + v;
        } else if (axis == "tau_m") {
            const double diff = point.training.tau_b - point.training.tau_m;
            point.training.tau_m = v;
            point.training.tau_b = v + diff;
        } else if (axis == "ir") {
            point.dataset.ir = v;
        } else if (axis == "pgd-steps") {
            point.training.pgd_steps = static_cast<int>(v);
        } else {
            throw ConfigError("unknown sweep axis: " + axis);
        }
        std::ostringstream sub;
        sub << ctx.out_dir << "/" << axis << "-" << v;
        RunContext sub_ctx{sub.str(), ctx.threads, true};
        try {
            if (cmd_train(point, sub_ctx) != 0) throw std::runtime_error("training diverged");
            point.out_dir = sub.str();
            if (cmd_eval(point, sub_ctx, sub.str() + "/checkpoint.rbck") != 0)
                throw std::runtime_error("evaluation failed");
            // read back the consolidated numbers from the sub-run events
            std::ifstream f(sub.str() + "/events.jsonl");
            std::string line, last_eval;
            while (std::getline(f, line))
                if (line.find("\"event\":\"eval\"") != std::string::npos) last_eval = line;
            if (last_eval.empty()) throw std::runtime_error("no eval event recorded");
            json rep = json::parse(last_eval);
            csv << v << "," << rep.at("a_nat").get<double>();
            for (const auto& a : cfg.attacks)
                csv << "," << rep.at("a_rob").at(a.name).get<double>();
            csv << "," << (rep.contains("gap") ? rep.at("gap").get<double>() : 0.0) << "\n";
            json ev = rep;
            ev["event"] = "sweep_point";
            ev["axis"] = axis;
            ev["value"] = v;
            append_event(ctx.out_dir, ev);
        } catch (const std::exception& e) {
            any_failed = true;
            append_event(ctx.out_dir, json{{"event", "sweep_error"},
                                           {"axis", axis},
                                           {"value", v},
                                           {"what", e.what()}});
            std::cerr << "sweep point " << axis << "=" << v << " failed: " << e.what() << "\n";
        }
    }
    write_text(ctx.out_dir + "/sweep.csv", csv.str());
    return any_failed ? 1 : 0;
}

int cmd_report(const std::string& run_dir, const RunContext& ctx) {
    const std::string events_path = run_dir + "/events.jsonl";
    std::ifstream f(events_path);
    std::ostringstream md;
    md << "# Run report\n\n";
    if (!f) {
        std::cerr << "warning: no events found in " << run_dir << "\n";
        write_text(run_dir + "/report.md", md.str() + "No events recorded.\n");
        return 0;
    }
    std::vector<json> evals, kappa_points, norm_stats, sweep_points, epochs;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        json e;
        try {
            e = json::parse(line);
        } catch (const json::exception&) {
            continue;
        }
        const std::string kind = e.value("event", "");
        if (kind == "eval") evals.push_back(e);
        else if (kind == "kappa_point") kappa_points.push_back(e);
        else if (kind == "norm_stats") norm_stats.push_back(e);
        else if (kind == "sweep_point") sweep_points.push_back(e);
        else if (kind == "epoch") epochs.push_back(e);
    }
    (void)ctx;

    if (!epochs.empty()) {
        std::ostringstream csv;
        csv << "epoch,lr,loss,clean_train_acc\n";
        for (const auto& e : epochs)
            csv << e.value("epoch", 0) << "," << e.value("lr", 0.0) << ","
                << e.value("loss", 0.0) << "," << e.value("clean_train_acc", 0.0) << "\n";
        write_text(run_dir + "/training_curve.csv", csv.str());
        md << "Training: " << epochs.size() << " epochs, final clean train accuracy "
           << epochs.back().value("clean_train_acc", 0.0) << ".\n\n";
    }

    if (!evals.empty()) {
        const json& rep = evals.back();
        std::ostringstream rec;
        rec << "class,count,clean";
        std::vector<std::string> names;
        if (rep.contains("a_rob"))
            for (const auto& kv : rep.at("a_rob").items()) names.push_back(kv.key());
        for (const auto& n : names) rec << "," << n;
        rec << "\n";
        const auto& recalls = rep.at("recall_clean");
        const auto& sizes = rep.at("class_sizes");
        for (size_t c = 0; c < recalls.size(); ++c) {
            rec << c << "," << sizes[c].get<int64_t>() << "," << recalls[c].get<double>();
            for (const auto& n : names)
                rec << "," << rep.at("recall_attack").at(n)[c].get<double>();
            rec << "\n";
        }
        write_text(run_dir + "/recall_bars.csv", rec.str());

        std::ostringstream grid;
        grid << "run,clean";
        for (const auto& n : names) grid << "," << n;
        grid << ",gap\n";
        for (size_t i = 0; i < evals.size(); ++i) {
            grid << i << "," << evals[i].value("a_nat", 0.0);
            for (const auto& n : names) grid << "," << evals[i].at("a_rob").at(n).get<double>();
            grid << "," << (evals[i].contains("gap") ? evals[i].at("gap").get<double>() : 0.0)
                 << "\n";
        }
        write_text(run_dir + "/accuracy_grid.csv", grid.str());
        md << "## Accuracy\n\nA_nat " << rep.value("a_nat", 0.0) << "\n\n";
        for (const auto& n : names)
            md << "- " << n << ": " << rep.at("a_rob").at(n).get<double>() << " (boundary error "
               << rep.at("r_bdy").at(n).get<double>() << ")\n";
        md << "\n";
    } else {
        std::cerr << "warning: no eval events in " << run_dir << "\n";
    }

    if (!kappa_points.empty()) {
        std::ostringstream csv;
        csv << "kappa,a_nat,pgd_acc,ensemble_acc,zero_grad_ratio,zero_grad_ratio_correct\n";
        for (const auto& p : kappa_points)
            csv << p.value("kappa", 0.0) << "," << p.value("a_nat", 0.0) << ","
                << p.value("pgd_acc", 0.0) << "," << p.value("ensemble_acc", 0.0) << ","
                << p.value("zero_grad_ratio", 0.0) << ","
                << p.value("zero_grad_ratio_correct", 0.0) << "\n";
        write_text(run_dir + "/kappa_curves.csv", csv.str());
        md << "Logit-scaling sweep over " << kappa_points.size() << " points written to "
           << "kappa_curves.csv.\n\n";
    }

    if (!norm_stats.empty()) {
        const json& ns = norm_stats.back();
        std::ostringstream csv;
        csv << "bin,attacked,robust\n";
        const auto& ab = ns.at("attacked").at("bins");
        const auto& rb = ns.at("robust").at("bins");
        for (size_t i = 0; i < ab.size(); ++i)
            csv << i << "," << ab[i].get<int64_t>() << "," << rb[i].get<int64_t>() << "\n";
        write_text(run_dir + "/norm_hist.csv", csv.str());
        md << "Feature-norm scaling histogram written to norm_hist.csv (attacked mean "
           << ns.at("attacked").value("mean", 0.0) << ", robust mean "
           << ns.at("robust").value("mean", 0.0) << ").\n\n";
    }

    if (!sweep_points.empty()) {
        md << "Sweep: " << sweep_points.size() << " points (see sweep.csv).\n\n";
    }

    write_text(run_dir + "/report.md", md.str());
    return 0;
}

}  // namespace robal
