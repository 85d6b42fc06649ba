#include "robal/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace robal {

namespace {

using nlohmann::json;

// Strict accessor: every key must be known, every fetched key must have
// the right type. Unknown keys are configuration typos and are rejected.
struct StrictObj {
    const json& j;
    std::string where;
    std::set<std::string> allowed;

    StrictObj(const json& obj, std::string location) : j(obj), where(std::move(location)) {
        if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
    }

    template <typename T>
    T get(const std::string& key, T fallback) {
        allowed.insert(key);
        if (!j.contains(key)) return fallback;
        try {
            return j.at(key).get<T>();
        } catch (const json::exception&) {
            throw ConfigError(where + "." + key + " has the wrong type");
        }
    }

    bool has(const std::string& key) {
        allowed.insert(key);
        return j.contains(key);
    }

    void finish() const {
        for (const auto& kv : j.items())
            if (!allowed.count(kv.key()))
                throw ConfigError("unknown key '" + kv.key() + "' in " + where);
    }
};

json dataset_to_json(const DatasetConfig& d) {
    return json{{"source", d.source},   {"path", d.path},
                {"kind", d.kind},       {"classes", d.classes},
                {"n_max", d.n_max},     {"ir", d.ir},
                {"dim", d.dim},         {"spread", d.spread},
                {"test_per_class", d.test_per_class}, {"seed", d.seed}};
}

DatasetConfig dataset_from_json(const json& j) {
    StrictObj o(j, "dataset");
    DatasetConfig d;
    d.source = o.get<std::string>("source", d.source);
    d.path = o.get<std::string>("path", d.path);
    d.kind = o.get<std::string>("kind", d.kind);
    d.classes = o.get<int>("classes", d.classes);
    d.n_max = o.get<int64_t>("n_max", d.n_max);
    d.ir = o.get<double>("ir", d.ir);
    d.dim = o.get<int>("dim", d.dim);
    d.spread = o.get<double>("spread", d.spread);
    d.test_per_class = o.get<int64_t>("test_per_class", d.test_per_class);
    d.seed = o.get<uint64_t>("seed", d.seed);
    o.finish();
    if (d.source != "synth" && d.source != "file")
        throw ConfigError("dataset.source must be synth or file");
    if (d.kind != "lt" && d.kind != "balanced" && d.kind != "sml-bal")
        throw ConfigError("dataset.kind must be lt, balanced or sml-bal");
    if (d.ir < 1.0) throw ConfigError("dataset.ir must be >= 1");
    if (d.classes < 2) throw ConfigError("dataset.classes must be >= 2");
    return d;
}

json model_to_json(const ModelConfig& m) {
    return json{{"arch", m.arch}, {"hidden", m.hidden}, {"feature_dim", m.feature_dim},
                {"head", m.head}, {"s", m.s},           {"gamma", m.gamma}};
}

ModelConfig model_from_json(const json& j) {
    StrictObj o(j, "model");
    ModelConfig m;
    m.arch = o.get<std::string>("arch", m.arch);
    m.hidden = o.get<int>("hidden", m.hidden);
    m.feature_dim = o.get<int>("feature_dim", m.feature_dim);
    m.head = o.get<std::string>("head", m.head);
    m.s = o.get<double>("s", m.s);
    m.gamma = o.get<double>("gamma", m.gamma);
    o.finish();
    if (m.arch != "mlp" && m.arch != "conv") throw ConfigError("model.arch must be mlp or conv");
    if (m.head != "linear" && m.head != "cosine")
        throw ConfigError("model.head must be linear or cosine");
    if (m.s <= 0.0) throw ConfigError("model.s must be > 0");
    if (m.gamma < 0.0) throw ConfigError("model.gamma must be >= 0");
    return m;
}

json training_to_json(const TrainingConfig& t) {
    return json{{"method", t.method},
                {"mode", t.mode},
                {"epochs", t.epochs},
                {"batch", t.batch},
                {"lr", t.lr},
                {"lr_decay_epochs", t.lr_decay_epochs},
                {"lr_decay_factor", t.lr_decay_factor},
                {"momentum", t.momentum},
                {"weight_decay", t.weight_decay},
                {"pgd_steps", t.pgd_steps},
                {"pgd_eta", t.pgd_eta},
                {"epsilon", t.epsilon},
                {"pgd_random_init", t.pgd_random_init},
                {"alpha", t.alpha},
                {"m0", t.m0},
                {"tau_b", t.tau_b},
                {"tau_m", t.tau_m},
                {"delta_max", t.delta_max},
                {"margin", t.margin},
                {"cdt_gamma", t.cdt_gamma},
                {"la_tau", t.la_tau},
                {"cb_beta", t.cb_beta},
                {"focal_gamma", t.focal_gamma},
                {"finetune", t.finetune}};
}

TrainingConfig training_from_json(const json& j) {
    StrictObj o(j, "training");
    TrainingConfig t;
    t.method = o.get<std::string>("method", t.method);
    t.mode = o.get<std::string>("mode", t.mode);
    t.epochs = o.get<int>("epochs", t.epochs);
    t.batch = o.get<int>("batch", t.batch);
    t.lr = o.get<double>("lr", t.lr);
    t.lr_decay_epochs = o.get<std::vector<int>>("lr_decay_epochs", t.lr_decay_epochs);
    t.lr_decay_factor = o.get<double>("lr_decay_factor", t.lr_decay_factor);
    t.momentum = o.get<double>("momentum", t.momentum);
    t.weight_decay = o.get<double>("weight_decay", t.weight_decay);
    t.pgd_steps = o.get<int>("pgd_steps", t.pgd_steps);
    t.pgd_eta = o.get<double>("pgd_eta", t.pgd_eta);
    t.epsilon = o.get<double>("epsilon", t.epsilon);
    t.pgd_random_init = o.get<bool>("pgd_random_init", t.pgd_random_init);
    t.alpha = o.get<double>("alpha", t.alpha);
    t.m0 = o.get<double>("m0", t.m0);
    t.tau_b = o.get<double>("tau_b", t.tau_b);
    t.tau_m = o.get<double>("tau_m", t.tau_m);
    t.delta_max = o.get<double>("delta_max", t.delta_max);
    t.margin = o.get<double>("margin", t.margin);
    t.cdt_gamma = o.get<double>("cdt_gamma", t.cdt_gamma);
    t.la_tau = o.get<double>("la_tau", t.la_tau);
    t.cb_beta = o.get<double>("cb_beta", t.cb_beta);
    t.focal_gamma = o.get<double>("focal_gamma", t.focal_gamma);
    t.finetune = o.get<std::string>("finetune", t.finetune);
    o.finish();
    try {
        if (t.method != "resample") train_loss_from_name(t.method);
        loss_mode_from_name(t.mode);
        if (t.finetune != "none") finetune_from_name(t.finetune);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    if (t.m0 < 0.0) throw ConfigError("training.m0 must be >= 0");
    if (t.epochs < 0) throw ConfigError("training.epochs must be >= 0");
    if (t.batch < 1) throw ConfigError("training.batch must be >= 1");
    if (t.epsilon < 0.0) throw ConfigError("training.epsilon must be >= 0");
    return t;
}

json posthoc_to_json(const PosthocConfig& p) {
    return json{{"rule", p.rule}, {"tau", p.tau}, {"alpha", p.alpha}, {"tau_p", p.tau_p}};
}

PosthocConfig posthoc_from_json(const json& j) {
    StrictObj o(j, "posthoc");
    PosthocConfig p;
    p.rule = o.get<std::string>("rule", p.rule);
    p.tau = o.get<double>("tau", p.tau);
    p.alpha = o.get<double>("alpha", p.alpha);
    p.tau_p = o.get<double>("tau_p", p.tau_p);
    o.finish();
    try {
        PostHocRule::kind_from_name(p.rule);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    return p;
}

json attack_to_json(const AttackConfig& a) {
    return json{{"name", a.name},       {"epsilon", a.epsilon},
                {"eta", a.eta},         {"steps", a.steps},
                {"restarts", a.restarts}, {"mu", a.mu},
                {"cw_c", a.cw_c},       {"cw_kappa", a.cw_kappa},
                {"cw_steps", a.cw_steps}, {"cw_lr", a.cw_lr},
                {"random_init", a.random_init}, {"loss", a.loss}};
}

AttackConfig attack_from_json(const json& j, size_t index) {
    StrictObj o(j, "attacks[" + std::to_string(index) + "]");
    AttackConfig a;
    a.name = o.get<std::string>("name", a.name);
    a.epsilon = o.get<double>("epsilon", a.epsilon);
    a.eta = o.get<double>("eta", a.eta);
    a.steps = o.get<int>("steps", a.steps);
    a.restarts = o.get<int>("restarts", a.restarts);
    a.mu = o.get<double>("mu", a.mu);
    a.cw_c = o.get<double>("cw_c", a.cw_c);
    a.cw_kappa = o.get<double>("cw_kappa", a.cw_kappa);
    a.cw_steps = o.get<int>("cw_steps", a.cw_steps);
    a.cw_lr = o.get<double>("cw_lr", a.cw_lr);
    a.random_init = o.get<bool>("random_init", a.random_init);
    a.loss = o.get<std::string>("loss", a.loss);
    o.finish();
    static const std::set<std::string> known = {"fgsm", "pgd", "mim", "cw", "cw-l2", "ensemble"};
    if (!known.count(a.name)) throw ConfigError("unknown attack name: " + a.name);
    try {
        pgd_loss_from_name(a.loss);
        a.spec().budget.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    return a;
}

}  // namespace

ATConfig TrainingConfig::at_config(uint64_t seed) const {
    ATConfig cfg;
    if (method == "resample") {
        cfg.method = TrainLoss::Ce;
        cfg.resample = true;
    } else {
        cfg.method = train_loss_from_name(method);
    }
    cfg.mode = loss_mode_from_name(mode);
    cfg.epochs = epochs;
    cfg.batch = batch;
    cfg.schedule = LrSchedule{lr, lr_decay_epochs, lr_decay_factor};
    cfg.momentum = momentum;
    cfg.weight_decay = weight_decay;
    cfg.pgd_steps = pgd_steps;
    cfg.pgd_eta = pgd_eta;
    cfg.epsilon = epsilon;
    cfg.pgd_random_init = pgd_random_init;
    cfg.alpha = alpha;
    cfg.margins = MarginSpec{m0, tau_b, tau_m};
    cfg.hyper.delta_max = delta_max;
    cfg.hyper.margin = margin;
    cfg.hyper.gamma = cdt_gamma;
    cfg.hyper.tau = la_tau;
    cfg.cb_beta = cb_beta;
    cfg.focal_gamma = focal_gamma;
    cfg.seed = seed;
    return cfg;
}

AttackSpec AttackConfig::spec() const {
    AttackSpec s;
    s.name = name;
    s.budget.epsilon = epsilon;
    s.budget.eta = eta;
    s.budget.steps = steps;
    s.budget.restarts = restarts;
    s.budget.mu = mu;
    s.budget.cw_c = cw_c;
    s.budget.cw_kappa = cw_kappa;
    s.budget.cw_steps = cw_steps;
    s.budget.cw_lr = cw_lr;
    s.budget.random_init = random_init;
    s.pgd_loss = pgd_loss_from_name(loss);
    return s;
}

std::string ExperimentConfig::to_json() const {
    json j;
    j["dataset"] = dataset_to_json(dataset);
    j["model"] = model_to_json(model);
    j["training"] = training_to_json(training);
    j["posthoc"] = posthoc_to_json(posthoc);
    json arr = json::array();
    for (const auto& a : attacks) arr.push_back(attack_to_json(a));
    j["attacks"] = arr;
    j["out_dir"] = out_dir;
    j["seed"] = seed;
    return j.dump(2);
}

ExperimentConfig ExperimentConfig::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    StrictObj o(j, "config");
    ExperimentConfig cfg;
    if (o.has("dataset")) cfg.dataset = dataset_from_json(j.at("dataset"));
    if (o.has("model")) cfg.model = model_from_json(j.at("model"));
    if (o.has("training")) cfg.training = training_from_json(j.at("training"));
    if (o.has("posthoc")) cfg.posthoc = posthoc_from_json(j.at("posthoc"));
    if (o.has("attacks")) {
        const auto& arr = j.at("attacks");
        if (!arr.is_array()) throw ConfigError("attacks must be an array");
        cfg.attacks.clear();
        for (size_t i = 0; i < arr.size(); ++i)
            cfg.attacks.push_back(attack_from_json(arr[i], i));
    }
    cfg.out_dir = o.get<std::string>("out_dir", cfg.out_dir);
    cfg.seed = o.get<uint64_t>("seed", cfg.seed);
    o.finish();
    if (cfg.training.method == "robal" && cfg.model.head != "cosine")
        throw ConfigError("robal training requires a cosine head");
    if (cfg.posthoc.rule == "robal-bias" && cfg.model.head != "cosine")
        throw ConfigError("robal-bias inference requires a cosine head");
    return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return from_json(ss.str());
}

void ExperimentConfig::save(const std::string& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f << to_json() << "\n";
}

std::string ExperimentConfig::hash() const {
    const std::string text = to_json();
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    std::ostringstream os;
    os << std::hex << h;
    return os.str();
}

bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) {
    return a.to_json() == b.to_json();
}

std::vector<std::string> preset_names() {
    return {"at-baseline", "vanilla-fc", "vanilla-cos", "ldam",       "cos-margin",
            "cdt-train",   "la-train",   "focal",       "resample",   "cb",
            "resample-ft", "reweight-ft", "lws-ft",     "cdt-post",   "tau-norm",
            "la-post",     "tde",        "robal-n",     "robal-r"};
}

ExperimentConfig preset_config(const std::string& name) {
    ExperimentConfig cfg;
    // the Gaussian-LT desk benchmark and the paper's attack constants
    cfg.dataset = DatasetConfig{};
    cfg.model.arch = "mlp";
    cfg.model.head = "linear";
    cfg.training.method = "ce";
    cfg.training.epochs = 30;
    cfg.training.lr_decay_epochs = {15, 18};
    cfg.attacks.clear();
    AttackConfig pgd;
    pgd.name = "pgd";
    AttackConfig ens;
    ens.name = "ensemble";
    ens.steps = 50;
    ens.restarts = 5;
    cfg.attacks = {pgd, ens};

    auto cosine = [&](double s, double gamma) {
        cfg.model.head = "cosine";
        cfg.model.s = s;
        cfg.model.gamma = gamma;
    };

    if (name == "at-baseline" || name == "vanilla-fc") {
        // linear head, CE on both stages
    } else if (name == "vanilla-cos") {
        cosine(16.0, 0.0);
    } else if (name == "ldam") {
        cfg.training.method = "ldam";
        cfg.training.delta_max = 0.5;
    } else if (name == "cos-margin") {
        cosine(10.0, 0.0);
        cfg.training.method = "cos-margin";
        cfg.training.margin = 0.2;
    } else if (name == "cdt-train") {
        cfg.training.method = "cdt";
        cfg.training.cdt_gamma = 0.3;
    } else if (name == "la-train") {
        cfg.training.method = "la";
        cfg.training.la_tau = 1.0;
    } else if (name == "focal") {
        cfg.training.method = "focal";
        cfg.training.focal_gamma = 2.0;
    } else if (name == "resample") {
        cfg.training.method = "resample";
    } else if (name == "cb") {
        cfg.training.method = "cb";
        cfg.training.cb_beta = 0.9999;
    } else if (name == "resample-ft") {
        cfg.training.finetune = "resample";
    } else if (name == "reweight-ft") {
        cfg.training.finetune = "reweight";
    } else if (name == "lws-ft") {
        cfg.training.finetune = "lws";
    } else if (name == "cdt-post") {
        cfg.posthoc.rule = "cdt-post";
        cfg.posthoc.tau = 0.3;
    } else if (name == "tau-norm") {
        cfg.posthoc.rule = "tau-norm";
        cfg.posthoc.tau = 2.0;
    } else if (name == "la-post") {
        cfg.posthoc.rule = "la-post";
        cfg.posthoc.tau = 1.0;
    } else if (name == "tde") {
        cfg.posthoc.rule = "tde";
        cfg.posthoc.alpha = 0.1;
    } else if (name == "robal-n") {
        cosine(10.0, 1.0 / 16.0);
        cfg.training.method = "robal";
        cfg.training.m0 = 0.1;
        cfg.training.tau_b = 0.0;
        cfg.training.tau_m = 0.0;
        cfg.training.alpha = 6.0;
        cfg.posthoc.rule = "robal-bias";
        cfg.posthoc.tau_p = 1.5;
    } else if (name == "robal-r") {
        cosine(10.0, 1.0 / 16.0);
        cfg.training.method = "robal";
        cfg.training.m0 = 0.1;
        cfg.training.tau_b = 1.5;  // tau_b - tau_m = 1.2
        cfg.training.tau_m = 0.3;
        cfg.training.alpha = 6.0;
        // with training-stage margins the boundary adjustment is not
        // needed; tau_p stays zero and the rule is kept for its pathway
        cfg.posthoc.rule = "robal-bias";
        cfg.posthoc.tau_p = 0.0;
    } else {
        throw ConfigError("unknown preset: " + name);
    }
    return cfg;
}

}  // namespace robal
