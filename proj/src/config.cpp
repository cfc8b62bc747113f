#include "cotrain/config.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cotrain/errors.hpp"
#include "cotrain/seeding.hpp"

namespace cotrain {

using nlohmann::json;

ExperimentConfig::ExperimentConfig() {
    // Desk-scale defaults: a smaller margin and scale than the face-scale
    // 0.5 / 32, and a lower learning rate.
    group.margin.margin = 0.3;
    group.margin.scale = 16.0;
    group.sgd.learning_rate = 0.01;
    group.noise_percent = -1.0;
}

RunSeeds run_seeds(std::uint64_t seed) {
    return {derive_seed(seed, 1), derive_seed(seed, 2), derive_seed(seed, 3), derive_seed(seed, 4),
            derive_seed(seed, 5), derive_seed(seed, 6), derive_seed(seed, 7)};
}

NrollConfig ExperimentConfig::nroll_config() const {
    const RunSeeds s = run_seeds(seed);
    NrollConfig n;
    n.group = group;
    n.group.seed = s.agents;
    n.arch = arch;
    n.label = label;
    n.estimator = estimator;
    n.estimator.seed = s.estimator;
    n.open_set = open_set;
    n.pretrain_iterations = pretrain_iterations;
    n.loop_iterations = loop_iterations;
    n.loop_warmup_fraction = loop_warmup_fraction;
    n.seed = s.agents;
    return n;
}

void ExperimentConfig::validate() const {
    if (name.empty() || name.find('/') != std::string::npos || name == "." || name == "..")
        throw ValidationError("name must be a plain directory name");
    if (data.source != "synthetic" && data.source != "csv")
        throw ValidationError("data.source must be 'synthetic' or 'csv'");
    if (data.source == "csv" && data.train_csv.empty()) throw ValidationError("data.train_csv is required for csv data");
    if (data.source == "synthetic") {
        if (data.synthetic.classes < 2) throw ValidationError("data.classes must be >= 2");
        if (data.synthetic.per_class < 2) throw ValidationError("data.per_class must be >= 2");
        if (data.synthetic.dim < 2) throw ValidationError("data.dim must be >= 2");
        if (data.synthetic.test_per_class < 0) throw ValidationError("data.test_per_class must be >= 0");
        if (!(data.synthetic.spread >= 0.0)) throw ValidationError("data.spread must be >= 0");
        if (arch.input_dim != data.synthetic.dim) throw ValidationError("model input dimension differs from data.dim");
    }
    if (!(noise_rate >= 0.0 && noise_rate < 1.0)) throw ValidationError("noise.rate must lie in [0, 1)");
    if (parts < 1) throw ValidationError("split.parts must be >= 1");
    if (arch.embedding_dim < 1) throw ValidationError("model.embedding must be >= 1");
    for (int h : arch.hidden_dims)
        if (h < 1) throw ValidationError("model.hidden sizes must be >= 1");
    GroupConfig g = group;
    if (g.noise_percent < 0.0) g.noise_percent = 0.0;
    g.validate();
    if (iterations < 1) throw ValidationError("group.iterations must be >= 1");
    nroll_config().validate();
    if (!(estimator.degenerate_gap >= 0.0)) throw ValidationError("estimator.degenerate_gap must be >= 0");
    if (estimator.max_pairs < 20) throw ValidationError("estimator.max_pairs must be >= 20");
    if (eval.agent < 0 || eval.agent >= group.agents) throw ValidationError("eval.agent out of range");
    if (eval.gallery_per_class < 1) throw ValidationError("eval.gallery_per_class must be >= 1");
    if (open_set.enabled && parts < 2) throw ValidationError("open-set mode needs split.parts >= 2");
}

namespace {

json to_json_obj(const ExperimentConfig& c) {
    json j;
    j["name"] = c.name;
    j["seed"] = c.seed;
    j["data"] = {{"source", c.data.source},
                 {"classes", c.data.synthetic.classes},
                 {"per_class", c.data.synthetic.per_class},
                 {"test_per_class", c.data.synthetic.test_per_class},
                 {"dim", c.data.synthetic.dim},
                 {"spread", c.data.synthetic.spread},
                 {"train_csv", c.data.train_csv},
                 {"test_csv", c.data.test_csv}};
    j["noise"] = {{"rate", c.noise_rate}, {"mode", c.noise_mode == NoiseMode::Symmetric ? "symmetric" : "pairflip"}};
    j["split"] = {{"parts", c.parts}};
    j["model"] = {{"hidden", c.arch.hidden_dims}, {"embedding", c.arch.embedding_dim}};
    j["margin"] = {{"m", c.group.margin.margin}, {"s", c.group.margin.scale}, {"t", c.group.margin.mv_t}};
    j["sgd"] = {{"learning_rate", c.group.sgd.learning_rate},
                {"momentum", c.group.sgd.momentum},
                {"weight_decay", c.group.sgd.weight_decay},
                {"decay_fractions", c.group.lr_decay_fractions},
                {"decay_factor", c.group.sgd.decay_factor}};
    j["group"] = {{"agents", c.group.agents},
                  {"degree", c.group.degree},
                  {"shuffle", c.group.shuffle},
                  {"noise_percent", c.group.noise_percent < 0.0 ? json("estimate") : json(c.group.noise_percent)},
                  {"batch_size", c.group.batch_size},
                  {"warmup_fraction", c.group.warmup_fraction},
                  {"iterations", c.iterations},
                  {"baseline", c.baseline}};
    j["label"] = {{"threshold", c.label.threshold},
                  {"confidence", to_string(c.label.confidence)},
                  {"parts_per_loop", c.label.parts_per_loop},
                  {"pretrain_iterations", c.pretrain_iterations},
                  {"loop_iterations", c.loop_iterations},
                  {"loop_warmup_fraction", c.loop_warmup_fraction},
                  {"stall_loops", c.label.stall_loops},
                  {"lower_step", c.label.lower_step},
                  {"threshold_floor", c.label.threshold_floor}};
    j["estimator"] = {{"max_pairs", c.estimator.max_pairs},
                      {"degenerate_gap", c.estimator.degenerate_gap},
                      {"pair_correction", c.estimator.pair_correction},
                      {"max_iters", c.estimator.gmm.max_iters},
                      {"tol", c.estimator.gmm.tol},
                      {"variance_floor", c.estimator.gmm.variance_floor}};
    j["open_set"] = {{"enabled", c.open_set.enabled},
                     {"prototypes", c.open_set.prototypes},
                     {"tau_new", c.open_set.tau_new},
                     {"ema", c.open_set.ema},
                     {"min_identity_size", c.open_set.min_identity_size}};
    j["eval"] = {{"agent", c.eval.agent},
                 {"verification_pairs", c.eval.verification_pairs},
                 {"gallery_per_class", c.eval.gallery_per_class}};
    return j;
}

void check_keys(const json& user, const json& defaults, const std::string& path) {
    if (!user.is_object()) throw ValidationError((path.empty() ? "config" : path) + " must be an object");
    for (const auto& [key, value] : user.items()) {
        const std::string where = path.empty() ? key : path + "." + key;
        if (!defaults.contains(key)) throw ValidationError("unknown key '" + where + "'");
        if (defaults[key].is_object()) check_keys(value, defaults[key], where);
    }
}

template <class T>
T get(const json& j, const char* section, const char* key) {
    const json& v = section ? j.at(section).at(key) : j.at(key);
    try {
        if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
            if (!v.is_number_integer() && !(v.is_number_float() && v.get<double>() == std::floor(v.get<double>())))
                throw ValidationError("");
        }
        return v.get<T>();
    } catch (const std::exception&) {
        throw ValidationError(std::string("bad value for '") + (section ? std::string(section) + "." : "") + key + "'");
    }
}

ExperimentConfig from_json_obj(const json& j) {
    ExperimentConfig c;
    c.name = get<std::string>(j, nullptr, "name");
    c.seed = get<std::uint64_t>(j, nullptr, "seed");
    c.data.source = get<std::string>(j, "data", "source");
    c.data.synthetic.classes = get<int>(j, "data", "classes");
    c.data.synthetic.per_class = get<int>(j, "data", "per_class");
    c.data.synthetic.test_per_class = get<int>(j, "data", "test_per_class");
    c.data.synthetic.dim = get<int>(j, "data", "dim");
    c.data.synthetic.spread = get<double>(j, "data", "spread");
    c.data.train_csv = get<std::string>(j, "data", "train_csv");
    c.data.test_csv = get<std::string>(j, "data", "test_csv");
    c.noise_rate = get<double>(j, "noise", "rate");
    const auto mode = get<std::string>(j, "noise", "mode");
    if (mode == "symmetric")
        c.noise_mode = NoiseMode::Symmetric;
    else if (mode == "pairflip")
        c.noise_mode = NoiseMode::PairFlip;
    else
        throw ValidationError("noise.mode must be 'symmetric' or 'pairflip'");
    c.parts = get<int>(j, "split", "parts");
    c.arch.hidden_dims = get<std::vector<int>>(j, "model", "hidden");
    c.arch.embedding_dim = get<int>(j, "model", "embedding");
    c.arch.input_dim = c.data.synthetic.dim;
    c.group.margin.margin = get<double>(j, "margin", "m");
    c.group.margin.scale = get<double>(j, "margin", "s");
    c.group.margin.mv_t = get<double>(j, "margin", "t");
    c.group.sgd.learning_rate = get<double>(j, "sgd", "learning_rate");
    c.group.sgd.momentum = get<double>(j, "sgd", "momentum");
    c.group.sgd.weight_decay = get<double>(j, "sgd", "weight_decay");
    c.group.lr_decay_fractions = get<std::vector<double>>(j, "sgd", "decay_fractions");
    c.group.sgd.decay_factor = get<double>(j, "sgd", "decay_factor");
    c.group.agents = get<int>(j, "group", "agents");
    c.group.degree = get<int>(j, "group", "degree");
    c.group.shuffle = get<bool>(j, "group", "shuffle");
    const json& r = j.at("group").at("noise_percent");
    if (r.is_string() && r.get<std::string>() == "estimate")
        c.group.noise_percent = -1.0;
    else if (r.is_number())
        c.group.noise_percent = r.get<double>();
    else
        throw ValidationError("group.noise_percent must be a number or \"estimate\"");
    if (r.is_number() && c.group.noise_percent < 0.0)
        throw ValidationError("group.noise_percent must lie in [0, 100)");
    c.group.batch_size = get<int>(j, "group", "batch_size");
    c.group.warmup_fraction = get<double>(j, "group", "warmup_fraction");
    c.iterations = get<long>(j, "group", "iterations");
    c.baseline = get<bool>(j, "group", "baseline");
    c.label.threshold = get<double>(j, "label", "threshold");
    c.label.confidence = parse_confidence(get<std::string>(j, "label", "confidence"));
    c.label.parts_per_loop = get<int>(j, "label", "parts_per_loop");
    c.pretrain_iterations = get<long>(j, "label", "pretrain_iterations");
    c.loop_iterations = get<long>(j, "label", "loop_iterations");
    c.loop_warmup_fraction = get<double>(j, "label", "loop_warmup_fraction");
    c.label.stall_loops = get<int>(j, "label", "stall_loops");
    c.label.lower_step = get<double>(j, "label", "lower_step");
    c.label.threshold_floor = get<double>(j, "label", "threshold_floor");
    c.estimator.max_pairs = get<std::size_t>(j, "estimator", "max_pairs");
    c.estimator.degenerate_gap = get<double>(j, "estimator", "degenerate_gap");
    c.estimator.pair_correction = get<bool>(j, "estimator", "pair_correction");
    c.estimator.gmm.max_iters = get<int>(j, "estimator", "max_iters");
    c.estimator.gmm.tol = get<double>(j, "estimator", "tol");
    c.estimator.gmm.variance_floor = get<double>(j, "estimator", "variance_floor");
    c.open_set.enabled = get<bool>(j, "open_set", "enabled");
    c.open_set.prototypes = get<bool>(j, "open_set", "prototypes");
    c.open_set.tau_new = get<double>(j, "open_set", "tau_new");
    c.open_set.ema = get<double>(j, "open_set", "ema");
    c.open_set.min_identity_size = get<int>(j, "open_set", "min_identity_size");
    c.eval.agent = get<int>(j, "eval", "agent");
    c.eval.verification_pairs = get<std::size_t>(j, "eval", "verification_pairs");
    c.eval.gallery_per_class = get<int>(j, "eval", "gallery_per_class");
    return c;
}

void apply_override(json& user, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ValidationError("override '" + assignment + "' is not key=value");
    const std::string path = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;

    json* node = &user;
    std::size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (key.empty()) throw ValidationError("override '" + assignment + "' has an empty key");
        if (!node->is_object()) throw ValidationError("override '" + path + "' descends into a non-object");
        if (dot == std::string::npos) {
            (*node)[key] = value;
            return;
        }
        if (!node->contains(key)) (*node)[key] = json::object();
        node = &(*node)[key];
        start = dot + 1;
    }
}

}  // namespace

ExperimentConfig parse_config(const std::string& json_text, const std::vector<std::string>& overrides) {
    json user = json::object();
    if (!json_text.empty()) {
        try {
            user = json::parse(json_text);
        } catch (const json::parse_error& e) {
            throw ValidationError(std::string("config is not valid JSON: ") + e.what());
        }
    }
    for (const auto& o : overrides) apply_override(user, o);
    const json defaults = to_json_obj(ExperimentConfig{});
    check_keys(user, defaults, "");
    json merged = defaults;
    merged.merge_patch(user);
    // merge_patch drops keys set to null
    for (const auto& [section, value] : defaults.items()) {
        if (!merged.contains(section)) throw ValidationError("'" + section + "' must not be null");
        if (value.is_object())
            for (const auto& [key, v] : value.items())
                if (!merged[section].contains(key)) throw ValidationError("'" + section + "." + key + "' must not be null");
    }
    ExperimentConfig cfg = from_json_obj(merged);
    cfg.validate();
    return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot read config " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), overrides);
}

std::string config_to_json(const ExperimentConfig& cfg) { return to_json_obj(cfg).dump(2) + "\n"; }

std::string default_config_json() { return config_to_json(ExperimentConfig{}); }

}  // namespace cotrain
