#include "cotrain/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <sstream>

#include <json.hpp>

#include "cotrain/checkpoint.hpp"
#include "cotrain/errors.hpp"

namespace cotrain {

using nlohmann::json;

RunDir::RunDir(const std::filesystem::path& root, const std::string& name) : path_(root / name) {
    std::filesystem::create_directories(path_);
}

void RunDir::write_text(const std::string& file, const std::string& text) const {
    const auto p = path_ / file;
    std::filesystem::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    out << text;
}

void RunDir::log_iteration(const std::string& json_line) {
    if (!iterations_.is_open()) {
        iterations_.open(path_ / "iterations.jsonl", std::ios::binary | std::ios::trunc);
        if (!iterations_) throw std::runtime_error("cannot write iterations.jsonl");
    }
    iterations_ << json_line << '\n';
}

void RunDir::save_agents(const std::vector<Agent>& agents, const MarginConfig& margin, const std::string& subdir) const {
    const auto dir = subdir.empty() ? path_ : path_ / subdir;
    std::filesystem::create_directories(dir);
    for (std::size_t m = 0; m < agents.size(); ++m)
        save_checkpoint(dir / ("agent_" + std::to_string(m) + ".ckpt"), agents[m], margin);
}

TrainData load_clean_data(const ExperimentConfig& cfg) {
    TrainData d;
    if (cfg.data.source == "synthetic") {
        SyntheticSpec spec = cfg.data.synthetic;
        spec.seed = run_seeds(cfg.seed).data;
        auto syn = gen_synthetic(spec);
        d.train = std::move(syn.train);
        d.test = std::move(syn.test);
    } else {
        d.train = load_csv(cfg.data.train_csv);
        if (!cfg.data.test_csv.empty()) d.test = load_csv(cfg.data.test_csv);
        if (!d.test.empty() && d.test.dim() != d.train.dim())
            throw ValidationError("test CSV dimension differs from train CSV");
        const int classes = std::max(d.train.num_classes, d.test.num_classes);
        d.train.num_classes = d.test.num_classes = classes;
    }
    if (d.train.empty()) throw ValidationError("training data is empty");
    return d;
}

TrainData prepare_train_data(const ExperimentConfig& cfg) {
    TrainData d = load_clean_data(cfg);
    d.train = inject_noise(d.train, cfg.noise_rate, cfg.noise_mode, run_seeds(cfg.seed).noise);
    return d;
}

SplitData prepare_split_data(const ExperimentConfig& cfg) {
    TrainData clean = load_clean_data(cfg);
    const auto seeds = run_seeds(cfg.seed);
    SplitData s;
    s.split = cfg.open_set.enabled ? split_parts_open_set(clean.train, cfg.parts, seeds.split)
                                   : split_parts(clean.train, cfg.parts, seeds.split);
    s.seed = inject_noise(s.split.labelled, cfg.noise_rate, cfg.noise_mode, seeds.noise);
    s.parts = s.split.unlabelled;
    s.test = std::move(clean.test);
    return s;
}

FilterStats filter_stats(const std::vector<IterationLog>& logs) {
    FilterStats f;
    double b = 0.0, h = 0.0;
    std::size_t n = 0;
    for (const auto& l : logs) {
        if (l.warmup || l.batch_noisy_fraction < 0.0) continue;
        b += l.batch_noisy_fraction;
        h += l.hc_noisy_fraction;
        ++n;
    }
    if (n > 0) {
        f.batch_noisy = b / static_cast<double>(n);
        f.hc_noisy = h / static_cast<double>(n);
    }
    return f;
}

namespace {

EncoderArch arch_for(const ExperimentConfig& cfg, int dim) {
    EncoderArch a = cfg.arch;
    a.input_dim = dim;
    return a;
}

EvalSpec eval_spec(const ExperimentConfig& cfg) {
    EvalSpec e = cfg.eval;
    e.seed = run_seeds(cfg.seed).eval;
    return e;
}

std::string roc_csv(const VerificationResult& v) {
    std::ostringstream out;
    out << "threshold,fpr,tpr\n";
    for (const auto& p : v.roc) {
        if (std::isfinite(p.threshold))
            out << p.threshold;
        else
            out << "inf";
        out << ',' << p.fpr << ',' << p.tpr << '\n';
    }
    return out.str();
}

json report_json(const EvalReport& r) { return json::parse(r.to_json()); }

}  // namespace

TrainOutcome run_train(const ExperimentConfig& cfg, RunDir* run) {
    cfg.validate();
    const TrainData data = prepare_train_data(cfg);
    const auto seeds = run_seeds(cfg.seed);
    GroupConfig g = cfg.group;
    g.seed = seeds.agents;
    const bool estimate = g.noise_percent < 0.0;
    if (estimate) g.noise_percent = 0.0;

    if (run) run->write_config(cfg);
    GroupTrainer trainer(g, make_agents(arch_for(cfg, data.train.dim()), data.train.num_classes, g.agents, seeds.agents));
    std::optional<NoiseEstimate> initial;
    TrainHooks hooks;
    if (estimate) {
        hooks.after_warmup = [&](const std::vector<Agent>& agents) -> std::optional<double> {
            NoiseConfig nc = cfg.estimator;
            nc.seed = seeds.estimator;
            initial = estimate_noise_rate(data.train, agents[static_cast<std::size_t>(cfg.eval.agent)].encoder, nc);
            return initial->degenerate ? 0.0 : std::min(99.0, 100.0 * initial->rate);
        };
    }
    if (run) hooks.on_iteration = [&](const IterationLog& l) { run->log_iteration(l.to_json()); };

    TrainOutcome out;
    out.logs = trainer.train(data.train, cfg.iterations, hooks);
    out.agents = trainer.agents();
    out.filter = filter_stats(out.logs);
    const Agent& chosen = out.agents[static_cast<std::size_t>(cfg.eval.agent)];
    if (!data.test.empty()) out.report = evaluate(chosen, data.test, eval_spec(cfg));
    if (cfg.baseline && !data.test.empty()) out.baseline_accuracy = run_baseline(cfg);

    if (run) {
        run->save_agents(out.agents, cfg.group.margin);
        json j;
        j["status"] = "ok";
        if (!data.test.empty()) j["eval"] = report_json(out.report);
        j["baseline_accuracy"] = out.baseline_accuracy ? json(*out.baseline_accuracy) : json(nullptr);
        j["noise_percent_used"] = trainer.noise_percent();
        if (initial) j["noise_estimate"] = {{"rate", initial->rate}, {"degenerate", initial->degenerate}};
        j["batch_noisy_fraction"] = out.filter.batch_noisy;
        j["hc_noisy_fraction"] = out.filter.hc_noisy;
        run->write_text("report.json", j.dump(2) + "\n");
        if (!data.test.empty()) run->write_text("roc.csv", roc_csv(out.report.verification));
    }
    return out;
}

double run_baseline(const ExperimentConfig& cfg) {
    const TrainData data = prepare_train_data(cfg);
    if (data.test.empty()) throw ValidationError("baseline needs a test set");
    Agent agent = Agent::make(arch_for(cfg, data.train.dim()), data.train.num_classes, run_seeds(cfg.seed).baseline);
    GroupConfig g = cfg.group;
    if (g.noise_percent < 0.0) g.noise_percent = 0.0;
    train_baseline(agent, data.train, g, cfg.iterations);
    return classification_accuracy(agent, data.test);
}

namespace {

// Precision of one loop's assignments. Labels the seed set never had are
// new identities; each counts as correct where it agrees with its own
// majority hidden label.
std::pair<std::size_t, std::size_t> count_correct(const std::vector<int>& assigned, std::span<const int> truth,
                                                  int seed_classes) {
    std::map<int, std::map<int, std::size_t>> votes;
    std::size_t accepted = 0, correct = 0;
    for (std::size_t i = 0; i < assigned.size(); ++i) {
        if (assigned[i] == kNoLabel) continue;
        ++accepted;
        if (assigned[i] < seed_classes)
            correct += assigned[i] == truth[i];
        else
            votes[assigned[i]][truth[i]]++;
    }
    for (const auto& [cls, v] : votes) {
        std::size_t best = 0;
        for (const auto& [t, n] : v) best = std::max(best, n);
        correct += best;
    }
    return {accepted, correct};
}

double seen_class_accuracy(const Agent& agent, const LabelledSet& test, int seed_classes) {
    std::vector<int> keep;
    for (std::size_t i = 0; i < test.size(); ++i)
        if (test.labels[i] < seed_classes) keep.push_back(static_cast<int>(i));
    if (keep.empty()) return 0.0;
    return classification_accuracy(agent, test.subset(keep));
}

}  // namespace

NrollOutcome run_nroll_experiment(const ExperimentConfig& cfg, RunDir* run) {
    cfg.validate();
    const SplitData data = prepare_split_data(cfg);
    if (data.parts.empty()) throw ValidationError("nroll needs at least one unlabelled part (split.parts >= 2)");
    NrollConfig ncfg = cfg.nroll_config();
    ncfg.arch = arch_for(cfg, data.seed.dim());
    const int seed_classes = data.seed.num_classes;
    const auto agent_index = static_cast<std::size_t>(cfg.eval.agent);
    const EvalSpec spec = eval_spec(cfg);

    if (run) {
        run->write_config(cfg);
        write_manifest(run->path() / "manifest.json", data.split);
    }

    NrollHooks hooks;
    if (run)
        hooks.on_iteration = [&](const IterationLog& l, int loop) {
            json j = json::parse(l.to_json());
            j["loop"] = loop;
            run->log_iteration(j.dump());
        };
    hooks.on_loop = [&](LoopMetrics& m, const LoopView& v) {
        std::size_t accepted = 0, correct = 0;
        for (std::size_t k = 0; k < v.parts.size(); ++k) {
            const auto [a, c] = count_correct(v.assigned[k], GroundTruth::labels(data.parts[v.parts[k]]), seed_classes);
            accepted += a;
            correct += c;
        }
        if (!v.parts.empty()) m.pseudo_precision = accepted == 0 ? 1.0 : static_cast<double>(correct) / accepted;
        if (!data.test.empty()) {
            const Agent& a = v.agents[agent_index];
            m.test_accuracy = cfg.open_set.enabled ? seen_class_accuracy(a, data.test, seed_classes)
                                                   : classification_accuracy(a, data.test);
            std::mt19937_64 rng(spec.seed);
            const auto pairs = make_verification_pairs(data.test.labels, spec.verification_pairs, rng);
            m.verification_accuracy = verification_accuracy(a.encoder, data.test.features, pairs).accuracy;
            m.rank1 = rank1(a.encoder, data.test, spec.gallery_per_class);
        }
        if (run) run->save_agents(v.agents, cfg.group.margin, "loop_" + std::to_string(v.t));
    };

    NrollOutcome out;
    out.result = run_nroll(ncfg, data.seed, data.parts, hooks);
    const Agent& chosen = out.result.agents[agent_index];
    if (!data.test.empty()) {
        out.report = evaluate(chosen, data.test, spec);
        if (cfg.open_set.enabled) out.report.test_accuracy = seen_class_accuracy(chosen, data.test, seed_classes);
    }

    if (run) {
        run->write_text("loops.csv", loops_csv(out.result.loops));
        json loops = json::array();
        for (const auto& m : out.result.loops)
            loops.push_back({{"t", m.t},
                             {"labelled_size", m.labelled_size},
                             {"noise_rate", m.noise_rate},
                             {"noise_degenerate", m.noise_degenerate},
                             {"threshold", m.threshold},
                             {"confident_fraction", m.confident_fraction},
                             {"accepted", m.accepted},
                             {"dropped", m.dropped},
                             {"new_identities", m.new_identities},
                             {"prototype_norm_error", m.prototype_norm_error},
                             {"classes", m.classes},
                             {"pseudo_precision", m.pseudo_precision},
                             {"test_accuracy", m.test_accuracy},
                             {"verification_accuracy", m.verification_accuracy},
                             {"rank1", m.rank1},
                             {"events", m.events}});
        json j;
        j["status"] = "ok";
        j["loops"] = loops;
        if (!data.test.empty()) j["eval"] = report_json(out.report);
        j["dropped_ids"] = out.result.dropped;
        run->write_text("report.json", j.dump(2) + "\n");
        run->save_agents(out.result.agents, cfg.group.margin, "final");
    }
    return out;
}

std::string loops_csv(const std::vector<LoopMetrics>& loops) {
    std::ostringstream out;
    out << "t,labelled_size,r_est,confident_fraction,pseudo_acc,test_acc,verification_acc,rank1,threshold,classes\n";
    for (const auto& m : loops) {
        if (m.t == 0) continue;
        out << m.t << ',' << m.labelled_size << ',' << m.noise_rate << ',' << m.confident_fraction << ','
            << m.pseudo_precision << ',' << m.test_accuracy << ',' << m.verification_accuracy << ',' << m.rank1 << ','
            << m.threshold << ',' << m.classes << '\n';
    }
    return out.str();
}

NoiseOutcome run_estimate_noise(const ExperimentConfig& cfg, const Agent* embedder, RunDir* run) {
    cfg.validate();
    std::optional<TrainOutcome> trained;
    if (!embedder) {
        ExperimentConfig c = cfg;
        c.baseline = false;
        trained = run_train(c, run);
        embedder = &trained->agents[static_cast<std::size_t>(cfg.eval.agent)];
    } else if (run) {
        run->write_config(cfg);
    }
    const TrainData data = prepare_train_data(cfg);
    if (embedder->encoder.input_dim() != data.train.dim())
        throw ValidationError("embedder input dimension differs from the data");

    NoiseOutcome out;
    std::mt19937_64 rng(run_seeds(cfg.seed).estimator);
    out.similarities = sample_intra_pairs(data.train, embedder->encoder, cfg.estimator.max_pairs, rng);
    out.estimate = noise_from_fit(fit_gmm2(out.similarities, cfg.estimator.gmm), out.similarities.size(), cfg.estimator);
    bool truth = false;
    std::size_t noisy = 0;
    for (std::size_t i = 0; i < data.train.size(); ++i) {
        truth = truth || data.train.gt_labels[i] != kNoLabel;
        noisy += data.train.is_noisy(i);
    }
    if (truth) out.true_rate = static_cast<double>(noisy) / static_cast<double>(data.train.size());

    if (run) {
        const auto& f = out.estimate.fit;
        json j = {{"rate", out.estimate.rate},
                  {"pair_weight", out.estimate.pair_weight},
                  {"degenerate", out.estimate.degenerate},
                  {"pairs", out.estimate.pairs},
                  {"true_rate", out.true_rate < 0.0 ? json(nullptr) : json(out.true_rate)},
                  {"gmm",
                   {{"mu1", f.mu1}, {"mu2", f.mu2}, {"var1", f.var1}, {"var2", f.var2}, {"w1", f.w1}, {"w2", f.w2},
                    {"iterations", f.iterations}, {"log_likelihood", f.log_likelihood}, {"converged", f.converged}}}};
        run->write_text("gmm.json", j.dump(2) + "\n");
        std::ostringstream h;
        h << "bin_center,count\n";
        for (const auto& [c, n] : similarity_histogram(out.similarities, 100)) h << c << ',' << n << '\n';
        run->write_text("histogram.csv", h.str());
    }
    return out;
}

EvalReport run_evaluate(const ExperimentConfig& cfg, const Agent& agent, RunDir* run) {
    cfg.validate();
    const TrainData data = load_clean_data(cfg);
    if (data.test.empty()) throw ValidationError("evaluation needs a test set");
    if (agent.encoder.input_dim() != data.test.dim()) throw ValidationError("checkpoint input dimension differs from the data");
    EvalReport r = evaluate(agent, data.test, eval_spec(cfg));
    if (run) {
        run->write_text("eval_report.json", r.to_json() + "\n");
        run->write_text("roc.csv", roc_csv(r.verification));
    }
    return r;
}

void run_gen_data(const ExperimentConfig& cfg, const std::filesystem::path& out) {
    cfg.validate();
    std::filesystem::create_directories(out);
    const TrainData data = prepare_train_data(cfg);
    write_csv(out / "train.csv", data.train);
    if (!data.test.empty()) write_csv(out / "test.csv", data.test);
    const SplitData split = prepare_split_data(cfg);
    write_csv(out / "labelled.csv", split.seed);
    write_manifest(out / "manifest.json", split.split);
}

}  // namespace cotrain
