#include "cotrain/nroll.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <unordered_set>

#include "cotrain/errors.hpp"
#include "cotrain/seeding.hpp"

namespace cotrain {

Confidence parse_confidence(const std::string& name) {
    if (name == "posterior") return Confidence::Posterior;
    if (name == "cosine") return Confidence::Cosine;
    if (name == "scaled-logit") return Confidence::ScaledLogit;
    throw ValidationError("unknown confidence '" + name + "' (posterior, cosine, scaled-logit)");
}

std::string to_string(Confidence c) {
    switch (c) {
        case Confidence::Posterior: return "posterior";
        case Confidence::Cosine: return "cosine";
        case Confidence::ScaledLogit: return "scaled-logit";
    }
    return "posterior";
}

void LabelConfig::validate() const {
    if (!(threshold > 0.0)) throw ValidationError("label threshold must be > 0");
    if (confidence != Confidence::ScaledLogit && threshold > 1.0)
        throw ValidationError("label threshold must be <= 1 for posterior and cosine confidence");
    if (parts_per_loop < 1) throw ValidationError("parts_per_loop must be >= 1");
    if (stall_loops < 1) throw ValidationError("stall_loops must be >= 1");
    if (lower_step < 0.0) throw ValidationError("lower_step must be >= 0");
}

Matrix confidence_matrix(const Agent& agent, const Matrix& x, Confidence kind, double scale) {
    Matrix cos = batch_cosines(agent, x);
    switch (kind) {
        case Confidence::Cosine: return cos;
        case Confidence::ScaledLogit: return scale * cos;
        case Confidence::Posterior:
            for (Eigen::Index i = 0; i < cos.cols(); ++i) cos.col(i) = softmax(scale * cos.col(i));
            return cos;
    }
    return cos;
}

namespace {

struct Best {
    double value = -std::numeric_limits<double>::infinity();
    int label = kNoLabel;
};

// Max over agents, then classes; ties keep the lower agent, then lower class.
std::vector<Best> best_confidence(const std::vector<Matrix>& conf) {
    const auto n = conf.empty() ? 0 : static_cast<std::size_t>(conf.front().cols());
    std::vector<Best> best(n);
    for (const auto& c : conf)
        for (Eigen::Index i = 0; i < c.cols(); ++i) {
            Eigen::Index k = 0;
            const double v = c.col(i).maxCoeff(&k);
            auto& b = best[static_cast<std::size_t>(i)];
            if (v > b.value) b = {v, static_cast<int>(k)};
        }
    return best;
}

std::vector<Matrix> all_confidences(const std::vector<Agent>& agents, const Matrix& x, Confidence kind,
                                    double scale) {
    std::vector<Matrix> out;
    out.reserve(agents.size());
    for (const auto& a : agents) out.push_back(confidence_matrix(a, x, kind, scale));
    return out;
}

}  // namespace

LabelResult label_part(const std::vector<Agent>& agents, const Matrix& features, std::span<const long> ids,
                       const LabelConfig& cfg, double scale) {
    if (agents.empty()) throw ValidationError("no agents to label with");
    const int classes = agents.front().head.num_classes();
    for (const auto& a : agents)
        if (a.head.num_classes() != classes) throw ValidationError("agents disagree on the class space");

    LabelResult r;
    const auto n = static_cast<std::size_t>(features.cols());
    r.assigned.assign(n, kNoLabel);
    r.confidence.assign(n, 0.0);
    if (n == 0) return r;
    const auto best = best_confidence(all_confidences(agents, features, cfg.confidence, scale));
    for (std::size_t i = 0; i < n; ++i) {
        r.confidence[i] = best[i].value;
        if (best[i].value >= cfg.threshold) {
            r.assigned[i] = best[i].label;
            r.accepted.push_back(static_cast<int>(i));
        } else {
            r.dropped.push_back(ids[i]);
        }
    }
    r.confident_fraction = static_cast<double>(r.accepted.size()) / static_cast<double>(n);
    return r;
}

LabelResult label_part(const std::vector<Agent>& agents, const UnlabelledPart& part, const LabelConfig& cfg,
                       double scale) {
    return label_part(agents, part.features(), part.ids(), cfg, scale);
}

LabelledSet update_labelled(const LabelledSet& labelled, const LabelledSet& pseudo, int loop) {
    std::unordered_set<long> present(labelled.ids.begin(), labelled.ids.end());
    for (long id : pseudo.ids)
        if (present.contains(id)) throw ValidationError("pseudo-labelled id " + std::to_string(id) + " already labelled");
    if (pseudo.empty()) return labelled;
    if (!labelled.empty() && pseudo.dim() != labelled.dim()) throw ValidationError("feature dimension mismatch");

    LabelledSet out = labelled;
    const Eigen::Index n0 = labelled.features.cols();
    out.features.conservativeResize(pseudo.features.rows(), n0 + pseudo.features.cols());
    out.features.rightCols(pseudo.features.cols()) = pseudo.features;
    out.ids.insert(out.ids.end(), pseudo.ids.begin(), pseudo.ids.end());
    out.labels.insert(out.labels.end(), pseudo.labels.begin(), pseudo.labels.end());
    out.gt_labels.insert(out.gt_labels.end(), pseudo.gt_labels.begin(), pseudo.gt_labels.end());
    out.provenance.insert(out.provenance.end(), pseudo.size(), loop);
    out.num_classes = std::max(labelled.num_classes, pseudo.num_classes);
    out.validate();
    return out;
}

LabelledSet update_labelled(const LabelledSet& labelled, const UnlabelledPart& part, const LabelResult& result,
                            int loop) {
    LabelledSet pseudo;
    pseudo.num_classes = labelled.num_classes;
    pseudo.features.resize(part.features().rows(), static_cast<Eigen::Index>(result.accepted.size()));
    for (std::size_t k = 0; k < result.accepted.size(); ++k) {
        const int i = result.accepted[k];
        pseudo.features.col(static_cast<Eigen::Index>(k)) = part.features().col(i);
        pseudo.ids.push_back(part.ids()[static_cast<std::size_t>(i)]);
        pseudo.labels.push_back(result.assigned[static_cast<std::size_t>(i)]);
        pseudo.num_classes = std::max(pseudo.num_classes, pseudo.labels.back() + 1);
    }
    pseudo.gt_labels.assign(pseudo.ids.size(), kNoLabel);
    pseudo.provenance.assign(pseudo.ids.size(), loop);
    return update_labelled(labelled, pseudo, loop);
}

std::size_t PrototypeBank::add(const Vector& feature) {
    const double n = feature.norm();
    if (!(n > 0.0) || !std::isfinite(n)) throw NumericError("numeric overflow");
    prototypes_.push_back(feature / n);
    counts_.push_back(1);
    return prototypes_.size() - 1;
}

void PrototypeBank::update(std::size_t k, const Vector& feature) {
    Vector f = ema_ * prototypes_.at(k) + (1.0 - ema_) * feature;
    const double n = f.norm();
    if (!(n > 0.0) || !std::isfinite(n)) throw NumericError("numeric overflow");
    prototypes_[k] = f / n;
    ++counts_[k];
}

double PrototypeBank::max_norm_error() const {
    double e = 0.0;
    for (const auto& p : prototypes_) e = std::max(e, std::abs(p.norm() - 1.0));
    return e;
}

void PrototypeBank::clear() {
    prototypes_.clear();
    counts_.clear();
}

namespace {

// Decision for one column given its embedding under the designated agent and
// the best known-class confidence over all agents.
OpenSetAssignment assign_one(const Vector& emb, const ClassHead& head, const Best& known, PrototypeBank& bank,
                             double tau_new, double threshold) {
    OpenSetAssignment a;
    double best_class = -std::numeric_limits<double>::infinity();
    if (head.num_classes() > 0) best_class = (head.weight * emb).maxCoeff();
    double best_proto = -std::numeric_limits<double>::infinity();
    std::size_t proto = 0;
    for (std::size_t k = 0; k < bank.size(); ++k) {
        const double s = bank.prototype(k).dot(emb);
        if (s > best_proto) {
            best_proto = s;
            proto = k;
        }
    }
    const double best = std::max(best_class, best_proto);
    if (best < tau_new) {
        a.kind = OpenSetAssignment::Kind::NewIdentity;
        a.label = static_cast<int>(bank.add(emb));
        a.created = true;
        a.similarity = best;
        return a;
    }
    if (best_proto > best_class) {
        bank.update(proto, emb);
        a.kind = OpenSetAssignment::Kind::NewIdentity;
        a.label = static_cast<int>(proto);
        a.similarity = best_proto;
        return a;
    }
    a.similarity = known.value;
    if (known.value >= threshold) {
        a.kind = OpenSetAssignment::Kind::Known;
        a.label = known.label;
    }
    return a;
}

}  // namespace

OpenSetAssignment open_set_assign(const std::vector<Agent>& agents, const Vector& x, PrototypeBank& bank,
                                  double tau_new, const LabelConfig& cfg, double scale, int embed_agent) {
    const Matrix col = x;
    const auto best = best_confidence(all_confidences(agents, col, cfg.confidence, scale));
    const Agent& e = agents.at(static_cast<std::size_t>(embed_agent));
    return assign_one(embed(e.encoder, x), e.head, best.front(), bank, tau_new, cfg.threshold);
}

void NrollConfig::validate() const {
    GroupConfig g = group;
    if (g.noise_percent < 0.0) g.noise_percent = 0.0;  // estimated later
    g.validate();
    label.validate();
    if (pretrain_iterations < 1) throw ValidationError("pretrain_iterations must be >= 1");
    if (loop_iterations < 1) throw ValidationError("loop_iterations must be >= 1");
    if (loop_warmup_fraction < 0.0 || loop_warmup_fraction >= 1.0)
        throw ValidationError("loop_warmup_fraction must be in [0, 1)");
    if (open_set.ema < 0.0 || open_set.ema >= 1.0) throw ValidationError("prototype ema must be in [0, 1)");
    if (open_set.min_identity_size < 1) throw ValidationError("min_identity_size must be >= 1");
}

namespace {

struct OpenSetOutcome {
    LabelResult result;
    std::size_t new_identities = 0;
    double norm_error = 0.0;
};

// Open-set labelling of one part. Surviving new identities become classes
// numbered after the current ones; every agent gets a head row at its own
// normalized mean embedding of the members.
OpenSetOutcome label_open_set(std::vector<Agent>& agents, const UnlabelledPart& part, const NrollConfig& cfg) {
    const auto n = part.size();
    const double scale = cfg.group.margin.scale;
    OpenSetOutcome out;
    auto& r = out.result;
    r.assigned.assign(n, kNoLabel);
    r.confidence.assign(n, 0.0);
    if (n == 0) return out;

    const auto known = best_confidence(all_confidences(agents, part.features(), cfg.label.confidence, scale));
    const Agent& e = agents.front();
    const Matrix emb = embed_batch(e.encoder, part.features());
    PrototypeBank bank(cfg.open_set.ema);
    std::vector<int> identity(n, -1);
    for (std::size_t i = 0; i < n; ++i) {
        const auto a = assign_one(emb.col(static_cast<Eigen::Index>(i)), e.head, known[i], bank, cfg.open_set.tau_new,
                                  cfg.label.threshold);
        out.norm_error = std::max(out.norm_error, bank.max_norm_error());
        if (out.norm_error > 1e-6) throw NumericError("prototype lost unit norm");
        r.confidence[i] = a.similarity;
        if (a.kind == OpenSetAssignment::Kind::Known) r.assigned[i] = a.label;
        if (a.kind == OpenSetAssignment::Kind::NewIdentity) identity[i] = a.label;
    }

    const int base = agents.front().head.num_classes();
    std::map<int, int> class_of;  // bank index -> new class id
    for (std::size_t k = 0; k < bank.size(); ++k)
        if (bank.count(k) >= cfg.open_set.min_identity_size)
            class_of[static_cast<int>(k)] = base + static_cast<int>(class_of.size());
    for (std::size_t i = 0; i < n; ++i)
        if (identity[i] >= 0 && class_of.contains(identity[i])) r.assigned[i] = class_of[identity[i]];

    if (!class_of.empty()) {
        for (auto& agent : agents) {
            const Matrix ae = embed_batch(agent.encoder, part.features());
            for (const auto& [k, cls] : class_of) {
                Vector mean = Vector::Zero(ae.rows());
                for (std::size_t i = 0; i < n; ++i)
                    if (identity[i] == k) mean += ae.col(static_cast<Eigen::Index>(i));
                if (!(mean.norm() > 0.0)) mean = bank.prototype(static_cast<std::size_t>(k));
                agent.head.append_row(mean);
            }
        }
    }
    out.new_identities = class_of.size();

    for (std::size_t i = 0; i < n; ++i) {
        if (r.assigned[i] != kNoLabel)
            r.accepted.push_back(static_cast<int>(i));
        else
            r.dropped.push_back(part.ids()[i]);
    }
    r.confident_fraction = static_cast<double>(r.accepted.size()) / static_cast<double>(n);
    return out;
}

// The loss cutoff must leave something to train on.
double to_percent(const NoiseEstimate& e) { return e.degenerate ? 0.0 : std::min(99.0, 100.0 * e.rate); }

}  // namespace

NrollResult run_nroll(const NrollConfig& cfg, const LabelledSet& seed_set, const std::vector<UnlabelledPart>& parts,
                      const NrollHooks& hooks) {
    cfg.validate();
    seed_set.validate();
    if (seed_set.empty()) throw ValidationError("empty seed labelled set");

    NrollResult res;
    res.labelled = seed_set;
    GroupConfig gcfg = cfg.group;
    const bool estimate_first = gcfg.noise_percent < 0.0;
    if (estimate_first) gcfg.noise_percent = 0.0;
    GroupTrainer trainer(gcfg, make_agents(cfg.arch, seed_set.num_classes, gcfg.agents, cfg.seed));
    LabelConfig label = cfg.label;

    auto estimate = [&](const std::vector<Agent>& agents, const LabelledSet& set, int loop) {
        NoiseConfig nc = cfg.estimator;
        nc.seed = derive_seed(cfg.estimator.seed, 9000 + static_cast<std::uint64_t>(loop));
        return estimate_noise_rate(set, agents.front().encoder, nc);
    };

    LoopMetrics m0;
    m0.t = 0;
    TrainHooks th;
    if (hooks.on_iteration) th.on_iteration = [&](const IterationLog& l) { hooks.on_iteration(l, 0); };
    if (estimate_first) {
        th.after_warmup = [&](const std::vector<Agent>& agents) -> std::optional<double> {
            const auto est = estimate(agents, res.labelled, 0);
            m0.noise_rate = est.degenerate ? 0.0 : est.rate;
            m0.noise_degenerate = est.degenerate;
            m0.events.push_back("noise rate estimated after warmup");
            return to_percent(est);
        };
    } else {
        m0.noise_rate = gcfg.noise_percent / 100.0;
    }
    trainer.train(res.labelled, cfg.pretrain_iterations, th);

    m0.labelled_size = res.labelled.size();
    m0.threshold = label.threshold;
    m0.classes = res.labelled.num_classes;
    if (hooks.on_loop) hooks.on_loop(m0, LoopView{0, trainer.agents(), res.labelled, {}, {}});
    res.loops.push_back(m0);

    // Later loops continue from the current parameters; warmup only protects
    // freshly initialized agents.
    GroupTrainer& loop_trainer = trainer;
    loop_trainer.set_warmup_fraction(cfg.loop_warmup_fraction);

    std::size_t next = 0;
    int stalled = 0;
    for (int t = 1; next < parts.size(); ++t) {
        LoopMetrics m;
        m.t = t;
        m.threshold = label.threshold;
        LoopView view{t, loop_trainer.agents(), res.labelled, {}, {}};
        std::size_t accepted = 0, total = 0;
        for (int k = 0; k < label.parts_per_loop && next < parts.size(); ++k, ++next) {
            const auto& part = parts[next];
            LabelResult lr;
            if (cfg.open_set.enabled && cfg.open_set.prototypes) {
                auto os = label_open_set(loop_trainer.agents(), part, cfg);
                m.new_identities += os.new_identities;
                m.prototype_norm_error = std::max(m.prototype_norm_error, os.norm_error);
                lr = std::move(os.result);
            } else {
                lr = label_part(loop_trainer.agents(), part, label, cfg.group.margin.scale);
            }
            res.labelled = update_labelled(res.labelled, part, lr, t);
            res.dropped.insert(res.dropped.end(), lr.dropped.begin(), lr.dropped.end());
            accepted += lr.accepted.size();
            total += part.size();
            m.dropped += lr.dropped.size();
            view.parts.push_back(next);
            view.assigned.push_back(std::move(lr.assigned));
        }
        m.accepted = accepted;
        m.confident_fraction = total == 0 ? 0.0 : static_cast<double>(accepted) / static_cast<double>(total);

        const auto est = estimate(loop_trainer.agents(), res.labelled, t);
        m.noise_rate = est.degenerate ? 0.0 : est.rate;
        m.noise_degenerate = est.degenerate;
        loop_trainer.set_noise_percent(to_percent(est));

        TrainHooks lh;
        if (hooks.on_iteration) lh.on_iteration = [&, t](const IterationLog& l) { hooks.on_iteration(l, t); };
        loop_trainer.train(res.labelled, cfg.loop_iterations, lh);

        m.labelled_size = res.labelled.size();
        m.classes = res.labelled.num_classes;
        if (hooks.on_loop) hooks.on_loop(m, view);

        stalled = accepted == 0 ? stalled + 1 : 0;
        if (stalled >= label.stall_loops && next < parts.size()) {
            const double lowered = std::max(label.threshold_floor, label.threshold - label.lower_step);
            if (lowered < label.threshold) {
                m.events.push_back("threshold lowered to " + std::to_string(lowered));
                label.threshold = lowered;
            }
            stalled = 0;
        }
        res.loops.push_back(std::move(m));
    }
    res.agents = std::move(loop_trainer.agents());
    return res;
}

}  // namespace cotrain
