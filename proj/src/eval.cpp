#include "cotrain/eval.hpp"

#include <algorithm>
#include <map>
#include <numeric>

#include <json.hpp>

#include "cotrain/errors.hpp"

namespace cotrain {

double classification_accuracy(const Agent& agent, const LabelledSet& set) {
    if (set.empty()) return 0.0;
    const Matrix cos = batch_cosines(agent, set.features);
    std::size_t ok = 0;
    for (Eigen::Index i = 0; i < cos.cols(); ++i) {
        Eigen::Index k = 0;
        cos.col(i).maxCoeff(&k);
        ok += static_cast<int>(k) == set.labels[static_cast<std::size_t>(i)];
    }
    return static_cast<double>(ok) / static_cast<double>(set.size());
}

std::vector<VerificationPair> make_verification_pairs(std::span<const int> labels, std::size_t count,
                                                      std::mt19937_64& rng) {
    std::map<int, std::vector<int>> members;
    for (std::size_t i = 0; i < labels.size(); ++i) members[labels[i]].push_back(static_cast<int>(i));
    std::vector<const std::vector<int>*> multi;
    for (const auto& [y, idx] : members)
        if (idx.size() >= 2) multi.push_back(&idx);
    if (multi.empty() || members.size() < 2) throw ValidationError("need two classes and a repeated class for pairs");

    std::vector<VerificationPair> out;
    out.reserve(2 * count);
    const int n = static_cast<int>(labels.size());
    std::uniform_int_distribution<int> any(0, n - 1);
    for (std::size_t k = 0; k < count; ++k) {
        const auto& g = *multi[std::uniform_int_distribution<std::size_t>(0, multi.size() - 1)(rng)];
        const int i = std::uniform_int_distribution<int>(0, static_cast<int>(g.size()) - 1)(rng);
        int j = std::uniform_int_distribution<int>(0, static_cast<int>(g.size()) - 2)(rng);
        if (j >= i) ++j;
        out.push_back({g[static_cast<std::size_t>(i)], g[static_cast<std::size_t>(j)], true});
        int a = any(rng), b = any(rng);
        while (labels[static_cast<std::size_t>(a)] == labels[static_cast<std::size_t>(b)]) b = any(rng);
        out.push_back({a, b, false});
    }
    return out;
}

VerificationResult verification_accuracy(std::span<const double> scores, std::span<const char> same,
                                         const std::vector<double>& fpr_points) {
    if (scores.size() != same.size()) throw ValidationError("scores and pair labels differ in length");
    const auto pos = static_cast<std::size_t>(std::count(same.begin(), same.end(), char{1}));
    const std::size_t neg = same.size() - pos;
    if (pos < 10 || neg < 10) throw ValidationError("need at least 10 pairs of each polarity");

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::ranges::stable_sort(order, [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    VerificationResult out;
    double inf = std::numeric_limits<double>::infinity();
    out.roc.push_back({inf, 0.0, 0.0});
    out.accuracy = static_cast<double>(neg) / static_cast<double>(same.size());
    out.threshold = inf;
    std::size_t tp = 0, fp = 0;
    for (std::size_t k = 0; k < order.size();) {
        const double thr = scores[order[k]];
        while (k < order.size() && scores[order[k]] == thr) {
            (same[order[k]] ? tp : fp)++;
            ++k;
        }
        const double acc = static_cast<double>(tp + (neg - fp)) / static_cast<double>(same.size());
        out.roc.push_back({thr, static_cast<double>(fp) / static_cast<double>(neg),
                           static_cast<double>(tp) / static_cast<double>(pos)});
        if (acc > out.accuracy) {
            out.accuracy = acc;
            out.threshold = thr;
        }
    }
    for (double target : fpr_points) {
        double best = 0.0;
        for (const auto& p : out.roc)
            if (p.fpr <= target) best = std::max(best, p.tpr);
        out.tpr_at_fpr.emplace_back(target, best);
    }
    return out;
}

VerificationResult verification_accuracy(const EncoderParams& embedder, const Matrix& features,
                                         const std::vector<VerificationPair>& pairs,
                                         const std::vector<double>& fpr_points) {
    const Matrix emb = embed_batch(embedder, features);
    std::vector<double> scores;
    std::vector<char> same;
    for (const auto& p : pairs) {
        scores.push_back(emb.col(p.a).dot(emb.col(p.b)));
        same.push_back(p.same ? 1 : 0);
    }
    return verification_accuracy(scores, same, fpr_points);
}

double rank1(const Matrix& gallery, std::span<const int> gallery_ids, const Matrix& probes,
             std::span<const int> probe_ids) {
    if (gallery.cols() == 0) throw ValidationError("empty gallery");
    if (probes.cols() == 0) return 0.0;
    const Matrix sim = gallery.transpose() * probes;
    std::size_t ok = 0;
    for (Eigen::Index p = 0; p < sim.cols(); ++p) {
        Eigen::Index best = 0;
        sim.col(p).maxCoeff(&best);  // first maximum
        ok += gallery_ids[static_cast<std::size_t>(best)] == probe_ids[static_cast<std::size_t>(p)];
    }
    return static_cast<double>(ok) / static_cast<double>(probes.cols());
}

GalleryProbeSplit gallery_probe_split(std::span<const int> labels, int per_class) {
    GalleryProbeSplit out;
    std::map<int, int> seen;
    for (std::size_t i = 0; i < labels.size(); ++i)
        (seen[labels[i]]++ < per_class ? out.gallery : out.probes).push_back(static_cast<int>(i));
    return out;
}

double rank1(const EncoderParams& embedder, const LabelledSet& set, int gallery_per_class) {
    const auto split = gallery_probe_split(set.labels, gallery_per_class);
    const Matrix emb = embed_batch(embedder, set.features);
    Matrix g(emb.rows(), static_cast<Eigen::Index>(split.gallery.size()));
    Matrix p(emb.rows(), static_cast<Eigen::Index>(split.probes.size()));
    std::vector<int> gid, pid;
    for (std::size_t k = 0; k < split.gallery.size(); ++k) {
        g.col(static_cast<Eigen::Index>(k)) = emb.col(split.gallery[k]);
        gid.push_back(set.labels[static_cast<std::size_t>(split.gallery[k])]);
    }
    for (std::size_t k = 0; k < split.probes.size(); ++k) {
        p.col(static_cast<Eigen::Index>(k)) = emb.col(split.probes[k]);
        pid.push_back(set.labels[static_cast<std::size_t>(split.probes[k])]);
    }
    return rank1(g, gid, p, pid);
}

PseudoLabelScore pseudo_label_accuracy(std::span<const int> assigned, std::span<const int> truth) {
    if (assigned.size() != truth.size()) throw ValidationError("assignment and truth differ in length");
    PseudoLabelScore s;
    s.total = assigned.size();
    for (std::size_t i = 0; i < assigned.size(); ++i) {
        if (assigned[i] == kNoLabel) continue;
        ++s.accepted;
        s.correct += assigned[i] == truth[i];
    }
    s.empty = s.accepted == 0;
    s.precision = s.empty ? 1.0 : static_cast<double>(s.correct) / static_cast<double>(s.accepted);
    s.coverage = s.total == 0 ? 0.0 : static_cast<double>(s.accepted) / static_cast<double>(s.total);
    return s;
}

std::string EvalReport::to_json() const {
    nlohmann::json j;
    j["agent"] = agent;
    j["test_accuracy"] = test_accuracy;
    j["verification_accuracy"] = verification.accuracy;
    j["verification_threshold"] = std::isfinite(verification.threshold) ? nlohmann::json(verification.threshold)
                                                                        : nlohmann::json(nullptr);
    nlohmann::json tpr = nlohmann::json::array();
    for (const auto& [f, t] : verification.tpr_at_fpr) tpr.push_back({{"fpr", f}, {"tpr", t}});
    j["tpr_at_fpr"] = tpr;
    j["rank1"] = rank1;
    j["pseudo_precision"] = pseudo.precision;
    j["pseudo_coverage"] = pseudo.coverage;
    j["pseudo_empty"] = pseudo.empty;
    return j.dump(2);
}

EvalReport evaluate(const Agent& agent, const LabelledSet& test, const EvalSpec& spec) {
    EvalReport r;
    r.agent = spec.agent;
    r.test_accuracy = classification_accuracy(agent, test);
    std::mt19937_64 rng(spec.seed);
    const auto pairs = make_verification_pairs(test.labels, spec.verification_pairs, rng);
    r.verification = verification_accuracy(agent.encoder, test.features, pairs);
    r.rank1 = rank1(agent.encoder, test, spec.gallery_per_class);
    return r;
}

}  // namespace cotrain
