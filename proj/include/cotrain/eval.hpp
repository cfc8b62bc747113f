#pragma once

#include <random>
#include <span>
#include <string>
#include <vector>

#include "cotrain/datasets.hpp"
#include "cotrain/learner.hpp"

namespace cotrain {

/// Fraction of columns whose highest-cosine class equals the stored label.
double classification_accuracy(const Agent& agent, const LabelledSet& set);

struct VerificationPair {
    int a = 0, b = 0;
    bool same = false;
};

/// Balanced same/different pairs drawn from `labels`; `count` pairs of each kind
/// when possible.
std::vector<VerificationPair> make_verification_pairs(std::span<const int> labels, std::size_t count,
                                                      std::mt19937_64& rng);

struct RocPoint {
    double threshold = 0.0;  // scores >= threshold are called "same"
    double fpr = 0.0;
    double tpr = 0.0;
};

struct VerificationResult {
    double accuracy = 0.0;
    double threshold = 0.0;
    std::vector<RocPoint> roc;  // fpr and tpr non-decreasing
    std::vector<std::pair<double, double>> tpr_at_fpr;  // (fpr target, tpr)
};

inline const std::vector<double> kFprPoints{1e-1, 1e-2};

/// Threshold sweep over the observed scores. Needs at least 10 pairs of each
/// polarity; throws ValidationError otherwise.
VerificationResult verification_accuracy(std::span<const double> scores, std::span<const char> same,
                                         const std::vector<double>& fpr_points = kFprPoints);

/// Cosine scores of `pairs` (column indices into `features`) under `embedder`.
VerificationResult verification_accuracy(const EncoderParams& embedder, const Matrix& features,
                                         const std::vector<VerificationPair>& pairs,
                                         const std::vector<double>& fpr_points = kFprPoints);

/// Fraction of probes whose most similar gallery column (ties to the lower
/// index) shares the probe's identity. Columns are unit embeddings.
double rank1(const Matrix& gallery, std::span<const int> gallery_ids, const Matrix& probes,
             std::span<const int> probe_ids);

/// First `per_class` samples of every label go to the gallery, the rest are probes.
struct GalleryProbeSplit {
    std::vector<int> gallery, probes;
};
GalleryProbeSplit gallery_probe_split(std::span<const int> labels, int per_class);

/// rank1 of `set` under `embedder` with the split above.
double rank1(const EncoderParams& embedder, const LabelledSet& set, int gallery_per_class);

struct PseudoLabelScore {
    double precision = 1.0;
    double coverage = 0.0;
    std::size_t accepted = 0, correct = 0, total = 0;
    bool empty = true;  // nothing accepted; precision reported as 1
};

/// `assigned[i]` is the label given to sample i or kNoLabel when dropped.
PseudoLabelScore pseudo_label_accuracy(std::span<const int> assigned, std::span<const int> truth);

struct EvalReport {
    double test_accuracy = 0.0;
    VerificationResult verification;
    double rank1 = 0.0;
    PseudoLabelScore pseudo;
    int agent = 0;

    std::string to_json() const;
};

struct EvalSpec {
    int agent = 0;
    std::size_t verification_pairs = 2000;
    int gallery_per_class = 1;
    std::uint64_t seed = 0;
};

EvalReport evaluate(const Agent& agent, const LabelledSet& test, const EvalSpec& spec);

}  // namespace cotrain
