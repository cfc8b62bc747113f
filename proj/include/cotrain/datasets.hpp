#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

#include "cotrain/learner.hpp"

namespace cotrain {

/// Provenance value of samples that came with the seed labelled set.
/// Pseudo-labelled samples carry the loop index t >= 1 that produced them.
inline constexpr int kSeedProvenance = 0;
inline constexpr int kNoLabel = -1;

/// Labelled samples stored column-wise. `gt_labels` holds the clean label when
/// known (synthetic data, noise injection) and kNoLabel otherwise.
struct LabelledSet {
    Matrix features;  // d x N
    std::vector<long> ids;
    std::vector<int> labels;
    std::vector<int> gt_labels;
    std::vector<int> provenance;
    int num_classes = 0;

    std::size_t size() const { return ids.size(); }
    int dim() const { return static_cast<int>(features.rows()); }
    bool empty() const { return ids.empty(); }

    /// Clean label if known, otherwise the stored label.
    int true_label(std::size_t i) const { return gt_labels[i] == kNoLabel ? labels[i] : gt_labels[i]; }
    bool is_noisy(std::size_t i) const { return gt_labels[i] != kNoLabel && gt_labels[i] != labels[i]; }

    Matrix gather(std::span<const int> indices) const;
    LabelledSet subset(std::span<const int> indices) const;
    std::vector<int> indices_with_provenance(int tag) const;
    /// Checks ids unique, labels in range, shapes consistent. Throws ValidationError.
    void validate() const;
};

/// Unlabelled samples. The hidden label is only reachable through GroundTruth,
/// so nothing on the training side can read it.
class UnlabelledPart {
public:
    UnlabelledPart() = default;
    UnlabelledPart(Matrix features, std::vector<long> ids, std::vector<int> hidden_labels);

    std::size_t size() const { return ids_.size(); }
    const Matrix& features() const { return features_; }
    const std::vector<long>& ids() const { return ids_; }

private:
    friend class GroundTruth;
    Matrix features_;
    std::vector<long> ids_;
    std::vector<int> hidden_;
};

/// Evaluation-only access to hidden labels.
class GroundTruth {
public:
    static std::span<const int> labels(const UnlabelledPart& part) { return part.hidden_; }
};

struct SyntheticSpec {
    int classes = 50;
    int per_class = 60;
    int test_per_class = 0;
    int dim = 32;
    double spread = 0.15;
    std::uint64_t seed = 0;
};

struct SyntheticData {
    LabelledSet train;
    LabelledSet test;  // same prototypes, ids continue after train
    Matrix prototypes; // d x C
};

SyntheticData gen_synthetic(const SyntheticSpec& spec);
LabelledSet gen_synthetic(int classes, int per_class, int dim, double spread, std::uint64_t seed);
/// Samples around caller-supplied prototype columns.
LabelledSet gen_from_prototypes(const Matrix& prototypes, int per_class, double spread, std::uint64_t seed);

enum class NoiseMode { Symmetric, PairFlip };

LabelledSet inject_noise(const LabelledSet& set, double rate, NoiseMode mode, std::uint64_t seed);

struct SplitResult {
    LabelledSet labelled;
    std::vector<UnlabelledPart> unlabelled;
    std::vector<std::vector<long>> manifest;  // part -> ids, part 0 labelled
};

/// Per-class stratified split into `parts` parts, remainders round-robin.
SplitResult split_parts(const LabelledSet& set, int parts, std::uint64_t seed);

/// Open-set split: classes [0, C/2) are seen and spread over all parts; the
/// remaining classes only appear in the unlabelled parts. The labelled part's
/// class space is the seen classes.
SplitResult split_parts_open_set(const LabelledSet& set, int parts, std::uint64_t seed);

void write_csv(std::ostream& out, const LabelledSet& set);
void write_csv(const std::filesystem::path& path, const LabelledSet& set);
LabelledSet parse_csv(std::istream& in);
LabelledSet load_csv(const std::filesystem::path& path);

void write_manifest(const std::filesystem::path& path, const SplitResult& split);

}  // namespace cotrain
