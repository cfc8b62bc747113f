#pragma once

// The learn-label loop: train the group on the labelled set, pseudo-label the
// next unlabelled part where some agent is confident enough, merge, re-estimate
// the noise rate and train again until no parts remain.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cotrain/datasets.hpp"
#include "cotrain/groupnet.hpp"
#include "cotrain/learner.hpp"
#include "cotrain/noise_estimator.hpp"

namespace cotrain {

enum class Confidence { Posterior, Cosine, ScaledLogit };

Confidence parse_confidence(const std::string& name);
std::string to_string(Confidence c);

struct LabelConfig {
    double threshold = 0.8;
    Confidence confidence = Confidence::Posterior;
    int parts_per_loop = 1;
    // Stall rule: after `stall_loops` consecutive loops that accept nothing
    // while parts remain, lower the threshold by `lower_step`, not below the floor.
    int stall_loops = 2;
    double lower_step = 0.05;
    double threshold_floor = 0.5;

    void validate() const;
};

/// Per-agent confidences for every column of `x`, C x N.
Matrix confidence_matrix(const Agent& agent, const Matrix& x, Confidence kind, double scale);

struct LabelResult {
    std::vector<int> assigned;        // per column: label or kNoLabel
    std::vector<double> confidence;   // per column: best confidence
    std::vector<int> accepted;        // accepted columns, ascending
    std::vector<long> dropped;        // ids of dropped columns
    double confident_fraction = 0.0;
};

/// Best confidence over all agents and classes; accepted when >= threshold.
LabelResult label_part(const std::vector<Agent>& agents, const Matrix& features, std::span<const long> ids,
                       const LabelConfig& cfg, double scale);
LabelResult label_part(const std::vector<Agent>& agents, const UnlabelledPart& part, const LabelConfig& cfg,
                       double scale);

/// D_l with the accepted samples appended under provenance `loop`. Throws
/// ValidationError on an id already present.
LabelledSet update_labelled(const LabelledSet& labelled, const LabelledSet& pseudo, int loop);
LabelledSet update_labelled(const LabelledSet& labelled, const UnlabelledPart& part, const LabelResult& result,
                            int loop);

/// New-identity prototypes for open-set labelling.
class PrototypeBank {
public:
    explicit PrototypeBank(double ema = 0.9) : ema_(ema) {}

    std::size_t size() const { return prototypes_.size(); }
    const Vector& prototype(std::size_t k) const { return prototypes_[k]; }
    int count(std::size_t k) const { return counts_[k]; }
    double ema() const { return ema_; }

    /// Starts a new identity from a unit feature; returns its index.
    std::size_t add(const Vector& feature);
    /// F <- ema F + (1 - ema) f, then renormalized.
    void update(std::size_t k, const Vector& feature);
    /// Largest | ||F|| - 1 | over the bank.
    double max_norm_error() const;
    void clear();

private:
    double ema_;
    std::vector<Vector> prototypes_;
    std::vector<int> counts_;
};

struct OpenSetAssignment {
    enum class Kind { Known, NewIdentity, Dropped };
    Kind kind = Kind::Dropped;
    int label = kNoLabel;   // class id for Known, bank index for NewIdentity
    bool created = false;   // this sample started the identity
    double similarity = 0.0;
};

/// Below `tau_new` against every class row of the embedding agent and every
/// prototype: new identity. Nearest is a prototype: EMA update and join it.
/// Otherwise the confidence rule over all agents decides between a known class
/// and dropping.
OpenSetAssignment open_set_assign(const std::vector<Agent>& agents, const Vector& x, PrototypeBank& bank,
                                  double tau_new, const LabelConfig& cfg, double scale, int embed_agent = 0);

struct OpenSetConfig {
    bool enabled = false;
    bool prototypes = true;  // false: plain confidence labelling over seed classes
    double tau_new = 0.5;
    double ema = 0.9;
    int min_identity_size = 2;
};

struct NrollConfig {
    GroupConfig group;  // noise_percent < 0: estimate once warmup ends
    EncoderArch arch;
    LabelConfig label;
    NoiseConfig estimator;
    OpenSetConfig open_set;
    long pretrain_iterations = 1500;
    long loop_iterations = 1500;
    double loop_warmup_fraction = 0.0;
    std::uint64_t seed = 0;

    void validate() const;
};

struct LoopMetrics {
    int t = 0;
    std::size_t labelled_size = 0;
    double noise_rate = 0.0;  // estimate the loop trained with
    bool noise_degenerate = false;
    double threshold = 0.0;
    double confident_fraction = 0.0;
    std::size_t accepted = 0, dropped = 0, new_identities = 0;
    double prototype_norm_error = 0.0;  // largest | ||F|| - 1 | seen while labelling
    int classes = 0;
    double pseudo_precision = -1.0;  // filled by observers, -1 when unknown
    double test_accuracy = -1.0;
    double verification_accuracy = -1.0;
    double rank1 = -1.0;
    std::vector<std::string> events;
};

/// What an observer sees at the end of a loop.
struct LoopView {
    int t = 0;
    const std::vector<Agent>& agents;
    const LabelledSet& labelled;
    std::vector<std::size_t> parts;              // indices consumed this loop
    std::vector<std::vector<int>> assigned;      // per consumed part, label per column or kNoLabel
};

struct NrollHooks {
    std::function<void(const IterationLog&, int loop)> on_iteration;
    std::function<void(LoopMetrics&, const LoopView&)> on_loop;
};

struct NrollResult {
    std::vector<Agent> agents;
    LabelledSet labelled;
    std::vector<LoopMetrics> loops;  // loops[0] is pretraining
    std::vector<long> dropped;
};

NrollResult run_nroll(const NrollConfig& cfg, const LabelledSet& seed_set, const std::vector<UnlabelledPart>& parts,
                      const NrollHooks& hooks = {});

}  // namespace cotrain
