#pragma once

// Multi-agent noise-robust training. Each iteration every agent ranks a shared
// mini-batch by loss; the highest-loss r% per agent is discarded (LC), the
// samples kept by every agent form the consensus set (HC), and each agent's
// remaining kept samples (MC) are broadcast to `degree` peers around a circle.
// Recipients keep the most-recommended MC samples and train on HC with
// MV-softmax plus the selected MC with Arc-softmax.

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cotrain/datasets.hpp"
#include "cotrain/learner.hpp"

namespace cotrain {

struct GroupConfig {
    int agents = 4;
    int degree = 3;  // exchange degree, 1..agents-1
    bool shuffle = true;
    double noise_percent = 0.0;
    int batch_size = 128;
    MarginConfig margin;
    SgdConfig sgd;
    std::vector<double> lr_decay_fractions{0.6, 0.8};  // overrides sgd.decay_iterations when non-empty
    double warmup_fraction = 0.1;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Positions refer to columns of the current mini-batch. All sets are sorted.
struct BatchPartition {
    std::vector<int> hc;
    std::vector<std::vector<int>> lc;  // per agent
    std::vector<std::vector<int>> mc;  // per agent
};

/// floor(r/100 * B).
int low_confidence_count(double r_percent, int batch);

/// `losses` is agents x batch.
BatchPartition partition_batch(const Matrix& losses, double r_percent);

/// Empty string when `p` tiles a batch of `batch` samples correctly for `r_percent`.
std::string check_partition(const BatchPartition& p, int batch, double r_percent);

struct ExchangePlan {
    std::vector<int> seat;                     // seat[position] = agent
    std::vector<std::vector<int>> recipients;  // per agent, in circle order

    std::vector<int> senders_of(int agent) const;
};

/// Agent at position p sends to positions p+1 .. p+degree (mod M).
ExchangePlan plan_from_seating(std::vector<int> seat, int degree);

/// Identity seating unless shuffling with degree < M-1, where every seating
/// yields the same plan and no permutation is drawn.
ExchangePlan make_exchange_plan(const GroupConfig& cfg, std::mt19937_64& rng);

using Recommendations = std::vector<std::pair<int, std::vector<int>>>;  // (sender, batch positions)

/// Greedy pick of received MC: most recommendation sources first, then lower
/// mean loss among the recommending senders, then lower position.
std::vector<int> select_received_mc(const Recommendations& received, std::size_t own_mc_size,
                                    const Matrix& losses);

struct GroupLoss {
    double loss = 0.0;
    std::size_t effective = 0;  // |HC| + |MC_ms|
    AgentGrads grads;
    bool empty() const { return effective == 0; }
};

/// Balanced loss over HC (MV-softmax) and MC_ms (Arc-softmax), normalized by
/// |HC| + |MC_ms|. `x` holds the whole batch; hc/mc are its columns.
GroupLoss group_loss(const Agent& agent, const Matrix& x, std::span<const int> labels,
                     std::span<const int> hc, std::span<const int> mc, const MarginConfig& cfg);

/// Same as above on an already computed forward pass and cosine matrix.
GroupLoss group_loss(const Agent& agent, const EncoderTrace& trace, const Matrix& cosines,
                     std::span<const int> labels, std::span<const int> hc, std::span<const int> mc,
                     const MarginConfig& cfg);

struct IterationLog {
    long iteration = 0;
    bool warmup = false;
    double noise_percent = 0.0;
    std::vector<double> mean_loss;       // per agent, training objective
    std::size_t hc_size = 0;
    std::vector<std::size_t> mc_sizes;   // per agent, own MC
    std::vector<std::size_t> mc_selected;  // per agent, |MC_ms|
    std::vector<int> permutation;        // seating used
    std::vector<int> skipped;            // 1 where the effective batch was empty
    double batch_noisy_fraction = -1.0;  // -1 when ground truth is unknown
    double hc_noisy_fraction = -1.0;

    std::string to_json() const;
};

struct TrainHooks {
    /// Called once when warmup ends; a returned value replaces the noise rate (percent).
    std::function<std::optional<double>(const std::vector<Agent>&)> after_warmup;
    std::function<void(const IterationLog&)> on_iteration;
    std::function<void(const BatchPartition&, std::span<const int> batch)> on_partition;
};

/// Epoch-wise shuffled mini-batch sampler.
class BatchSampler {
public:
    explicit BatchSampler(std::size_t dataset_size) : size_(dataset_size) {}
    std::vector<int> next(int batch_size, std::mt19937_64& rng);

private:
    std::size_t size_;
    std::vector<int> order_;
    std::size_t pos_ = 0;
};

/// Owns the agents and the single RNG stream that drives batch sampling and
/// seat shuffling. Each train() call restarts the learning-rate schedule and
/// momentum; parameters carry over between calls.
class GroupTrainer {
public:
    GroupTrainer(GroupConfig cfg, std::vector<Agent> agents);

    std::vector<IterationLog> train(const LabelledSet& data, long iterations, const TrainHooks& hooks = {});

    const GroupConfig& config() const { return cfg_; }
    double noise_percent() const { return cfg_.noise_percent; }
    void set_noise_percent(double r);
    void set_warmup_fraction(double w);
    const std::vector<Agent>& agents() const { return agents_; }
    std::vector<Agent>& agents() { return agents_; }

private:
    GroupConfig cfg_;
    std::vector<Agent> agents_;
    std::mt19937_64 rng_;
};

/// Agents with distinct seeds derived from `seed`.
std::vector<Agent> make_agents(const EncoderArch& arch, int classes, int count, std::uint64_t seed);

/// One-shot group training; agents are updated in place.
std::vector<IterationLog> gn_train(std::vector<Agent>& agents, const LabelledSet& data,
                                   const GroupConfig& cfg, long iterations, const TrainHooks& hooks = {});

/// Single-agent Arc-softmax training on full mini-batches.
std::vector<IterationLog> train_baseline(Agent& agent, const LabelledSet& data, const GroupConfig& cfg,
                                         long iterations);

}  // namespace cotrain
