#pragma once

// Runners shared by the command line and the acceptance suite. Each takes a
// resolved configuration and, optionally, a run directory to write artifacts to.

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "cotrain/config.hpp"
#include "cotrain/eval.hpp"
#include "cotrain/groupnet.hpp"
#include "cotrain/noise_estimator.hpp"
#include "cotrain/nroll.hpp"

namespace cotrain {

/// runs/<name>/ and the files inside it.
class RunDir {
public:
    RunDir(const std::filesystem::path& root, const std::string& name);

    const std::filesystem::path& path() const { return path_; }
    void write_text(const std::string& file, const std::string& text) const;
    void write_config(const ExperimentConfig& cfg) const { write_text("config.json", config_to_json(cfg)); }
    /// Appends one line to iterations.jsonl.
    void log_iteration(const std::string& json_line);
    void save_agents(const std::vector<Agent>& agents, const MarginConfig& margin,
                     const std::string& subdir = "") const;

private:
    std::filesystem::path path_;
    std::ofstream iterations_;
};

struct TrainData {
    LabelledSet train;  // with injected noise
    LabelledSet test;   // clean, possibly empty
};

struct SplitData {
    LabelledSet seed;   // labelled part with injected noise
    std::vector<UnlabelledPart> parts;
    LabelledSet test;
    SplitResult split;  // manifest; `labelled` holds the clean labels
};

/// Clean train and test sets from the data spec.
TrainData load_clean_data(const ExperimentConfig& cfg);
TrainData prepare_train_data(const ExperimentConfig& cfg);
/// Splits first, then corrupts the labelled part only.
SplitData prepare_split_data(const ExperimentConfig& cfg);

/// Mean over post-warmup iterations; -1 without ground truth.
struct FilterStats {
    double batch_noisy = -1.0;
    double hc_noisy = -1.0;
};
FilterStats filter_stats(const std::vector<IterationLog>& logs);

struct TrainOutcome {
    std::vector<Agent> agents;
    std::vector<IterationLog> logs;
    EvalReport report;                    // designated agent on the test set
    std::optional<double> baseline_accuracy;
    FilterStats filter;
};

TrainOutcome run_train(const ExperimentConfig& cfg, RunDir* run = nullptr);

/// Single-agent Arc-softmax model with the same data and schedule.
double run_baseline(const ExperimentConfig& cfg);

struct NrollOutcome {
    NrollResult result;
    EvalReport report;
};

NrollOutcome run_nroll_experiment(const ExperimentConfig& cfg, RunDir* run = nullptr);

/// loops.csv text for loops t >= 1.
std::string loops_csv(const std::vector<LoopMetrics>& loops);

struct NoiseOutcome {
    NoiseEstimate estimate;
    std::vector<double> similarities;
    double true_rate = -1.0;  // -1 without ground truth
};

/// Embeds with `embedder` when given, otherwise trains the group first and uses
/// the designated agent.
NoiseOutcome run_estimate_noise(const ExperimentConfig& cfg, const Agent* embedder, RunDir* run = nullptr);

EvalReport run_evaluate(const ExperimentConfig& cfg, const Agent& agent, RunDir* run = nullptr);

/// Writes train.csv, test.csv and the split manifest into `out`.
void run_gen_data(const ExperimentConfig& cfg, const std::filesystem::path& out);

}  // namespace cotrain
