#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cotrain/datasets.hpp"
#include "cotrain/eval.hpp"
#include "cotrain/groupnet.hpp"
#include "cotrain/nroll.hpp"

namespace cotrain {

struct DataSpec {
    std::string source = "synthetic";  // synthetic | csv
    SyntheticSpec synthetic{50, 60, 20, 32, 0.15, 0};
    std::string train_csv;
    std::string test_csv;
};

/// Everything a run needs. Seeds inside the nested structs are ignored; every
/// random stream is derived from `seed` through run_seeds().
struct ExperimentConfig {
    std::string name = "default";
    std::uint64_t seed = 0;
    DataSpec data;
    double noise_rate = 0.5;
    NoiseMode noise_mode = NoiseMode::Symmetric;
    int parts = 5;  // S + 1
    EncoderArch arch;
    GroupConfig group;  // noise_percent < 0: estimate once warmup ends
    long iterations = 1500;
    bool baseline = true;
    LabelConfig label;
    long pretrain_iterations = 1500;
    long loop_iterations = 1500;
    double loop_warmup_fraction = 0.0;
    NoiseConfig estimator;
    OpenSetConfig open_set;
    EvalSpec eval;

    ExperimentConfig();

    void validate() const;
    NrollConfig nroll_config() const;
};

/// Seeds for the independent random streams of a run.
struct RunSeeds {
    std::uint64_t data, noise, split, agents, baseline, estimator, eval;
};
RunSeeds run_seeds(std::uint64_t seed);

/// Parses JSON text over the defaults; unknown keys and bad values throw ValidationError.
ExperimentConfig parse_config(const std::string& json_text, const std::vector<std::string>& overrides = {});
ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

/// Fully resolved configuration as pretty JSON; parse_config(to_json(c)) == c.
std::string config_to_json(const ExperimentConfig& cfg);

/// Default configuration as JSON text.
std::string default_config_json();

}  // namespace cotrain
