#pragma once

// Noise-rate estimation from intra-class pair similarities. Clean pairs sit in
// a tight high-similarity mode, pairs touching a wrong label in a broad low
// one; a two-component 1-D Gaussian mixture separates them.

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

#include "cotrain/datasets.hpp"
#include "cotrain/learner.hpp"

namespace cotrain {

/// Similarities of up to `max_pairs` distinct same-label pairs drawn uniformly
/// from all such pairs. Throws ValidationError("no pairs") when no label has
/// two members.
std::vector<double> sample_intra_pairs(const LabelledSet& set, const EncoderParams& embedder,
                                       std::size_t max_pairs, std::mt19937_64& rng);

/// Same on precomputed unit embeddings (d_e x N, columns aligned with labels).
std::vector<double> sample_intra_pairs(const Matrix& embeddings, std::span<const int> labels,
                                       std::size_t max_pairs, std::mt19937_64& rng);

/// Total number of same-label pairs.
std::size_t count_intra_pairs(std::span<const int> labels);

struct GmmConfig {
    int max_iters = 200;
    double tol = 1e-6;
    double variance_floor = 1e-4;
};

struct GmmFit {
    double mu1 = 0.0, mu2 = 0.0;  // mu1 <= mu2
    double var1 = 0.0, var2 = 0.0;
    double w1 = 0.5, w2 = 0.5;
    int iterations = 0;
    double log_likelihood = 0.0;           // mean per sample
    std::vector<double> ll_history;        // after every EM iteration
    bool converged = false;
    bool floor_hit = false;                // some variance sits at the floor
    bool degenerate = false;               // components did not separate

    double density(double x) const;
};

/// EM on a 1-D sample. Means start at the 25th/75th percentiles with equal
/// weights and the sample variance for both components. The input is
/// processed in sorted order, so the result does not depend on its order.
/// Throws ValidationError("insufficient data") below 20 samples.
GmmFit fit_gmm2(std::vector<double> samples, const GmmConfig& cfg = {});

struct NoiseConfig {
    std::size_t max_pairs = 50000;
    double degenerate_gap = 0.05;
    /// A pair lands in the low mode when either member is mislabelled, so the
    /// low-mode weight w relates to the per-sample rate r by w = 1 - (1 - r)^2.
    /// On by default; off reports the raw low-mode weight.
    bool pair_correction = true;
    GmmConfig gmm;
    std::uint64_t seed = 0;
};

struct NoiseEstimate {
    double rate = 0.0;         // per-sample noise rate, [0, 1]
    double pair_weight = 0.0;  // weight of the smaller-mean component
    bool degenerate = false;
    std::size_t pairs = 0;
    GmmFit fit;
};

/// Interpret a fitted mixture as a noise estimate.
NoiseEstimate noise_from_fit(const GmmFit& fit, std::size_t pairs, const NoiseConfig& cfg);

NoiseEstimate estimate_noise_rate(const LabelledSet& set, const EncoderParams& embedder,
                                  const NoiseConfig& cfg);

/// Counts over `bins` equal bins spanning [-1, 1]; pairs of (bin center, count).
std::vector<std::pair<double, std::size_t>> similarity_histogram(const std::vector<double>& sims,
                                                                  int bins = 100);

}  // namespace cotrain
