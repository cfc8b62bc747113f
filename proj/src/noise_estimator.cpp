#include "cotrain/noise_estimator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <ranges>
#include <unordered_set>

#include "cotrain/errors.hpp"

namespace cotrain {

namespace {

std::size_t choose2(std::size_t n) { return n < 2 ? 0 : n * (n - 1) / 2; }

double log_normal(double x, double mu, double var) {
    const double d = x - mu;
    return -0.5 * (std::log(2.0 * std::numbers::pi * var) + d * d / var);
}

double log_add(double a, double b) {
    const double hi = std::max(a, b);
    if (hi == -std::numeric_limits<double>::infinity()) return hi;
    return hi + std::log(std::exp(a - hi) + std::exp(b - hi));
}

double percentile(const std::vector<double>& sorted, double q) {
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}

struct Params {
    double mu[2], var[2], w[2];
};

double mean_log_likelihood(const std::vector<double>& x, const Params& p) {
    const double lw0 = std::log(p.w[0]), lw1 = std::log(p.w[1]);
    double total = 0.0;
    for (double v : x) total += log_add(lw0 + log_normal(v, p.mu[0], p.var[0]), lw1 + log_normal(v, p.mu[1], p.var[1]));
    return total / static_cast<double>(x.size());
}

}  // namespace

std::size_t count_intra_pairs(std::span<const int> labels) {
    std::map<int, std::size_t> counts;
    for (int y : labels) ++counts[y];
    std::size_t total = 0;
    for (const auto& [y, n] : counts) total += choose2(n);
    return total;
}

std::vector<double> sample_intra_pairs(const Matrix& embeddings, std::span<const int> labels,
                                       std::size_t max_pairs, std::mt19937_64& rng) {
    std::map<int, std::vector<int>> members;
    for (std::size_t i = 0; i < labels.size(); ++i) members[labels[i]].push_back(static_cast<int>(i));

    std::vector<const std::vector<int>*> groups;
    std::vector<std::size_t> offsets{0};
    for (const auto& [y, idx] : members) {
        if (idx.size() < 2) continue;
        groups.push_back(&idx);
        offsets.push_back(offsets.back() + choose2(idx.size()));
    }
    const std::size_t total = offsets.back();
    if (total == 0) throw ValidationError("no pairs");

    std::vector<std::size_t> chosen;
    if (total <= max_pairs) {
        chosen.resize(total);
        std::iota(chosen.begin(), chosen.end(), std::size_t{0});
    } else {
        // Floyd's sampling of max_pairs distinct indices
        std::unordered_set<std::size_t> picked;
        picked.reserve(max_pairs * 2);
        for (std::size_t j = total - max_pairs; j < total; ++j) {
            const std::size_t t = std::uniform_int_distribution<std::size_t>(0, j)(rng);
            picked.insert(picked.contains(t) ? j : t);
        }
        chosen.assign(picked.begin(), picked.end());
        std::ranges::sort(chosen);
    }

    std::vector<double> sims;
    sims.reserve(chosen.size());
    for (std::size_t k : chosen) {
        const auto g = static_cast<std::size_t>(std::ranges::upper_bound(offsets, k) - offsets.begin()) - 1;
        const auto& idx = *groups[g];
        std::size_t q = k - offsets[g];
        std::size_t i = 0;
        // row i pairs with i+1 .. n-1
        while (q >= idx.size() - 1 - i) {
            q -= idx.size() - 1 - i;
            ++i;
        }
        const std::size_t j = i + 1 + q;
        const double c = embeddings.col(idx[i]).dot(embeddings.col(idx[j]));
        sims.push_back(std::clamp(c, -1.0, 1.0));
    }
    return sims;
}

std::vector<double> sample_intra_pairs(const LabelledSet& set, const EncoderParams& embedder,
                                       std::size_t max_pairs, std::mt19937_64& rng) {
    if (count_intra_pairs(set.labels) == 0) throw ValidationError("no pairs");
    return sample_intra_pairs(embed_batch(embedder, set.features), set.labels, max_pairs, rng);
}

double GmmFit::density(double x) const {
    return w1 * std::exp(log_normal(x, mu1, var1)) + w2 * std::exp(log_normal(x, mu2, var2));
}

GmmFit fit_gmm2(std::vector<double> x, const GmmConfig& cfg) {
    if (x.size() < 20) throw ValidationError("insufficient data");
    for (double v : x)
        if (!std::isfinite(v)) throw ValidationError("non-finite similarity");
    std::ranges::sort(x);
    const auto n = static_cast<double>(x.size());

    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var = std::max(var / n, cfg.variance_floor);

    Params p{{percentile(x, 0.25), percentile(x, 0.75)}, {var, var}, {0.5, 0.5}};
    GmmFit fit;
    double ll = mean_log_likelihood(x, p);
    fit.ll_history.push_back(ll);

    std::vector<double> r0(x.size());
    for (int it = 0; it < cfg.max_iters; ++it) {
        // E-step
        const double lw0 = std::log(p.w[0]), lw1 = std::log(p.w[1]);
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double a = lw0 + log_normal(x[i], p.mu[0], p.var[0]);
            const double b = lw1 + log_normal(x[i], p.mu[1], p.var[1]);
            r0[i] = std::exp(a - log_add(a, b));
        }
        // M-step
        double n0 = 0.0, s0 = 0.0, s1 = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            n0 += r0[i];
            s0 += r0[i] * x[i];
            s1 += (1.0 - r0[i]) * x[i];
        }
        const double n1 = n - n0;
        const double nk[2] = {n0, n1};
        const double sk[2] = {s0, s1};
        for (int k = 0; k < 2; ++k) {
            if (nk[k] <= 1e-12) continue;  // empty component keeps its shape
            p.mu[k] = sk[k] / nk[k];
        }
        double v0 = 0.0, v1 = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            v0 += r0[i] * (x[i] - p.mu[0]) * (x[i] - p.mu[0]);
            v1 += (1.0 - r0[i]) * (x[i] - p.mu[1]) * (x[i] - p.mu[1]);
        }
        if (n0 > 1e-12) p.var[0] = std::max(v0 / n0, cfg.variance_floor);
        if (n1 > 1e-12) p.var[1] = std::max(v1 / n1, cfg.variance_floor);
        p.w[0] = std::clamp(n0 / n, 1e-300, 1.0);
        p.w[1] = std::clamp(n1 / n, 1e-300, 1.0);

        const double next = mean_log_likelihood(x, p);
        fit.ll_history.push_back(next);
        fit.iterations = it + 1;
        const bool done = std::abs(next - ll) < cfg.tol;
        ll = next;
        if (done) {
            fit.converged = true;
            break;
        }
    }

    int lo = p.mu[0] <= p.mu[1] ? 0 : 1;
    int hi = 1 - lo;
    fit.mu1 = p.mu[lo];
    fit.mu2 = p.mu[hi];
    fit.var1 = p.var[lo];
    fit.var2 = p.var[hi];
    fit.w1 = p.w[lo] / (p.w[0] + p.w[1]);
    fit.w2 = 1.0 - fit.w1;
    fit.log_likelihood = ll;
    const double eps = cfg.variance_floor * (1.0 + 1e-9);
    fit.floor_hit = fit.var1 <= eps || fit.var2 <= eps;
    fit.degenerate = fit.mu2 - fit.mu1 < std::sqrt(cfg.variance_floor) || (fit.var1 <= eps && fit.var2 <= eps);
    return fit;
}

NoiseEstimate noise_from_fit(const GmmFit& fit, std::size_t pairs, const NoiseConfig& cfg) {
    NoiseEstimate est;
    est.fit = fit;
    est.pairs = pairs;
    if (fit.degenerate || fit.mu2 - fit.mu1 < cfg.degenerate_gap) {
        est.degenerate = true;
        return est;
    }
    est.pair_weight = fit.w1;
    est.rate = cfg.pair_correction ? 1.0 - std::sqrt(std::max(0.0, 1.0 - fit.w1)) : fit.w1;
    est.rate = std::clamp(est.rate, 0.0, 1.0);
    return est;
}

NoiseEstimate estimate_noise_rate(const LabelledSet& set, const EncoderParams& embedder,
                                  const NoiseConfig& cfg) {
    std::mt19937_64 rng(cfg.seed);
    const auto sims = sample_intra_pairs(set, embedder, cfg.max_pairs, rng);
    return noise_from_fit(fit_gmm2(sims, cfg.gmm), sims.size(), cfg);
}

std::vector<std::pair<double, std::size_t>> similarity_histogram(const std::vector<double>& sims, int bins) {
    if (bins < 1) throw ValidationError("histogram needs at least one bin");
    std::vector<std::pair<double, std::size_t>> out(static_cast<std::size_t>(bins));
    const double width = 2.0 / bins;
    for (int b = 0; b < bins; ++b) out[static_cast<std::size_t>(b)] = {-1.0 + (b + 0.5) * width, 0};
    for (double s : sims) {
        int b = static_cast<int>(std::floor((std::clamp(s, -1.0, 1.0) + 1.0) / width));
        out[static_cast<std::size_t>(std::clamp(b, 0, bins - 1))].second++;
    }
    return out;
}

}  // namespace cotrain
