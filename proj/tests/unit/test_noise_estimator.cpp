#include <doctest.h>

#include <random>

#include "cotrain/errors.hpp"
#include "cotrain/groupnet.hpp"
#include "cotrain/noise_estimator.hpp"

using namespace cotrain;

namespace {

std::vector<double> mixture(double w1, double mu1, double mu2, double sigma, int n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::bernoulli_distribution first(w1);
    std::normal_distribution<double> a(mu1, sigma), b(mu2, sigma);
    std::vector<double> out(n);
    for (auto& v : out) v = first(rng) ? a(rng) : b(rng);
    return out;
}

}  // namespace

TEST_CASE("pair counts") {
    CHECK(count_intra_pairs(std::vector<int>{0, 1, 2, 3, 3}) == 1);
    CHECK(count_intra_pairs(std::vector<int>{0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2}) == 18);
}

TEST_CASE("pair sampling") {
    std::mt19937_64 rng(0);
    Matrix e = Matrix::Zero(2, 12);
    std::vector<int> labels;
    for (int c = 0; c < 3; ++c)
        for (int k = 0; k < 4; ++k) {
            labels.push_back(c);
            e(0, c * 4 + k) = 1.0;
        }
    const auto sims = sample_intra_pairs(e, labels, 100, rng);
    CHECK(sims.size() == 18);
    for (double s : sims) CHECK(s == doctest::Approx(1.0));
    CHECK(sample_intra_pairs(e, labels, 5, rng).size() == 5);
    CHECK_THROWS_AS(sample_intra_pairs(e.leftCols(3), std::vector<int>{0, 1, 2}, 10, rng), ValidationError);
}

TEST_CASE("single pair") {
    std::mt19937_64 rng(0);
    Matrix e(1, 4);
    e << 1, 1, -1, 1;
    CHECK(sample_intra_pairs(e, std::vector<int>{0, 1, 2, 2}, 10, rng) == std::vector<double>{-1.0});
}

TEST_CASE("mixture recovery") {
    const auto even = fit_gmm2(mixture(0.5, 0.3, 0.8, 0.05, 10000, 1));
    CHECK(std::abs(even.w1 - 0.5) < 0.03);
    CHECK(std::abs(even.mu1 - 0.3) < 0.02);
    CHECK(!even.degenerate);
    const auto skew = fit_gmm2(mixture(0.2, 0.3, 0.8, 0.05, 10000, 2));
    CHECK(std::abs(skew.w1 - 0.2) < 0.03);
}

TEST_CASE("log-likelihood never decreases") {
    for (std::uint64_t s = 0; s < 10; ++s) {
        const auto fit = fit_gmm2(mixture(0.3 + 0.04 * s, 0.2, 0.7, 0.1, 2000, s));
        for (std::size_t i = 1; i < fit.ll_history.size(); ++i) CHECK(fit.ll_history[i] >= fit.ll_history[i - 1] - 1e-12);
    }
}

TEST_CASE("constant sample is degenerate") {
    const auto fit = fit_gmm2(std::vector<double>(100, 0.7));
    CHECK(fit.degenerate);
    CHECK(fit.floor_hit);
    NoiseConfig cfg;
    CHECK(noise_from_fit(fit, 100, cfg).degenerate);
}

TEST_CASE("fit ignores input order") {
    auto v = mixture(0.4, 0.3, 0.8, 0.05, 500, 3);
    const auto a = fit_gmm2(v);
    std::reverse(v.begin(), v.end());
    const auto b = fit_gmm2(v);
    CHECK(a.w1 == b.w1);
    CHECK(a.mu2 == b.mu2);
}

TEST_CASE("too few samples") {
    CHECK_THROWS_AS(fit_gmm2(std::vector<double>(19, 0.1)), ValidationError);
}

TEST_CASE("pair correction") {
    GmmFit fit;
    fit.mu1 = 0.2;
    fit.mu2 = 0.9;
    fit.w1 = 0.75;
    fit.w2 = 0.25;
    NoiseConfig cfg;
    CHECK(noise_from_fit(fit, 1000, cfg).rate == doctest::Approx(0.5));
    CHECK(noise_from_fit(fit, 1000, cfg).pair_weight == doctest::Approx(0.75));
    cfg.pair_correction = false;
    CHECK(noise_from_fit(fit, 1000, cfg).rate == doctest::Approx(0.75));
    // high rates are reported as they are
    fit.w1 = 0.9;
    fit.w2 = 0.1;
    cfg.pair_correction = true;
    CHECK(noise_from_fit(fit, 1000, cfg).rate > 0.5);
}

TEST_CASE("clean tight clusters give a degenerate fit or a small rate") {
    const LabelledSet d = gen_synthetic(10, 30, 16, 0.05, 4);
    const auto est = estimate_noise_rate(d, EncoderParams::identity(16), NoiseConfig{});
    CHECK((est.degenerate || est.rate < 0.05));
}

TEST_CASE("trained embedder recovers a 50% rate") {
    const LabelledSet clean = gen_synthetic(10, 60, 16, 0.15, 6);
    const LabelledSet noisy = inject_noise(clean, 0.5, NoiseMode::Symmetric, 7);
    EncoderArch arch;
    arch.input_dim = 16;
    GroupConfig cfg;
    cfg.noise_percent = 50;
    cfg.margin = {0.3, 16, 1.1};
    cfg.sgd.learning_rate = 0.01;
    auto agents = make_agents(arch, 10, 4, 1);
    gn_train(agents, noisy, cfg, 1000);
    const auto est = estimate_noise_rate(noisy, agents[0].encoder, NoiseConfig{});
    CHECK(std::abs(est.rate - 0.5) < 0.1);
}

TEST_CASE("histogram") {
    const auto h = similarity_histogram({-1.0, 0.0, 0.99, 1.0}, 4);
    CHECK(h.size() == 4);
    CHECK(h[0].first == doctest::Approx(-0.75));
    CHECK(h[0].second == 1);
    CHECK(h[2].second == 1);
    CHECK(h[3].second == 2);
}
