#include <doctest.h>

#include <algorithm>
#include <map>
#include <random>
#include <set>

#include "cotrain/errors.hpp"
#include "cotrain/groupnet.hpp"

using namespace cotrain;

namespace {

Matrix rows(std::initializer_list<std::initializer_list<double>> r) {
    Matrix m(static_cast<Eigen::Index>(r.size()), static_cast<Eigen::Index>(r.begin()->size()));
    Eigen::Index i = 0;
    for (const auto& row : r) {
        Eigen::Index j = 0;
        for (double v : row) m(i, j++) = v;
        ++i;
    }
    return m;
}

LabelledSet blobs(int classes, int per_class, std::uint64_t seed) {
    return gen_synthetic(classes, per_class, 8, 0.2, seed);
}

}  // namespace

TEST_CASE("low confidence count floors") {
    CHECK(low_confidence_count(50, 6) == 3);
    CHECK(low_confidence_count(30, 128) == 38);
    CHECK(low_confidence_count(0, 128) == 0);
}

TEST_CASE("hand-traced partition") {
    const Matrix losses = rows({{0.1, 0.2, 0.3, 0.9, 1.0, 1.1}, {0.15, 0.25, 1.2, 0.35, 1.0, 1.1}});
    const auto p = partition_batch(losses, 50);
    CHECK(p.lc[0] == std::vector<int>{3, 4, 5});
    CHECK(p.lc[1] == std::vector<int>{2, 4, 5});
    CHECK(p.hc == std::vector<int>{0, 1});
    CHECK(p.mc[0] == std::vector<int>{2});
    CHECK(p.mc[1] == std::vector<int>{3});
    CHECK(check_partition(p, 6, 50).empty());
}

TEST_CASE("zero noise keeps everything in HC") {
    const Matrix losses = rows({{3, 1, 2}, {1, 2, 3}});
    const auto p = partition_batch(losses, 0);
    CHECK(p.hc == std::vector<int>{0, 1, 2});
    CHECK(p.lc[0].empty());
    CHECK(p.mc[1].empty());
}

TEST_CASE("identical loss rows leave MC empty") {
    const Matrix losses = rows({{0.5, 0.1, 0.9, 0.3}, {0.5, 0.1, 0.9, 0.3}, {0.5, 0.1, 0.9, 0.3}});
    const auto p = partition_batch(losses, 50);
    CHECK(p.hc == std::vector<int>{1, 3});
    for (const auto& mc : p.mc) CHECK(mc.empty());
}

TEST_CASE("loss ties send the lower index to LC first") {
    const Matrix losses = rows({{1, 1, 1, 1}, {1, 1, 1, 1}});
    const auto p = partition_batch(losses, 50);
    CHECK(p.lc[0] == std::vector<int>{0, 1});
    CHECK(p.hc == std::vector<int>{2, 3});
}

TEST_CASE("random partitions tile") {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0, 1);
    for (int k = 0; k < 100; ++k) {
        Matrix l(4, 37);
        for (Eigen::Index i = 0; i < l.size(); ++i) l.data()[i] = u(rng);
        const double r = 5.0 * (k % 16);
        CHECK(check_partition(partition_batch(l, r), 37, r).empty());
    }
}

TEST_CASE("exchange plans") {
    GroupConfig cfg;
    cfg.agents = 3;
    cfg.degree = 1;
    cfg.shuffle = false;
    std::mt19937_64 rng(0);
    for (int it = 0; it < 5; ++it) {
        const auto plan = make_exchange_plan(cfg, rng);
        CHECK(plan.recipients[0] == std::vector<int>{1});
        CHECK(plan.recipients[1] == std::vector<int>{2});
        CHECK(plan.recipients[2] == std::vector<int>{0});
    }

    cfg.agents = 4;
    cfg.degree = 3;
    cfg.shuffle = true;
    std::mt19937_64 a(5), b(5);
    for (int it = 0; it < 10; ++it) {
        const auto plan = make_exchange_plan(cfg, a);
        for (int m = 0; m < 4; ++m) CHECK(plan.recipients[m].size() == 3);
        for (int m = 0; m < 4; ++m) CHECK(std::find(plan.recipients[m].begin(), plan.recipients[m].end(), m) == plan.recipients[m].end());
    }
    CHECK(a() == b());  // no permutation draws at degree M-1
}

TEST_CASE("sender pairs are uniform at M=4, degree 2") {
    GroupConfig cfg;
    cfg.agents = 4;
    cfg.degree = 2;
    std::mt19937_64 rng(17);
    std::map<std::vector<int>, int> counts;
    const int draws = 6000;
    for (int it = 0; it < draws; ++it) {
        auto s = make_exchange_plan(cfg, rng).senders_of(0);
        std::sort(s.begin(), s.end());
        ++counts[s];
    }
    CHECK(counts.size() == 3);
    for (const auto& [pair, c] : counts) CHECK(std::abs(c - draws / 3) < 150);
}

TEST_CASE("greedy MC selection") {
    // positions: a=0 recommended by 3 senders, b=1 by 2, c=2 by 1
    const Recommendations rec{{1, {0, 1, 2}}, {2, {0, 1}}, {3, {0}}};
    const Matrix losses = Matrix::Zero(4, 3);
    CHECK(select_received_mc(rec, 2, losses) == std::vector<int>{0, 1});
    CHECK(select_received_mc({}, 3, losses).empty());
    const Recommendations flat{{1, {4}}, {2, {2}}, {3, {0}}};
    CHECK(select_received_mc(flat, 5, Matrix::Zero(4, 5)) == std::vector<int>{0, 2, 4});
}

TEST_CASE("greedy ties prefer the lower mean sender loss") {
    const Recommendations rec{{1, {0, 1}}};
    Matrix losses = Matrix::Zero(2, 2);
    losses(1, 0) = 2.0;
    losses(1, 1) = 1.0;
    CHECK(select_received_mc(rec, 1, losses) == std::vector<int>{1});
}

TEST_CASE("group loss normalization") {
    EncoderArch arch;
    arch.input_dim = 8;
    arch.hidden_dims = {};
    arch.embedding_dim = 8;
    const Agent agent = Agent::make(arch, 4, 3);
    const LabelledSet d = blobs(4, 3, 1);
    const Matrix x = d.features.leftCols(4);
    const std::vector<int> labels(d.labels.begin(), d.labels.begin() + 4);
    MarginConfig cfg;
    const Matrix cos = batch_cosines(agent, x);
    const auto mv = batch_margin_losses(cos, labels, cfg, LossKind::MV).per_sample;
    const auto arc = batch_margin_losses(cos, labels, cfg, LossKind::Arc).per_sample;
    const std::vector<int> hc{0, 1}, mc{2, 3};
    const auto g = group_loss(agent, x, labels, hc, mc, cfg);
    CHECK(g.effective == 4);
    CHECK(g.loss == doctest::Approx((mv[0] + mv[1] + arc[2] + arc[3]) / 4.0).epsilon(1e-12));

    const auto only_hc = group_loss(agent, x, labels, hc, {}, cfg);
    CHECK(only_hc.loss == doctest::Approx((mv[0] + mv[1]) / 2.0).epsilon(1e-12));

    MarginConfig t1 = cfg;
    t1.mv_t = 1.0;
    const auto a1 = batch_margin_losses(cos, labels, t1, LossKind::Arc).per_sample;
    CHECK(group_loss(agent, x, labels, hc, mc, t1).loss == doctest::Approx(a1.mean()).epsilon(1e-12));
    CHECK(group_loss(agent, x, labels, {}, {}, cfg).empty());
}

TEST_CASE("identical agents stay identical without shuffle at full degree") {
    const LabelledSet d = blobs(5, 20, 2);
    EncoderArch arch;
    arch.input_dim = 8;
    arch.hidden_dims = {12};
    arch.embedding_dim = 6;
    std::vector<Agent> agents(3, Agent::make(arch, 5, 4));
    GroupConfig cfg;
    cfg.agents = 3;
    cfg.degree = 2;
    cfg.shuffle = false;
    cfg.noise_percent = 20;
    cfg.batch_size = 32;
    gn_train(agents, d, cfg, 60);
    for (int m = 1; m < 3; ++m) {
        CHECK(agents[m].head.weight == agents[0].head.weight);
        CHECK(agents[m].encoder.layers[0].weight == agents[0].encoder.layers[0].weight);
    }
}

TEST_CASE("training logs are deterministic and partitions tile") {
    const LabelledSet d = inject_noise(blobs(5, 20, 3), 0.3, NoiseMode::Symmetric, 1);
    EncoderArch arch;
    arch.input_dim = 8;
    arch.hidden_dims = {12};
    arch.embedding_dim = 6;
    GroupConfig cfg;
    cfg.noise_percent = 30;
    cfg.batch_size = 40;
    auto run = [&] {
        auto agents = make_agents(arch, 5, 4, 9);
        std::size_t bad = 0;
        TrainHooks hooks;
        hooks.on_partition = [&](const BatchPartition& p, std::span<const int> batch) {
            bad += !check_partition(p, static_cast<int>(batch.size()), cfg.noise_percent).empty();
        };
        auto logs = gn_train(agents, d, cfg, 50, hooks);
        CHECK(bad == 0);
        std::string all;
        for (const auto& l : logs) all += l.to_json();
        return all;
    };
    CHECK(run() == run());
}

TEST_CASE("warmup trains on full batches") {
    const LabelledSet d = blobs(4, 20, 5);
    EncoderArch arch;
    arch.input_dim = 8;
    arch.hidden_dims = {};
    arch.embedding_dim = 8;
    GroupConfig cfg;
    cfg.agents = 2;
    cfg.degree = 1;
    cfg.noise_percent = 50;
    cfg.batch_size = 20;
    cfg.warmup_fraction = 0.2;
    auto agents = make_agents(arch, 4, 2, 1);
    const auto logs = gn_train(agents, d, cfg, 20);
    for (const auto& l : logs) {
        CHECK(l.warmup == (l.iteration < 4));
        if (l.warmup) CHECK(l.hc_size == 20);
        else CHECK(l.hc_size <= 10);
    }
}

TEST_CASE("group config validation") {
    GroupConfig cfg;
    cfg.agents = 1;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
    cfg.agents = 4;
    cfg.degree = 4;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
    cfg.degree = 3;
    cfg.noise_percent = 100;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
}

TEST_CASE("batch sampler covers an epoch") {
    BatchSampler s(10);
    std::mt19937_64 rng(0);
    std::multiset<int> seen;
    for (int k = 0; k < 5; ++k)
        for (int i : s.next(2, rng)) seen.insert(i);
    CHECK(seen.size() == 10);
    for (int i = 0; i < 10; ++i) CHECK(seen.count(i) == 1);
}
