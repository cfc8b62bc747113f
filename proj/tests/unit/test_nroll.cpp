#include <doctest.h>

#include <cmath>

#include "cotrain/errors.hpp"
#include "cotrain/nroll.hpp"

using namespace cotrain;

namespace {

Vector vec(std::initializer_list<double> v) {
    Vector out(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double x : v) out[i++] = x;
    return out;
}

}  // namespace

TEST_CASE("posterior example max over six entries") {
    // Two agents whose posteriors on one sample are (0.2,0.7,0.1) and (0.1,0.85,0.05).
    // Head rows cos_k = log(p_k) / s make softmax(s cos) equal p on the input 1.
    Matrix conf0(3, 1), conf1(3, 1);
    conf0 << 0.2, 0.7, 0.1;
    conf1 << 0.1, 0.85, 0.05;
    std::vector<Agent> agents(2);
    for (int m = 0; m < 2; ++m) {
        agents[m].encoder = EncoderParams::identity(1);
        agents[m].head.weight = Matrix(3, 1);
    }
    for (int k = 0; k < 3; ++k) {
        agents[0].head.weight(k, 0) = std::log(conf0(k, 0)) / 10.0;
        agents[1].head.weight(k, 0) = std::log(conf1(k, 0)) / 10.0;
    }
    Matrix x(1, 1);
    x << 1.0;
    LabelConfig cfg;
    cfg.threshold = 0.8;
    const auto r = label_part(agents, x, std::vector<long>{0}, cfg, 10.0);
    CHECK(r.assigned[0] == 1);
    CHECK(r.confidence[0] == doctest::Approx(0.85).epsilon(1e-12));

    cfg.threshold = 1.0 + 1e-9;
    const auto none = label_part(agents, x, std::vector<long>{5}, cfg, 10.0);
    CHECK(none.assigned[0] == kNoLabel);
    CHECK(none.dropped == std::vector<long>{5});
    CHECK(none.confident_fraction == 0.0);

    cfg.threshold = 0.0;
    const auto all = label_part(agents, x, std::vector<long>{5}, cfg, 10.0);
    CHECK(all.accepted == std::vector<int>{0});
    CHECK(all.assigned[0] == 1);
}

TEST_CASE("labelled-set update") {
    LabelledSet d = gen_synthetic(4, 25, 3, 0.1, 0);
    CHECK(update_labelled(d, LabelledSet{Matrix(3, 0), {}, {}, {}, {}, 4}, 1).size() == 100);

    LabelledSet pseudo = gen_synthetic(4, 10, 3, 0.1, 1);
    for (auto& id : pseudo.ids) id += 1000;
    const LabelledSet u = update_labelled(d, pseudo, 2);
    CHECK(u.size() == 140);
    CHECK(u.indices_with_provenance(2).size() == 40);
    CHECK(u.indices_with_provenance(2).front() == 100);
    CHECK_THROWS_AS(update_labelled(d, d, 1), ValidationError);
}

TEST_CASE("prototype bank") {
    PrototypeBank bank(0.9);
    const std::size_t k = bank.add(vec({1.0, 0.0}));
    bank.update(k, vec({0.0, 1.0}));
    CHECK(std::abs(bank.prototype(k)[0] - 0.9938837346736189) < 1e-12);
    CHECK(std::abs(bank.prototype(k)[1] - 0.11043152607484655) < 1e-12);

    const Vector before = bank.prototype(k);
    bank.update(k, before);
    CHECK((bank.prototype(k) - before).norm() < 1e-15);
    CHECK(bank.max_norm_error() < 1e-12);
}

TEST_CASE("far feature starts a new identity") {
    std::vector<Agent> agents(1);
    agents[0].encoder = EncoderParams::identity(3);
    agents[0].head.weight = Matrix::Zero(2, 3);
    agents[0].head.weight(0, 0) = 1.0;
    agents[0].head.weight(1, 1) = 1.0;
    PrototypeBank bank;
    const auto a = open_set_assign(agents, vec({0.0, 0.0, 1.0}), bank, 0.5, LabelConfig{}, 32.0);
    CHECK(a.kind == OpenSetAssignment::Kind::NewIdentity);
    CHECK(a.created);
    CHECK(bank.size() == 1);
    CHECK((bank.prototype(0) - vec({0.0, 0.0, 1.0})).norm() < 1e-15);

    const auto b = open_set_assign(agents, vec({0.0, 0.1, 0.995}).normalized(), bank, 0.5, LabelConfig{}, 32.0);
    CHECK(b.kind == OpenSetAssignment::Kind::NewIdentity);
    CHECK(!b.created);
    CHECK(b.label == 0);

    const auto c = open_set_assign(agents, vec({1.0, 0.0, 0.0}), bank, 0.5, LabelConfig{}, 32.0);
    CHECK(c.kind == OpenSetAssignment::Kind::Known);
    CHECK(c.label == 0);
}

TEST_CASE("no unlabelled parts equals plain group training") {
    const LabelledSet d = inject_noise(gen_synthetic(4, 20, 6, 0.2, 1), 0.2, NoiseMode::Symmetric, 2);
    NrollConfig cfg;
    cfg.arch.input_dim = 6;
    cfg.arch.hidden_dims = {16};
    cfg.arch.embedding_dim = 4;
    cfg.group.noise_percent = 20;
    cfg.group.batch_size = 16;
    cfg.pretrain_iterations = 30;
    cfg.loop_iterations = 10;
    const NrollResult r = run_nroll(cfg, d, {});
    CHECK(r.loops.size() == 1);

    GroupConfig g = cfg.group;
    GroupTrainer trainer(g, make_agents(cfg.arch, 4, g.agents, cfg.seed));
    trainer.train(d, 30);
    for (int m = 0; m < g.agents; ++m) CHECK(r.agents[m].head.weight == trainer.agents()[m].head.weight);
}

TEST_CASE("a small loop grows the labelled set and is deterministic") {
    const LabelledSet clean = gen_synthetic(5, 30, 8, 0.15, 3);
    const auto split = split_parts(clean, 3, 1);
    const LabelledSet seed = inject_noise(split.labelled, 0.3, NoiseMode::Symmetric, 2);
    NrollConfig cfg;
    cfg.arch.input_dim = 8;
    cfg.arch.hidden_dims = {16};
    cfg.arch.embedding_dim = 8;
    cfg.group.noise_percent = 30;
    cfg.group.batch_size = 32;
    cfg.group.margin = {0.3, 16, 1.1};
    cfg.group.sgd.learning_rate = 0.01;
    cfg.label.threshold = 0.5;
    cfg.pretrain_iterations = 150;
    cfg.loop_iterations = 60;
    const NrollResult a = run_nroll(cfg, seed, split.unlabelled);
    const NrollResult b = run_nroll(cfg, seed, split.unlabelled);
    CHECK(a.loops.size() == 3);
    CHECK(a.loops[2].labelled_size > a.loops[0].labelled_size);
    CHECK(a.labelled.ids == b.labelled.ids);
    CHECK(a.agents[0].head.weight == b.agents[0].head.weight);
    std::size_t total = a.labelled.size() + a.dropped.size();
    CHECK(total == clean.size());
}

TEST_CASE("stall rule lowers the threshold") {
    const LabelledSet clean = gen_synthetic(3, 40, 4, 0.2, 3);
    const auto split = split_parts(clean, 4, 1);
    NrollConfig cfg;
    cfg.arch.input_dim = 4;
    cfg.arch.hidden_dims = {};
    cfg.arch.embedding_dim = 4;
    cfg.group.agents = 2;
    cfg.group.degree = 1;
    cfg.group.batch_size = 8;
    cfg.label.threshold = 1.0;
    cfg.label.confidence = Confidence::Cosine;
    cfg.label.stall_loops = 2;
    cfg.label.threshold_floor = 0.9;
    cfg.label.lower_step = 0.05;
    cfg.pretrain_iterations = 5;
    cfg.loop_iterations = 5;
    const NrollResult r = run_nroll(cfg, split.labelled, split.unlabelled);
    CHECK(r.loops[3].threshold == doctest::Approx(0.95));
    bool logged = false;
    for (const auto& m : r.loops)
        for (const auto& e : m.events) logged = logged || e.find("threshold") != std::string::npos;
    CHECK(logged);
}

TEST_CASE("confidence names") {
    CHECK(parse_confidence("cosine") == Confidence::Cosine);
    CHECK(to_string(Confidence::ScaledLogit) == "scaled-logit");
    CHECK_THROWS_AS(parse_confidence("bogus"), ValidationError);
}
