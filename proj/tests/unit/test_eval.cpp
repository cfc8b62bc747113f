#include <doctest.h>

#include <random>

#include "cotrain/errors.hpp"
#include "cotrain/eval.hpp"

using namespace cotrain;

namespace {

VerificationResult run(const std::vector<double>& scores, const std::vector<char>& same) {
    return verification_accuracy(scores, same);
}

}  // namespace

TEST_CASE("separated scores verify perfectly") {
    std::vector<double> s;
    std::vector<char> same;
    for (int i = 0; i < 20; ++i) {
        s.push_back(0.9 + 0.001 * i);
        same.push_back(1);
        s.push_back(0.1 - 0.001 * i);
        same.push_back(0);
    }
    const auto r = run(s, same);
    CHECK(r.accuracy == 1.0);
    for (const auto& [fpr, tpr] : r.tpr_at_fpr) CHECK(tpr == 1.0);
    for (std::size_t i = 1; i < r.roc.size(); ++i) {
        CHECK(r.roc[i].fpr >= r.roc[i - 1].fpr);
        CHECK(r.roc[i].tpr >= r.roc[i - 1].tpr);
    }
}

TEST_CASE("constant scores give the majority prior") {
    std::vector<double> s(40, 0.3);
    std::vector<char> same(40, 0);
    for (int i = 0; i < 12; ++i) same[i] = 1;
    CHECK(run(s, same).accuracy == doctest::Approx(28.0 / 40.0));
}

TEST_CASE("random scores sit at chance") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0, 1);
    std::vector<double> s(10000);
    std::vector<char> same(10000);
    for (int i = 0; i < 10000; ++i) {
        s[i] = u(rng);
        same[i] = i % 2;
    }
    CHECK(std::abs(run(s, same).accuracy - 0.5) < 0.02);
}

TEST_CASE("verification needs both polarities") {
    CHECK_THROWS_AS(run(std::vector<double>(30, 0.1), std::vector<char>(30, 1)), ValidationError);
}

TEST_CASE("balanced pair generation") {
    std::vector<int> labels;
    for (int c = 0; c < 5; ++c)
        for (int k = 0; k < 6; ++k) labels.push_back(c);
    std::mt19937_64 rng(1);
    const auto pairs = make_verification_pairs(labels, 50, rng);
    int same = 0;
    for (const auto& p : pairs) {
        CHECK(p.a != p.b);
        CHECK(p.same == (labels[p.a] == labels[p.b]));
        same += p.same;
    }
    CHECK(same == 50);
    CHECK(pairs.size() == 100);
}

TEST_CASE("rank1") {
    Matrix g(2, 2), p(2, 3);
    g << 1, 0, 0, 1;
    p << 1, 0, 0.8, 0, 1, 0.6;
    CHECK(rank1(g, std::vector<int>{0, 1}, p, std::vector<int>{0, 1, 1}) == doctest::Approx(2.0 / 3.0));

    Matrix g1(2, 1);
    g1 << 1, 0;
    CHECK(rank1(g1, std::vector<int>{4}, p, std::vector<int>{4, 2, 4}) == doctest::Approx(2.0 / 3.0));
    CHECK_THROWS_AS(rank1(Matrix(2, 0), std::vector<int>{}, p, std::vector<int>{0, 1, 1}), ValidationError);
}

TEST_CASE("rank1 agrees with a brute-force nearest neighbour") {
    const LabelledSet d = gen_synthetic(8, 6, 5, 0.4, 2);
    const auto p = EncoderParams::identity(5);
    const auto split = gallery_probe_split(d.labels, 1);
    const Matrix e = embed_batch(p, d.features);
    int correct = 0;
    for (int q : split.probes) {
        double best = -2;
        int who = -1;
        for (int gi : split.gallery) {
            const double dist = (e.col(q) - e.col(gi)).squaredNorm();
            if (-dist > best) {
                best = -dist;
                who = gi;
            }
        }
        correct += d.labels[who] == d.labels[q];
    }
    CHECK(rank1(p, d, 1) == doctest::Approx(static_cast<double>(correct) / split.probes.size()).epsilon(1e-15));
}

TEST_CASE("pseudo-label scores") {
    const std::vector<int> truth{0, 1, 2, 1};
    const auto all = pseudo_label_accuracy(std::vector<int>{0, 1, 2, 1}, truth);
    CHECK(all.precision == 1.0);
    CHECK(all.coverage == 1.0);
    const auto none = pseudo_label_accuracy(std::vector<int>(4, kNoLabel), truth);
    CHECK(none.empty);
    CHECK(none.precision == 1.0);
    CHECK(none.coverage == 0.0);
    const auto some = pseudo_label_accuracy(std::vector<int>{0, 2, kNoLabel, 1}, truth);
    CHECK(some.accepted == 3);
    CHECK(some.correct == 2);
    CHECK(some.precision == doctest::Approx(2.0 / 3.0));
    CHECK(some.coverage == doctest::Approx(0.75));
}

TEST_CASE("classification accuracy") {
    Agent a;
    a.encoder = EncoderParams::identity(2);
    a.head.weight = Matrix::Identity(2, 2);
    LabelledSet s = gen_from_prototypes(Matrix::Identity(2, 2), 3, 0.0, 0);
    CHECK(classification_accuracy(a, s) == 1.0);
    std::swap(s.labels[0], s.labels[5]);
    CHECK(classification_accuracy(a, s) == doctest::Approx(4.0 / 6.0));
}
