#include <doctest.h>

#include <set>
#include <sstream>

#include "cotrain/errors.hpp"
#include "cotrain/datasets.hpp"
#include "cotrain/groupnet.hpp"

using namespace cotrain;

TEST_CASE("zero spread collapses each class") {
    const LabelledSet d = gen_synthetic(3, 5, 4, 0.0, 1);
    for (std::size_t i = 1; i < d.size(); ++i)
        if (d.labels[i] == d.labels[0]) CHECK(d.features.col(static_cast<Eigen::Index>(i)) == d.features.col(0));
}

TEST_CASE("same seed, same data") {
    SyntheticSpec s;
    s.classes = 5;
    s.per_class = 10;
    s.test_per_class = 3;
    s.seed = 8;
    const auto a = gen_synthetic(s), b = gen_synthetic(s);
    CHECK(a.train.features == b.train.features);
    CHECK(a.test.features == b.test.features);
    CHECK(a.test.ids.front() > a.train.ids.back());
}

TEST_CASE("antipodal classes are learned perfectly") {
    Matrix proto(4, 2);
    proto << 1, -1, 0, 0, 0, 0, 0, 0;
    const LabelledSet d = gen_from_prototypes(proto, 50, 0.1, 3);
    EncoderArch arch;
    arch.input_dim = 4;
    arch.hidden_dims = {8};
    arch.embedding_dim = 4;
    Agent agent = Agent::make(arch, 2, 0);
    GroupConfig cfg;
    cfg.batch_size = 20;
    train_baseline(agent, d, cfg, 200);
    int correct = 0;
    const Matrix cos = batch_cosines(agent, d.features);
    for (Eigen::Index i = 0; i < cos.cols(); ++i) {
        Eigen::Index arg;
        cos.col(i).maxCoeff(&arg);
        correct += arg == d.labels[static_cast<std::size_t>(i)];
    }
    CHECK(correct == 100);
}

TEST_CASE("noise injection") {
    const LabelledSet d = gen_synthetic(10, 1000, 2, 0.1, 0);
    CHECK(inject_noise(d, 0.0, NoiseMode::Symmetric, 1).labels == d.labels);
    const LabelledSet n = inject_noise(d, 0.5, NoiseMode::Symmetric, 1);
    int flipped = 0;
    for (std::size_t i = 0; i < n.size(); ++i) {
        flipped += n.is_noisy(i);
        CHECK(n.gt_labels[i] == d.labels[i]);
    }
    CHECK(std::abs(flipped - 5000) <= 150);
    const LabelledSet p = inject_noise(d, 0.3, NoiseMode::PairFlip, 2);
    for (std::size_t i = 0; i < p.size(); ++i)
        if (p.is_noisy(i)) CHECK(p.labels[i] == (d.labels[i] + 1) % 10);
    CHECK_THROWS_AS(inject_noise(d, 1.0, NoiseMode::Symmetric, 0), ValidationError);
}

TEST_CASE("split sizes") {
    const auto one = split_parts(gen_synthetic(4, 10, 2, 0.1, 0), 1, 0);
    CHECK(one.unlabelled.empty());
    CHECK(one.labelled.size() == 40);

    const auto five = split_parts(gen_synthetic(3, 100, 2, 0.1, 0), 5, 1);
    CHECK(five.labelled.size() == 60);
    for (const auto& p : five.unlabelled) CHECK(p.size() == 60);

    // two classes of 10: each splits 4/3/3
    const auto three = split_parts(gen_synthetic(2, 10, 2, 0.1, 0), 3, 2);
    CHECK(three.labelled.size() == 8);
    CHECK(three.unlabelled[0].size() == 6);
    CHECK(three.unlabelled[1].size() == 6);
    for (int y = 0; y < 2; ++y) {
        int n = 0;
        for (int l : three.labelled.labels) n += l == y;
        CHECK(n == 4);
    }

    std::set<long> ids(three.labelled.ids.begin(), three.labelled.ids.end());
    for (const auto& p : three.unlabelled) ids.insert(p.ids().begin(), p.ids().end());
    CHECK(ids.size() == 20);
    CHECK_THROWS_AS(split_parts(gen_synthetic(2, 2, 2, 0.1, 0), 3, 0), ValidationError);
}

TEST_CASE("open-set split keeps unseen classes out of the seed") {
    const auto s = split_parts_open_set(gen_synthetic(6, 12, 2, 0.1, 0), 3, 4);
    CHECK(s.labelled.num_classes == 3);
    for (int y : s.labelled.labels) CHECK(y < 3);
    bool unseen = false;
    for (const auto& p : s.unlabelled)
        for (int y : GroundTruth::labels(p)) unseen = unseen || y >= 3;
    CHECK(unseen);
}

TEST_CASE("csv parsing") {
    std::istringstream empty("id,label,gt_label,f0,f1\n");
    CHECK(parse_csv(empty).empty());

    std::istringstream row("id,label,gt_label,f0,f1\n7,2,,0.1,0.2\n");
    const LabelledSet s = parse_csv(row);
    CHECK(s.ids[0] == 7);
    CHECK(s.labels[0] == 2);
    CHECK(s.gt_labels[0] == kNoLabel);
    CHECK(s.features(1, 0) == 0.2);

    std::istringstream ragged("id,label,gt_label,f0\n1,0,,0.5,0.6\n");
    try {
        parse_csv(ragged);
        FAIL("expected a parse error");
    } catch (const ParseError& e) {
        CHECK(e.line() == 2);
    }
    std::istringstream dup("id,label,gt_label,f0\n1,0,,0.5\n1,0,,0.6\n");
    CHECK_THROWS_AS(parse_csv(dup), ParseError);
}

TEST_CASE("csv round trip is exact") {
    const LabelledSet d = inject_noise(gen_synthetic(3, 4, 5, 0.3, 9), 0.5, NoiseMode::Symmetric, 2);
    std::stringstream ss;
    write_csv(ss, d);
    const LabelledSet back = parse_csv(ss);
    CHECK(back.features == d.features);
    CHECK(back.ids == d.ids);
    CHECK(back.labels == d.labels);
    CHECK(back.gt_labels == d.gt_labels);
}

TEST_CASE("provenance query") {
    LabelledSet d = gen_synthetic(2, 3, 2, 0.1, 0);
    d.provenance = {0, 0, 1, 2, 1, 0};
    CHECK(d.indices_with_provenance(1) == std::vector<int>{2, 4});
}
