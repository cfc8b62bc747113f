#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cotrain/cli.hpp"
#include "cotrain/config.hpp"
#include "cotrain/errors.hpp"

using namespace cotrain;

namespace {

std::filesystem::path scratch(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("cotrain_test_" + name);
    std::filesystem::remove_all(p);
    return p;
}

int cli(std::vector<std::string> args, std::string* out_text = nullptr) {
    args.insert(args.begin(), "cotrain");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    if (out_text) *out_text = out.str() + err.str();
    return code;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("defaults round trip") {
    const auto a = parse_config("");
    const std::string text = config_to_json(a);
    CHECK(config_to_json(parse_config(text)) == text);
    CHECK(text == default_config_json());
}

TEST_CASE("overrides and unknown keys") {
    const auto c = parse_config(R"({"group": {"agents": 5, "degree": 1}})", {"noise.rate=0.3", "name=abc",
                                                                          "group.noise_percent=\"estimate\""});
    CHECK(c.group.agents == 5);
    CHECK(c.noise_rate == 0.3);
    CHECK(c.name == "abc");
    CHECK(c.group.noise_percent < 0);
    CHECK_THROWS_AS(parse_config(R"({"group": {"agentz": 3}})"), ValidationError);
    CHECK_THROWS_AS(parse_config("", {"group.agents=1"}), ValidationError);
    CHECK_THROWS_AS(parse_config("{not json"), ValidationError);
}

TEST_CASE("sub-seeds derive from the run seed") {
    const auto a = run_seeds(1), b = run_seeds(1), c = run_seeds(2);
    CHECK(a.data == b.data);
    CHECK(a.data != a.noise);
    CHECK(a.agents != c.agents);
}

TEST_CASE("cli rejects a single agent") {
    std::string out;
    CHECK(cli({"train", "--set", "group.agents=1", "--runs", scratch("m1").string()}, &out) == kExitInvalid);
    CHECK(out.find("M must be >= 2") != std::string::npos);
    CHECK(cli({"train", "--bogus"}) == kExitInvalid);
    CHECK(cli({}) == kExitInvalid);
}

TEST_CASE("gen-data is byte-identical across runs") {
    const auto root = scratch("gen");
    const std::vector<std::string> small{"--set", "data.classes=5", "data.per_class=10",
                                         "data.test_per_class=2"};
    auto args = [&](const std::string& dir) {
        std::vector<std::string> a{"gen-data", "--out", (root / dir).string()};
        a.insert(a.end(), small.begin(), small.end());
        return a;
    };
    REQUIRE(cli(args("a")) == kExitOk);
    REQUIRE(cli(args("b")) == kExitOk);
    for (const char* f : {"train.csv", "test.csv", "labelled.csv", "manifest.json"})
        CHECK(slurp(root / "a" / f) == slurp(root / "b" / f));
    CHECK(!slurp(root / "a" / "train.csv").empty());
}

TEST_CASE("small nroll run writes one loops.csv row per loop") {
    const auto root = scratch("nroll");
    std::string out;
    const int code = cli({"nroll", "--runs", root.string(), "--set", "name=smoke", "data.classes=6",
                          "data.per_class=20", "data.test_per_class=4", "split.parts=3",
                          "label.pretrain_iterations=60", "label.loop_iterations=30", "group.batch_size=32"},
                         &out);
    REQUIRE_MESSAGE(code == kExitOk, out);
    std::ifstream csv(root / "smoke" / "loops.csv");
    std::string line;
    int rows = -1;
    while (std::getline(csv, line)) ++rows;
    CHECK(rows == 2);
    const auto report = nlohmann::json::parse(slurp(root / "smoke" / "report.json"));
    CHECK(report["loops"].size() == 3);
    CHECK(std::filesystem::exists(root / "smoke" / "final" / "agent_0.ckpt"));
    CHECK(std::filesystem::exists(root / "smoke" / "loop_1" / "agent_0.ckpt"));
}

TEST_CASE("train then evaluate a checkpoint") {
    const auto root = scratch("train");
    const std::vector<std::string> common{"--runs", root.string(), "--set", "name=t", "data.classes=5",
                                          "data.per_class=20", "data.test_per_class=4",
                                          "group.iterations=50", "group.batch_size=32"};
    auto with = [&](std::vector<std::string> head, std::vector<std::string> tail = {}) {
        head.insert(head.end(), common.begin(), common.end());
        head.insert(head.end(), tail.begin(), tail.end());
        return head;
    };
    REQUIRE(cli(with({"train"})) == kExitOk);
    CHECK(std::filesystem::exists(root / "t" / "report.json"));
    CHECK(std::filesystem::exists(root / "t" / "iterations.jsonl"));
    std::string out;
    REQUIRE(cli(with({"evaluate", "--checkpoint", (root / "t").string()}), &out) == kExitOk);
    CHECK(out.find("test_accuracy") != std::string::npos);
    REQUIRE(cli(with({"estimate-noise", "--checkpoint", (root / "t" / "agent_1.ckpt").string()}), &out) == kExitOk);
    CHECK(out.find("rate") == 0);
    CHECK(cli(with({"evaluate", "--checkpoint", (root / "missing.ckpt").string()})) != kExitOk);
}

TEST_CASE("print-config echoes the resolved config") {
    std::string out;
    REQUIRE(cli({"train", "--print-config", "--set", "seed=7"}, &out) == kExitOk);
    CHECK(nlohmann::json::parse(out)["seed"] == 7);
}
