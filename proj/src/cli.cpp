#include "cotrain/cli.hpp"

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cotrain/checkpoint.hpp"
#include "cotrain/config.hpp"
#include "cotrain/errors.hpp"
#include "cotrain/experiment.hpp"

namespace cotrain {

namespace {

struct CommonArgs {
    std::string config;
    std::vector<std::string> overrides;
    std::string runs = "runs";
    bool print_config = false;
};

void add_common(CLI::App* sub, CommonArgs& a) {
    sub->add_option("-c,--config", a.config, "JSON config file (defaults when omitted)");
    sub->add_option("--set", a.overrides, "override as key.path=value, repeatable")->take_all();
    sub->add_option("--runs", a.runs, "root directory for run outputs");
    sub->add_flag("--print-config", a.print_config, "print the resolved config and exit");
}

ExperimentConfig resolve(const CommonArgs& a) {
    return a.config.empty() ? parse_config("", a.overrides) : load_config(a.config, a.overrides);
}

Agent load_agent(const std::string& path) {
    std::filesystem::path p = path;
    if (std::filesystem::is_directory(p)) p /= "agent_0.ckpt";
    return load_checkpoint(p).agent;
}

void write_error(const CommonArgs& a, const ExperimentConfig* cfg, const std::string& kind, const std::string& what) {
    if (!cfg) return;
    try {
        RunDir run(a.runs, cfg->name);
        nlohmann::json j = {{"status", kind}, {"message", what}};
        run.write_text("error.json", j.dump(2) + "\n");
    } catch (const std::exception&) {
    }
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Multi-agent noise-robust training and learn-label loops on feature data"};
    app.require_subcommand(1);

    CommonArgs common;
    std::string checkpoint, data_out;

    auto* train = app.add_subcommand("train", "train the agent group on the (noisy) training set");
    add_common(train, common);
    auto* nroll = app.add_subcommand("nroll", "run the learn-label loop over the unlabelled parts");
    add_common(nroll, common);
    auto* noise = app.add_subcommand("estimate-noise", "estimate the label noise rate of the training set");
    add_common(noise, common);
    noise->add_option("--checkpoint", checkpoint, "embed with this agent checkpoint (file or directory)");
    auto* evaluate = app.add_subcommand("evaluate", "evaluate a checkpoint on the test set");
    add_common(evaluate, common);
    evaluate->add_option("--checkpoint", checkpoint, "agent checkpoint (file or directory)")->required();
    auto* gen = app.add_subcommand("gen-data", "write the synthetic data set and split as CSV");
    add_common(gen, common);
    gen->add_option("--out", data_out, "output directory (default runs/<name>/data)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp& e) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return kExitInvalid;
    }

    std::optional<ExperimentConfig> cfg;
    try {
        cfg = resolve(common);
        if (common.print_config) {
            out << config_to_json(*cfg);
            return kExitOk;
        }
        if (*train) {
            RunDir run(common.runs, cfg->name);
            const auto r = run_train(*cfg, &run);
            out << "test_accuracy " << r.report.test_accuracy;
            if (r.baseline_accuracy) out << " baseline_accuracy " << *r.baseline_accuracy;
            out << "\nwrote " << run.path().string() << "\n";
        } else if (*nroll) {
            RunDir run(common.runs, cfg->name);
            const auto r = run_nroll_experiment(*cfg, &run);
            const auto& last = r.result.loops.back();
            out << "loops " << r.result.loops.size() - 1 << " labelled " << last.labelled_size << " r_est "
                << last.noise_rate << " test_accuracy " << r.report.test_accuracy << "\nwrote "
                << run.path().string() << "\n";
        } else if (*noise) {
            RunDir run(common.runs, cfg->name);
            std::optional<Agent> agent;
            if (!checkpoint.empty()) agent = load_agent(checkpoint);
            const auto r = run_estimate_noise(*cfg, agent ? &*agent : nullptr, &run);
            out << "rate " << r.estimate.rate << (r.estimate.degenerate ? " (degenerate)" : "") << " pairs "
                << r.estimate.pairs << "\nwrote " << run.path().string() << "\n";
        } else if (*evaluate) {
            RunDir run(common.runs, cfg->name);
            const Agent agent = load_agent(checkpoint);
            const auto r = run_evaluate(*cfg, agent, &run);
            out << r.to_json() << "\n";
        } else if (*gen) {
            const std::filesystem::path dir =
                data_out.empty() ? std::filesystem::path(common.runs) / cfg->name / "data" : std::filesystem::path(data_out);
            run_gen_data(*cfg, dir);
            out << "wrote " << dir.string() << "\n";
        }
        return kExitOk;
    } catch (const ValidationError& e) {
        err << "invalid: " << e.what() << "\n";
        return kExitInvalid;
    } catch (const ParseError& e) {
        err << "invalid: " << e.what() << "\n";
        return kExitInvalid;
    } catch (const DivergedError& e) {
        err << "diverged: " << e.what() << "\n";
        write_error(common, cfg ? &*cfg : nullptr, "diverged", e.what());
        return kExitDiverged;
    } catch (const NumericError& e) {
        err << "diverged: " << e.what() << "\n";
        write_error(common, cfg ? &*cfg : nullptr, "diverged", e.what());
        return kExitDiverged;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitFailure;
    }
}

}  // namespace cotrain
