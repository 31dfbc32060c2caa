#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>

#include "sapbench/harness.hpp"

namespace {

std::filesystem::path resolve_out(const sap::ExperimentConfig& cfg, const std::string& flag) {
    if (!flag.empty()) return flag;
    if (!cfg.output_dir.empty()) return cfg.output_dir;
    throw sap::ConfigError("output_dir: set it in the config or pass --out");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"stochastic activation pruning workbench"};
    app.require_subcommand(1);
    app.set_version_flag("--version", sap::kToolVersion);

    std::string config_path;
    std::string model_dir;
    std::string out_dir;
    unsigned threads = 0;
    std::uint64_t seed = 0;

    auto* train = app.add_subcommand("train", "train a model and write a checkpoint");
    auto* eval = app.add_subcommand("eval", "sweep attacks against a checkpoint");
    auto* exp = app.add_subcommand("attack-export", "export crafted adversarial batches as tensor files");
    auto* synth = app.add_subcommand("dataset-synth", "materialize the config's synthetic dataset");
    auto* verify = app.add_subcommand("verify", "run the invariant suite against a checkpoint");

    for (CLI::App* cmd : {train, eval, exp, synth}) {
        cmd->add_option("--config", config_path, "experiment config (json)")->required();
        cmd->add_option("--out", out_dir, "output directory (default: the config's output_dir)");
        cmd->add_option("--seed", seed, "override the config's seed");
    }
    for (CLI::App* cmd : {eval, exp, verify}) cmd->add_option("--model", model_dir, "checkpoint directory")->required();
    eval->add_option("--threads", threads, "worker threads for evaluation (default: available cores)");
    verify->add_option("--config", config_path, "config whose data section is checked against the checkpoint");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;  // usage problems are config errors
    }

    try {
        sap::ExperimentConfig cfg;
        if (!config_path.empty()) cfg = sap::load_experiment_config(config_path);
        for (CLI::App* cmd : {train, eval, exp, synth})
            if (cmd->parsed() && cmd->count("--seed") > 0) cfg.seed = seed;

        if (train->parsed()) {
            const auto out = resolve_out(cfg, out_dir);
            sap::run_train(cfg, out);
            std::cout << "wrote " << (out / "checkpoint").string() << " and " << (out / "history.csv").string()
                      << "\n";
        } else if (eval->parsed()) {
            const auto out = resolve_out(cfg, out_dir);
            sap::run_eval(cfg, model_dir, out, threads);
            std::cout << "wrote " << (out / "sweep.csv").string() << "\n";
        } else if (exp->parsed()) {
            const auto out = resolve_out(cfg, out_dir);
            sap::run_attack_export(cfg, model_dir, out);
            std::cout << "wrote adversarial batches under " << out.string() << "\n";
        } else if (synth->parsed()) {
            const auto out = resolve_out(cfg, out_dir);
            sap::run_dataset_synth(cfg, out);
            std::cout << "wrote dataset under " << out.string() << "\n";
        } else if (verify->parsed()) {
            const auto lines = sap::run_verify(config_path.empty() ? nullptr : &cfg, model_dir);
            for (const auto& line : lines) std::cout << line << "\n";
            std::cout << "all checks passed\n";
        }
        return 0;
    } catch (const sap::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 5;
    }
}
