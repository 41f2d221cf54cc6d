#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "qdg/experiment.hpp"

namespace {

struct CliArgs {
    std::string config_path;
    std::uint64_t seed = 0;
    std::size_t jobs = 1;
    std::string out_dir;
    bool force = false;
    std::vector<std::string> checkpoints;
};

void add_common_options(CLI::App& sub, CliArgs& args) {
    sub.add_option("--config", args.config_path, "experiment config file")
        ->required()
        ->check(CLI::ExistingFile);
    sub.add_option("--seed", args.seed, "override the config's master seed");
    sub.add_option("--jobs", args.jobs, "concurrent jobs")->check(CLI::PositiveNumber);
    sub.add_option("--out", args.out_dir, "override the config's output directory");
    sub.add_flag("--force", args.force, "overwrite existing outputs");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"quantization-aware domain-generalization lab"};
    app.require_subcommand(1);
    CliArgs args;

    CLI::App* run = app.add_subcommand("run", "leave-one-domain-out training rotation");
    add_common_options(*run, args);
    CLI::App* sweep = app.add_subcommand("sweep-bits", "bit-width sweep with ERM baselines");
    add_common_options(*sweep, args);
    CLI::App* analyze = app.add_subcommand("analyze", "flatness and curvature of checkpoints");
    add_common_options(*analyze, args);
    analyze->add_option("checkpoints", args.checkpoints, "checkpoint files to analyze")
        ->required();
    CLI::App* ensemble = app.add_subcommand("ensemble", "quantized-model ensembling");
    add_common_options(*ensemble, args);
    CLI::App* ptq = app.add_subcommand("ptq", "post-training quantization of ERM baselines");
    add_common_options(*ptq, args);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    CLI::App* sub = app.get_subcommands().front();
    try {
        qdg::ExperimentConfig config = qdg::parse_config_file(args.config_path);
        if (sub->count("--seed")) config.seed = args.seed;
        if (sub->count("--out")) config.out_dir = args.out_dir;
        config.validate();
        const qdg::RunOptions opts{args.jobs, args.force};
        if (sub == run) return qdg::cmd_run(config, opts);
        if (sub == sweep) return qdg::cmd_sweep_bits(config, opts);
        if (sub == analyze) return qdg::cmd_analyze(config, args.checkpoints, opts);
        if (sub == ensemble) return qdg::cmd_ensemble(config, opts);
        return qdg::cmd_ptq(config, opts);
    } catch (const qdg::config_error& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const qdg::divergence_error& e) {
        std::fprintf(stderr, "divergence: %s\n", e.what());
        return 3;
    } catch (const qdg::io_error& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
