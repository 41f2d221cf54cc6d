#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "qdg/experiment.hpp"
#include "qdg/rng.hpp"

using namespace qdg;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

const char* kRunConfig =
    "[dataset]\n"
    "generator = \"spurious-blobs\"\n"
    "corr = [0.4, -0.4]\n"
    "n_per_domain = 60\n"
    "causal_dims = 3\n"
    "signal_sep = 2.5\n"
    "[train]\n"
    "total_steps = 60\n"
    "validate_every = 30\n"
    "quantize_at_step = 30\n"
    "hidden_dims = [8]\n"
    "batch_per_domain = 8\n"
    "[optimizer]\n"
    "learning_rate = 0.01\n"
    "[quant]\n"
    "bits = 7\n"
    "[experiment]\n"
    "seed = 11\n";

ExperimentConfig test_config(const std::string& out_dir, const std::string& extra = "") {
    ExperimentConfig c = parse_config_text(std::string(kRunConfig) + extra);
    c.out_dir = out_dir;
    return c;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void reset_dir(const std::string& dir) { fs::remove_all(dir); }

int run_cli(const std::string& args) {
    const std::string cmd = std::string(QDG_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    REQUIRE(status != -1);
    return WEXITSTATUS(status);
}

}  // namespace

TEST_SUITE_BEGIN("cli");

TEST_CASE("cmd_run writes the documented files and an accurate manifest") {
    const std::string dir = "tmp_cli_run";
    reset_dir(dir);
    const int rc = cmd_run(test_config(dir), RunOptions{});
    CHECK(rc == 0);

    for (const char* name :
         {"config.txt", "summary.json", "manifest.json", "metrics_corr+0.4.csv",
          "metrics_corr-0.4.csv", "best_corr+0.4.ckpt.json", "last_corr+0.4.ckpt.json",
          "quantized_corr+0.4.json"})
        CHECK(fs::exists(fs::path(dir) / name));

    const json manifest = json::parse(slurp(fs::path(dir) / "manifest.json"));
    CHECK(manifest["command"] == "run");
    for (const auto& [name, entry] : manifest["files"].items()) {
        const std::string content = slurp(fs::path(dir) / name);
        CHECK(entry["bytes"].get<std::size_t>() == content.size());
        char want[17];
        std::snprintf(want, sizeof(want), "%016llx",
                      static_cast<unsigned long long>(fnv1a64(content)));
        CHECK(entry["fnv1a64"].get<std::string>() == want);
    }

    const json summary = json::parse(slurp(fs::path(dir) / "summary.json"));
    CHECK(summary["bits"] == 7);
    CHECK(summary["quantize_step"] == 30);
    CHECK(summary["targets"].size() == 2);  // one entry per held-out domain
    for (const auto& [target, entry] : summary["targets"].items()) {
        CHECK(entry.contains("target_acc"));
        CHECK(entry.contains("stability"));
    }
    CHECK(summary["average_target_acc"].is_number());
    CHECK(slurp(fs::path(dir) / "config.txt") == test_config(dir).source_text);
    reset_dir(dir);
}

TEST_CASE("existing outputs block a rerun unless forced, and reruns are byte-identical") {
    const std::string dir = "tmp_cli_force";
    reset_dir(dir);
    CHECK(cmd_run(test_config(dir), RunOptions{}) == 0);
    const std::string first_summary = slurp(fs::path(dir) / "summary.json");
    const std::string first_metrics = slurp(fs::path(dir) / "metrics_corr+0.4.csv");

    CHECK_THROWS_AS(cmd_run(test_config(dir), RunOptions{}), io_error);

    RunOptions forced;
    forced.force = true;
    CHECK(cmd_run(test_config(dir), forced) == 0);
    CHECK(slurp(fs::path(dir) / "summary.json") == first_summary);
    CHECK(slurp(fs::path(dir) / "metrics_corr+0.4.csv") == first_metrics);
    reset_dir(dir);
}

TEST_CASE("erm runs record 32-bit mode and skip quantized exports") {
    const std::string dir = "tmp_cli_erm";
    reset_dir(dir);
    ExperimentConfig c = test_config(dir);
    c.train.quantize_at_step.reset();
    CHECK(cmd_run(c, RunOptions{}) == 0);
    const json summary = json::parse(slurp(fs::path(dir) / "summary.json"));
    CHECK(summary["bits"] == 32);
    CHECK(summary["quantize_step"].is_null());
    CHECK(summary["mode"] == "erm");
    CHECK_FALSE(fs::exists(fs::path(dir) / "quantized_corr+0.4.json"));
    reset_dir(dir);
}

TEST_CASE("sweep produces one row per bit and seed plus baselines") {
    const std::string dir = "tmp_cli_sweep";
    reset_dir(dir);
    ExperimentConfig c = test_config(dir, "[sweep]\nbits = [4, 8]\nseeds = 2\n");
    RunOptions opts;
    opts.jobs = 2;
    CHECK(cmd_sweep_bits(c, opts) == 0);
    const std::string csv = slurp(fs::path(dir) / "sweep.csv");
    CHECK(csv.rfind("bits,seed,target_acc,val_acc,compression\n", 0) == 0);
    std::size_t rows = 0;
    for (char ch : csv)
        if (ch == '\n') ++rows;
    CHECK(rows == 1 + 2 * 2 + 2);  // header + |bits|*seeds + seeds

    // The compression column is 32/b for quantized rows and 1 for baselines.
    std::istringstream lines(csv);
    std::string line;
    std::getline(lines, line);
    while (std::getline(lines, line)) {
        std::istringstream fields(line);
        std::string bits, seed, tacc, vacc, comp;
        std::getline(fields, bits, ',');
        std::getline(fields, seed, ',');
        std::getline(fields, tacc, ',');
        std::getline(fields, vacc, ',');
        std::getline(fields, comp, ',');
        if (bits == "32")
            CHECK(comp == "1");
        else
            CHECK(std::stod(comp) == doctest::Approx(32.0 / std::stod(bits)));
    }
    reset_dir(dir);
}

TEST_CASE("sweep demands a quantization step") {
    const std::string dir = "tmp_cli_sweep_bad";
    reset_dir(dir);
    ExperimentConfig c = test_config(dir);
    c.train.quantize_at_step.reset();
    CHECK_THROWS_AS(cmd_sweep_bits(c, RunOptions{}), config_error);
    CHECK_FALSE(fs::exists(dir));  // nothing written on a config error
}

TEST_CASE("analyze emits flatness and curvature files per checkpoint") {
    const std::string run_dir = "tmp_cli_analyze_run";
    const std::string dir = "tmp_cli_analyze";
    reset_dir(run_dir);
    reset_dir(dir);
    ExperimentConfig c = test_config(run_dir);
    CHECK(cmd_run(c, RunOptions{}) == 0);

    ExperimentConfig ac = test_config(dir, "[analysis]\nsamples = 8\n");
    const std::string ckpt = run_dir + "/best_corr+0.4.ckpt.json";
    CHECK(cmd_analyze(ac, {ckpt}, RunOptions{}) == 0);

    const std::string source = slurp(fs::path(dir) / "flatness_best_corr+0.4_source.csv");
    const std::string target = slurp(fs::path(dir) / "flatness_best_corr+0.4_target.csv");
    CHECK(fs::exists(fs::path(dir) / "curvature_best_corr+0.4.json"));

    for (const std::string* csv : {&source, &target}) {
        CHECK(csv->rfind("gamma,mean,stderr,samples,set\n", 0) == 0);
        // The gamma=0 sentinel row leads with zeros.
        CHECK(csv->find("\n0,0,0,") != std::string::npos);
        std::istringstream lines(*csv);
        std::string line;
        std::getline(lines, line);
        std::size_t data_rows = 0;
        while (std::getline(lines, line)) {
            ++data_rows;
            std::size_t commas = 0;
            for (char ch : line)
                if (ch == ',') ++commas;
            CHECK(commas == 4);  // stderr and samples populated on every row
        }
        CHECK(data_rows == 7);  // sentinel + six default radii
    }

    const json curv = json::parse(slurp(fs::path(dir) / "curvature_best_corr+0.4.json"));
    CHECK(curv.contains("trace_estimate"));
    CHECK(curv.contains("top_eigenvalue"));
    CHECK(curv.contains("taylor"));
    reset_dir(run_dir);
    reset_dir(dir);
}

TEST_CASE("analyze rejects checkpoints from a different input width") {
    const std::string run_dir = "tmp_cli_analyze_mismatch_run";
    const std::string dir = "tmp_cli_analyze_mismatch";
    reset_dir(run_dir);
    reset_dir(dir);
    ExperimentConfig c = test_config(run_dir);
    CHECK(cmd_run(c, RunOptions{}) == 0);
    ExperimentConfig ac = test_config(dir);
    ac.dataset.causal_dims = 5;  // width no longer matches the checkpoint
    CHECK_THROWS_AS(
        cmd_analyze(ac, {run_dir + "/best_corr+0.4.ckpt.json"}, RunOptions{}),
        contract_error);
    reset_dir(run_dir);
    reset_dir(dir);
}

TEST_CASE("a single-member ensemble reproduces the run summary") {
    const std::string run_dir = "tmp_cli_eoq_run";
    const std::string dir = "tmp_cli_eoq";
    reset_dir(run_dir);
    reset_dir(dir);

    ExperimentConfig rc = test_config(run_dir, "[protocol]\ntargets = [\"corr+0.4\"]\n");
    CHECK(cmd_run(rc, RunOptions{}) == 0);
    const json summary = json::parse(slurp(fs::path(run_dir) / "summary.json"));

    ExperimentConfig ec = test_config(dir, "[ensemble]\nmembers = 1\n");
    CHECK(cmd_ensemble(ec, RunOptions{}) == 0);
    const json report = json::parse(slurp(fs::path(dir) / "ensemble.json"));

    REQUIRE(report["members"].size() == 1);
    const auto& member = report["members"][0];
    const auto& target = summary["targets"]["corr+0.4"];
    CHECK(member["val_acc"] == target["val_acc"]);
    CHECK(member["target_acc"] == target["target_acc"]);
    CHECK(member["best_step"] == target["best_step"]);
    CHECK(report["ensemble_target_acc"] == target["target_acc"]);
    reset_dir(run_dir);
    reset_dir(dir);
}

TEST_CASE("five-member ensembles report every member") {
    const std::string dir = "tmp_cli_eoq5";
    reset_dir(dir);
    ExperimentConfig ec = test_config(dir, "[ensemble]\nmembers = 5\n");
    RunOptions opts;
    opts.jobs = 2;
    CHECK(cmd_ensemble(ec, opts) == 0);
    const json report = json::parse(slurp(fs::path(dir) / "ensemble.json"));
    CHECK(report["members"].size() == 5);
    CHECK(report["survivors"] == 5);
    double total = 0.0;
    for (const auto& m : report["members"]) total += m["model_bytes"].get<double>();
    CHECK(report["total_quantized_bytes"].get<double>() == doctest::Approx(total));
    reset_dir(dir);
}

TEST_CASE("ptq command quantizes the erm baseline per target") {
    const std::string dir = "tmp_cli_ptq";
    reset_dir(dir);
    CHECK(cmd_ptq(test_config(dir), RunOptions{}) == 0);
    const json report = json::parse(slurp(fs::path(dir) / "ptq.json"));
    CHECK(report["bits"] == 7);
    REQUIRE(report["targets"].size() == 2);
    for (const auto& [name, entry] : report["targets"].items()) {
        CHECK(entry.contains("ptq_target_acc"));
        CHECK(entry.contains("target_acc"));
    }
    CHECK(fs::exists(fs::path(dir) / "quantized_corr+0.4.json"));
    reset_dir(dir);
}

TEST_CASE("binary exit codes") {
    const std::string dir = "tmp_cli_proc";
    const std::string cfg = "tmp_cli_proc_config.toml";
    reset_dir(dir);
    {
        std::ofstream out(cfg);
        out << kRunConfig;
        out << "[protocol]\ntargets = [\"corr-0.4\"]\n";
    }

    CHECK(run_cli("--help") == 0);
    CHECK(run_cli("") == 2);                              // missing subcommand
    CHECK(run_cli("run --config missing.toml") == 2);     // nonexistent config
    CHECK(run_cli("run --config " + cfg + " --out " + dir) == 0);
    CHECK(run_cli("run --config " + cfg + " --out " + dir) == 4);  // outputs exist
    CHECK(run_cli("run --config " + cfg + " --out " + dir + " --force") == 0);

    {
        std::ofstream out(cfg, std::ios::app);
        out << "[bogus]\nx = 1\n";
    }
    CHECK(run_cli("run --config " + cfg + " --out " + dir + " --force") == 2);

    fs::remove(cfg);
    reset_dir(dir);
}

TEST_SUITE_END();
