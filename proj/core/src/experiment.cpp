#include "qdg/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "qdg/analysis.hpp"
#include "qdg/ensemble.hpp"
#include "qdg/format.hpp"
#include "qdg/parallel.hpp"
#include "qdg/rng.hpp"

namespace qdg {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

void atomic_write(const fs::path& path, const std::string& content) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw io_error("cannot open '" + tmp.string() + "' for writing");
        out << content;
        if (!out) throw io_error("failed writing '" + tmp.string() + "'");
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw io_error("cannot move '" + tmp.string() + "' into place: " + ec.message());
}

// Collects outputs and lands them all at once, so an exists-conflict or a
// failed computation never leaves a partial result set behind.
class OutputWriter {
  public:
    OutputWriter(std::string dir, bool force) : dir_(std::move(dir)), force_(force) {}

    void stage(const std::string& name, std::string content) {
        for (const auto& [existing, ignored] : staged_)
            if (existing == name) throw contract_error("output '" + name + "' staged twice");
        staged_.emplace_back(name, std::move(content));
    }

    void flush(const std::string& command) {
        std::error_code ec;
        fs::create_directories(dir_, ec);
        if (ec) throw io_error("cannot create '" + dir_.string() + "': " + ec.message());
        if (!force_) {
            for (const auto& [name, ignored] : staged_)
                if (fs::exists(dir_ / name))
                    throw io_error("output '" + (dir_ / name).string() +
                                   "' exists; rerun with --force to overwrite");
            if (fs::exists(dir_ / "manifest.json"))
                throw io_error("output '" + (dir_ / "manifest.json").string() +
                               "' exists; rerun with --force to overwrite");
        }
        json manifest;
        manifest["command"] = command;
        json files;
        std::vector<std::size_t> order(staged_.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return staged_[a].first < staged_[b].first;
        });
        for (std::size_t i : order) {
            const auto& [name, content] = staged_[i];
            atomic_write(dir_ / name, content);
            files[name] = {{"fnv1a64", hex64(fnv1a64(content))}, {"bytes", content.size()}};
        }
        manifest["files"] = std::move(files);
        atomic_write(dir_ / "manifest.json", manifest.dump(2) + "\n");
    }

  private:
    fs::path dir_;
    bool force_;
    std::vector<std::pair<std::string, std::string>> staged_;
};

json stability_json(const RunRecord& record) {
    const long window_start =
        record.config.quantize_at_step ? *record.config.quantize_at_step : 1;
    bool any = false;
    for (const ValidationPoint& p : record.points)
        if (p.step >= window_start) any = true;
    if (!any) return nullptr;
    const StabilityStats stats = stability_stats(record, window_start);
    return {{"window_start", window_start},
            {"mean", stats.mean},
            {"std", stats.stddev},
            {"count", stats.count},
            {"degenerate", stats.degenerate}};
}

json target_summary(const RunRecord& record) {
    json j;
    j["diverged"] = record.diverged;
    if (record.diverged) {
        j["diverged_step"] = record.diverged_step;
        j["reason"] = record.divergence_reason;
    }
    if (!record.points.empty() && record.best_step >= 0) {
        const auto it = std::find_if(
            record.points.begin(), record.points.end(),
            [&](const ValidationPoint& p) { return p.step == record.best_step; });
        j["best_step"] = record.best_step;
        j["val_acc"] = it->val_acc;
        j["target_acc"] = it->target_acc;
        j["train_loss"] = it->train_loss;
        j["stability"] = stability_json(record);
    }
    return j;
}

struct BestPoint {
    bool valid = false;
    double val_acc = std::numeric_limits<double>::quiet_NaN();
    double target_acc = std::numeric_limits<double>::quiet_NaN();
};

BestPoint best_point(const RunRecord& record) {
    BestPoint bp;
    if (record.diverged || record.points.empty() || record.best_step < 0) return bp;
    for (const ValidationPoint& p : record.points)
        if (p.step == record.best_step) {
            bp.valid = true;
            bp.val_acc = p.val_acc;
            bp.target_acc = p.target_acc;
            return bp;
        }
    return bp;
}

std::string sanitize_component(const std::string& name) {
    std::string out = name;
    for (char& c : out)
        if (c == '/' || c == '\\') c = '_';
    return out;
}

}  // namespace

int cmd_run(const ExperimentConfig& config, const RunOptions& opts) {
    const DomainDataset ds = build_dataset(config);
    const auto targets = resolve_targets(config, ds);
    const auto seeds = make_member_seeds(config.seed, targets.size());

    std::vector<RunRecord> records(targets.size());
    run_parallel(targets.size(), opts.jobs, [&](std::size_t i) {
        const SplitPlan plan = split_leave_one_out(ds, targets[i], config.protocol.val_fraction,
                                                   seeds[i].split_seed);
        TrainConfig tc = config.train;
        tc.seed = seeds[i].train_seed;
        records[i] = train(ds, plan, tc);
    });

    OutputWriter writer(config.out_dir, opts.force);
    writer.stage("config.txt", config.source_text);

    const bool quantized = config.train.quantize_at_step.has_value();
    json summary;
    summary["command"] = "run";
    summary["generator"] = ds.meta.generator;
    summary["seed"] = config.seed;
    summary["bits"] = quantized ? config.train.quant.bits : 32;
    summary["quantize_step"] =
        quantized ? json(*config.train.quantize_at_step) : json(nullptr);
    summary["mode"] = quantized ? quant_mode_name(config.train.quant_mode) : "erm";

    bool any_diverged = false;
    double acc_sum = 0.0;
    std::size_t acc_count = 0;
    json per_target;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const RunRecord& rec = records[i];
        const std::string tname = sanitize_component(targets[i]);
        writer.stage("metrics_" + tname + ".csv", metrics_csv(rec));
        if (!rec.points.empty() && rec.best_step >= 0) {
            writer.stage("best_" + tname + ".ckpt.json", checkpoint_to_json(rec.best) + "\n");
            writer.stage("last_" + tname + ".ckpt.json", checkpoint_to_json(rec.last) + "\n");
            if (rec.best.quant && rec.best.quant->enabled)
                writer.stage("quantized_" + tname + ".json",
                             quantized_export_json(rec.best) + "\n");
        }
        const json ts = target_summary(rec);
        if (rec.diverged) any_diverged = true;
        if (ts.contains("target_acc")) {
            acc_sum += ts["target_acc"].get<double>();
            ++acc_count;
        }
        per_target[targets[i]] = ts;
    }
    summary["targets"] = std::move(per_target);
    summary["average_target_acc"] =
        acc_count ? json(acc_sum / static_cast<double>(acc_count)) : json(nullptr);
    writer.stage("summary.json", summary.dump(2) + "\n");
    writer.flush("run");
    return any_diverged ? 3 : 0;
}

int cmd_sweep_bits(const ExperimentConfig& config, const RunOptions& opts) {
    if (!config.train.quantize_at_step)
        throw config_error("sweep-bits needs [train] quantize_at_step");
    const DomainDataset ds = build_dataset(config);
    const std::string target = resolve_targets(config, ds).front();

    const std::size_t n_bits = config.sweep.bits.size();
    const std::size_t n_seeds = config.sweep.seeds;
    const std::size_t n_jobs = (n_bits + 1) * n_seeds;  // + ERM baseline per seed

    // Splits are shared across bit-widths so per-seed rows pair up.
    std::vector<SplitPlan> plans(n_seeds);
    std::vector<std::uint64_t> train_seeds(n_seeds);
    for (std::size_t s = 0; s < n_seeds; ++s) {
        plans[s] = split_leave_one_out(ds, target, config.protocol.val_fraction,
                                       derive_seed(config.seed, "sweep-split", s));
        train_seeds[s] = derive_seed(config.seed, "sweep-train", s);
    }

    std::vector<RunRecord> records(n_jobs);
    run_parallel(n_jobs, opts.jobs, [&](std::size_t k) {
        const std::size_t bit_index = k / n_seeds;
        const std::size_t s = k % n_seeds;
        TrainConfig tc = config.train;
        tc.seed = train_seeds[s];
        if (bit_index < n_bits)
            tc.quant.bits = config.sweep.bits[bit_index];
        else
            tc.quantize_at_step.reset();  // ERM baseline
        records[k] = train(ds, plans[s], tc);
    });

    std::string csv = "bits,seed,target_acc,val_acc,compression\n";
    bool all_diverged = true;
    for (std::size_t k = 0; k < n_jobs; ++k) {
        const std::size_t bit_index = k / n_seeds;
        const std::size_t s = k % n_seeds;
        const int bits = bit_index < n_bits ? config.sweep.bits[bit_index] : 32;
        const BestPoint bp = best_point(records[k]);
        if (bp.valid) all_diverged = false;
        csv += std::to_string(bits);
        csv += ',';
        csv += std::to_string(s);
        csv += ',';
        csv += format_double(bp.target_acc);
        csv += ',';
        csv += format_double(bp.val_acc);
        csv += ',';
        csv += format_double(bit_index < n_bits ? 32.0 / bits : 1.0);
        csv += '\n';
    }

    OutputWriter writer(config.out_dir, opts.force);
    writer.stage("config.txt", config.source_text);
    writer.stage("sweep.csv", csv);
    writer.flush("sweep-bits");
    return all_diverged ? 3 : 0;
}

int cmd_analyze(const ExperimentConfig& config, const std::vector<std::string>& checkpoints,
                const RunOptions& opts) {
    if (checkpoints.empty()) throw config_error("analyze needs at least one checkpoint path");
    const DomainDataset ds = build_dataset(config);
    const std::string target = resolve_targets(config, ds).front();
    const SplitPlan plan = split_leave_one_out(ds, target, config.protocol.val_fraction,
                                               derive_seed(config.seed, "split", 0));
    const Materialized mat = Materialized::from(ds, plan);
    const Domain& tdom = ds.domain(target);
    const EvalSet target_set{tdom.x, tdom.labels};

    OutputWriter writer(config.out_dir, opts.force);
    writer.stage("config.txt", config.source_text);

    std::set<std::string> used;
    for (std::size_t i = 0; i < checkpoints.size(); ++i) {
        ModelState model = load_checkpoint(checkpoints[i]);
        if (model.spec.input_dim != ds.input_dim || model.spec.num_classes != ds.num_classes)
            throw contract_error("checkpoint '" + checkpoints[i] +
                                 "' does not match the dataset's width or classes");

        std::string stem = fs::path(checkpoints[i]).filename().string();
        if (stem.size() > 10 && stem.ends_with(".ckpt.json"))
            stem = stem.substr(0, stem.size() - 10);
        else
            stem = fs::path(stem).stem().string();
        stem = sanitize_component(stem);
        while (used.count(stem)) stem += "_" + std::to_string(i);
        used.insert(stem);

        std::vector<double> grid = config.analysis.gamma_grid.empty()
                                       ? default_gamma_grid(model)
                                       : config.analysis.gamma_grid;
        if (grid.empty() || grid.front() > 0.0) grid.insert(grid.begin(), 0.0);

        const std::uint64_t seed = derive_seed(config.seed, "analysis", i);
        FlatnessProfile source = flatness(model, mat.val, grid, config.analysis.samples,
                                          derive_seed(seed, "source"), "source");
        FlatnessProfile tprofile = flatness(model, target_set, grid, config.analysis.samples,
                                            derive_seed(seed, "target"), "target");
        writer.stage("flatness_" + stem + "_source.csv", flatness_csv(source));
        writer.stage("flatness_" + stem + "_target.csv", flatness_csv(tprofile));

        CurvatureReport report =
            curvature(model, mat.val, config.analysis.trace_probes,
                      config.analysis.power_iterations, derive_seed(seed, "curvature"));
        report.taylor = taylor_residual(model, mat.val, config.analysis.taylor_scales,
                                        /*smooth_clone=*/true);
        writer.stage("curvature_" + stem + ".json", curvature_json(report) + "\n");
    }
    writer.flush("analyze");
    return 0;
}

int cmd_ensemble(const ExperimentConfig& config, const RunOptions& opts) {
    const DomainDataset ds = build_dataset(config);
    const std::string target = resolve_targets(config, ds).front();

    EnsembleSpec spec;
    spec.members = config.ensemble.members;
    spec.seeds = make_member_seeds(config.seed, spec.members);
    spec.train = config.train;
    spec.val_fraction = config.protocol.val_fraction;

    const EnsembleReport report = run_eoq(ds, target, spec, opts.jobs);
    OutputWriter writer(config.out_dir, opts.force);
    writer.stage("config.txt", config.source_text);
    writer.stage("ensemble.json", ensemble_report_json(report) + "\n");
    writer.flush("ensemble");
    return 0;
}

int cmd_ptq(const ExperimentConfig& config, const RunOptions& opts) {
    const DomainDataset ds = build_dataset(config);
    const auto targets = resolve_targets(config, ds);
    const auto seeds = make_member_seeds(config.seed, targets.size());

    std::vector<RunRecord> records(targets.size());
    std::vector<SplitPlan> plans(targets.size());
    run_parallel(targets.size(), opts.jobs, [&](std::size_t i) {
        plans[i] = split_leave_one_out(ds, targets[i], config.protocol.val_fraction,
                                       seeds[i].split_seed);
        TrainConfig tc = config.train;
        tc.seed = seeds[i].train_seed;
        tc.quantize_at_step.reset();  // the baseline is a plain ERM run
        records[i] = train(ds, plans[i], tc);
    });

    OutputWriter writer(config.out_dir, opts.force);
    writer.stage("config.txt", config.source_text);

    json summary;
    summary["command"] = "ptq";
    summary["bits"] = config.train.quant.bits;
    summary["seed"] = config.seed;
    bool any_diverged = false;
    double erm_sum = 0.0, ptq_sum = 0.0;
    std::size_t count = 0;
    json per_target;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const RunRecord& rec = records[i];
        const std::string tname = sanitize_component(targets[i]);
        writer.stage("metrics_" + tname + ".csv", metrics_csv(rec));
        json j = target_summary(rec);
        if (rec.diverged) {
            any_diverged = true;
        } else if (!rec.points.empty() && rec.best_step >= 0) {
            ModelState quantized = ptq_round_to_nearest(select_best(rec), config.train.quant);
            const Materialized mat = Materialized::from(ds, plans[i]);
            const Domain& tdom = ds.domain(targets[i]);
            j["ptq_val_acc"] = accuracy(quantized, mat.val.x, mat.val.labels);
            j["ptq_target_acc"] = accuracy(quantized, tdom.x, tdom.labels);
            writer.stage("quantized_" + tname + ".json",
                         quantized_export_json(quantized) + "\n");
            erm_sum += j["target_acc"].get<double>();
            ptq_sum += j["ptq_target_acc"].get<double>();
            ++count;
        }
        per_target[targets[i]] = std::move(j);
    }
    summary["targets"] = std::move(per_target);
    summary["average_erm_target_acc"] =
        count ? json(erm_sum / static_cast<double>(count)) : json(nullptr);
    summary["average_ptq_target_acc"] =
        count ? json(ptq_sum / static_cast<double>(count)) : json(nullptr);
    writer.stage("ptq.json", summary.dump(2) + "\n");
    writer.flush("ptq");
    return any_diverged ? 3 : 0;
}

}  // namespace qdg
