#pragma once

#include <string>
#include <vector>

#include "qdg/config.hpp"

namespace qdg {

struct RunOptions {
    std::size_t jobs = 1;
    bool force = false;  // overwrite existing outputs
};

// Exit codes shared by every command: 0 success, 2 config error, 3 every
// useful result lost to divergence, 4 I/O error. Commands return 3 (run,
// ptq: any run diverged; sweep: all runs diverged) instead of throwing when
// partial results were still written.

// Leave-one-domain-out rotation: trains one model per target domain, writes
// metrics_<target>.csv, best/last checkpoints, a quantized export when the
// best checkpoint is quantized, and summary.json.
int cmd_run(const ExperimentConfig& config, const RunOptions& opts);

// One QAT run per (bit-width, seed) plus per-seed ERM baselines on the first
// rotation target, with splits shared across bit-widths so seeds pair up.
// Writes sweep.csv: bits,seed,target_acc,val_acc,compression.
int cmd_sweep_bits(const ExperimentConfig& config, const RunOptions& opts);

// Flatness profiles (source-validation and target sets, gamma=0 sentinel
// prepended) and a curvature report per checkpoint, against the first
// rotation target's split.
int cmd_analyze(const ExperimentConfig& config, const std::vector<std::string>& checkpoints,
                const RunOptions& opts);

// run_eoq on the first rotation target; writes ensemble.json.
int cmd_ensemble(const ExperimentConfig& config, const RunOptions& opts);

// ERM per target, then round-to-nearest post-training quantization of the
// best checkpoint; writes ptq.json with before/after accuracies.
int cmd_ptq(const ExperimentConfig& config, const RunOptions& opts);

}  // namespace qdg
