#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "qdg/data.hpp"
#include "qdg/nn.hpp"
#include "qdg/quant.hpp"

namespace qdg {

struct TrainConfig {
    long total_steps = 3000;
    std::optional<long> quantize_at_step;  // none = plain ERM
    long validate_every = 100;
    std::size_t batch_per_domain = 16;
    std::vector<std::size_t> hidden_dims = {32, 16};
    Activation activation = Activation::Relu;
    OptimizerConfig optimizer;
    QuantSpec quant;
    QuantMode quant_mode = QuantMode::Lsq;  // lsq | incremental inside the loop
    std::vector<double> stage_fractions = {0.5, 0.75, 1.0};  // incremental schedule
    std::uint64_t seed = 0;
    bool retain_checkpoints = false;  // keep a snapshot per validation point

    void validate() const;  // total_steps >= 1; K >= 1; 0 < T_q < total_steps
};

struct ValidationPoint {
    long step = 0;
    double train_loss = 0.0;  // mean cross-entropy over all source training rows
    double val_acc = 0.0;     // pooled in-domain validation accuracy
    double target_acc = 0.0;  // held-out domain accuracy (reporting only)
};

struct RunRecord {
    TrainConfig config;
    std::string target_domain;
    std::vector<ValidationPoint> points;
    ModelState best;  // highest val_acc, earliest step on ties
    long best_step = -1;
    ModelState last;
    std::vector<ModelState> checkpoints;  // aligned with points when retained
    bool diverged = false;
    long diverged_step = -1;
    std::string divergence_reason;
    double wall_seconds = 0.0;
};

// Full-precision training until quantize_at_step; from that step on, the
// forward pass fake-quantizes every layer but the last and the per-channel
// step sizes train alongside the weights. In incremental mode the stage
// schedule is spread evenly over the remaining steps and frozen weights stop
// updating instead. Validates every validate_every steps and at the final
// step. Deterministic given the seeds. A non-finite or exploding loss aborts
// the run with a diagnostic record instead of throwing.
RunRecord train(const DomainDataset& ds, const SplitPlan& plan, const TrainConfig& config);

// Highest in-domain validation accuracy; ties resolve to the earliest step.
long select_best_step(const RunRecord& record);
const ModelState& select_best(const RunRecord& record);

struct StabilityStats {
    double mean = 0.0;
    double stddev = 0.0;  // sample standard deviation; 0 when degenerate
    std::size_t count = 0;
    bool degenerate = false;  // window held a single point
};

// Mean and sample std of target accuracy over validation points with
// step >= window_start.
StabilityStats stability_stats(const RunRecord& record, long window_start);

// Schema: step,train_loss,val_acc,target_acc
void write_metrics_csv(const RunRecord& record, const std::string& path);
std::string metrics_csv(const RunRecord& record);

}  // namespace qdg
