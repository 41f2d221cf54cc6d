#include "qdg/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include "qdg/format.hpp"
#include "qdg/rng.hpp"

namespace qdg {

void TrainConfig::validate() const {
    if (total_steps < 1) throw contract_error("total_steps must be >= 1");
    if (validate_every < 1) throw contract_error("validate_every must be >= 1");
    if (quantize_at_step) {
        if (*quantize_at_step <= 0 || *quantize_at_step >= total_steps)
            throw contract_error("quantize_at_step must lie in (0, total_steps)");
        quant.validate();
        if (quant_mode == QuantMode::PtqRtn)
            throw contract_error("ptq-rtn is a post-training mode; it cannot drive training");
        if (quant_mode == QuantMode::Incremental && stage_fractions.empty())
            throw contract_error("incremental mode needs a stage schedule");
    }
    if (batch_per_domain < 1) throw contract_error("batch_per_domain must be >= 1");
    if (hidden_dims.empty()) throw contract_error("at least one hidden layer required");
    optimizer.validate();
}

namespace {

constexpr double kDivergenceThreshold = 1e6;

double pool_loss(ModelState& model, const EvalSet& set) {
    return loss_ce(forward(model, set.x), set.labels, Reduction::Mean).item();
}

}  // namespace

RunRecord train(const DomainDataset& ds, const SplitPlan& plan, const TrainConfig& config) {
    config.validate();
    const auto started = std::chrono::steady_clock::now();
    Materialized mat = Materialized::from(ds, plan);

    MlpSpec spec;
    spec.input_dim = ds.input_dim;
    spec.hidden_dims = config.hidden_dims;
    spec.num_classes = ds.num_classes;
    spec.activation = config.activation;
    spec.seed = derive_seed(config.seed, "model");
    ModelState model = init_model(spec);

    RunRecord record;
    record.config = config;
    record.target_domain = plan.target_domain;

    auto batch_rng = make_rng(derive_seed(config.seed, "batches"));
    double best_val = -1.0;

    // Incremental stages spread evenly over [T_q, total_steps).
    std::vector<long> stage_steps;
    if (config.quantize_at_step && config.quant_mode == QuantMode::Incremental) {
        const long tq = *config.quantize_at_step;
        const auto n = static_cast<long>(config.stage_fractions.size());
        for (long k = 0; k < n; ++k)
            stage_steps.push_back(tq + k * (config.total_steps - tq) / n);
    }
    std::size_t next_stage = 0;

    for (long t = 1; t <= config.total_steps; ++t) {
        if (config.quantize_at_step && t == *config.quantize_at_step) {
            if (config.quant_mode == QuantMode::Incremental)
                enable_incremental(model, config.quant, config.stage_fractions);
            else
                enable_lsq(model, config.quant);
        }
        while (next_stage < stage_steps.size() && t == stage_steps[next_stage]) {
            incremental_step(model);
            ++next_stage;
        }

        Batch batch = sample_batch(mat.train, config.batch_per_domain, batch_rng);
        for (Tensor& p : model.parameters()) p.zero_grad();
        Tensor loss = loss_ce(forward(model, batch.x), batch.labels, Reduction::Mean);
        const double loss_value = loss.item();
        if (!std::isfinite(loss_value) || loss_value > kDivergenceThreshold) {
            record.diverged = true;
            record.diverged_step = t;
            record.divergence_reason =
                !std::isfinite(loss_value)
                    ? "non-finite training loss"
                    : "training loss " + format_double(loss_value) + " above threshold";
            break;
        }
        loss.backward();
        optimizer_step(model, config.optimizer);
        // Step sizes are ordinary trainable parameters, but the quantizer
        // grid is undefined for s <= 0; hold them at the init_steps floor.
        if (model.quant && model.quant->enabled)
            for (Tensor& s : model.quant->steps)
                if (s.defined() && s.requires_grad())
                    for (double& v : s.mutable_values()) v = std::max(v, 1e-8);

        if (t % config.validate_every == 0 || t == config.total_steps) {
            ValidationPoint point;
            point.step = t;
            point.train_loss = pool_loss(model, mat.train_pool);
            point.val_acc = accuracy(model, mat.val.x, mat.val.labels);
            point.target_acc = mat.target.accuracy(model);
            record.points.push_back(point);
            if (point.val_acc > best_val) {
                best_val = point.val_acc;
                record.best = model.clone();
                record.best_step = t;
            }
            if (config.retain_checkpoints) record.checkpoints.push_back(model.clone());
        }
    }

    record.last = std::move(model);
    record.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return record;
}

long select_best_step(const RunRecord& record) {
    if (record.points.empty()) throw contract_error("run recorded no validation points");
    std::size_t best = 0;
    for (std::size_t i = 1; i < record.points.size(); ++i)
        if (record.points[i].val_acc > record.points[best].val_acc) best = i;
    return record.points[best].step;
}

const ModelState& select_best(const RunRecord& record) {
    if (record.points.empty()) throw contract_error("run recorded no validation points");
    if (record.best_step < 0 || record.best.layers.empty())
        throw contract_error("run holds no best checkpoint");
    return record.best;
}

StabilityStats stability_stats(const RunRecord& record, long window_start) {
    std::vector<double> acc;
    for (const ValidationPoint& p : record.points)
        if (p.step >= window_start) acc.push_back(p.target_acc);
    if (acc.empty())
        throw contract_error("stability window starting at " + std::to_string(window_start) +
                             " holds no validation points");
    StabilityStats stats;
    stats.count = acc.size();
    double sum = 0.0;
    for (double a : acc) sum += a;
    stats.mean = sum / static_cast<double>(acc.size());
    if (acc.size() < 2) {
        stats.degenerate = true;
        return stats;
    }
    double ss = 0.0;
    for (double a : acc) ss += (a - stats.mean) * (a - stats.mean);
    stats.stddev = std::sqrt(ss / static_cast<double>(acc.size() - 1));
    return stats;
}

std::string metrics_csv(const RunRecord& record) {
    std::string out = "step,train_loss,val_acc,target_acc\n";
    for (const ValidationPoint& p : record.points) {
        out += std::to_string(p.step);
        out += ',';
        out += format_double(p.train_loss);
        out += ',';
        out += format_double(p.val_acc);
        out += ',';
        out += format_double(p.target_acc);
        out += '\n';
    }
    return out;
}

void write_metrics_csv(const RunRecord& record, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot open '" + path + "' for writing");
    out << metrics_csv(record);
    if (!out) throw io_error("failed writing '" + path + "'");
}

}  // namespace qdg
