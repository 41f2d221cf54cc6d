#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "qdg/nn.hpp"
#include "qdg/tensor.hpp"

namespace qdg {

struct Domain {
    std::string name;
    Tensor x;  // [n x input_dim]
    std::vector<int> labels;
};

struct DatasetMeta {
    std::string generator;
    std::uint64_t seed = 0;
    std::string params;
};

// Immutable after construction; safe to share across parallel runs.
struct DomainDataset {
    std::vector<Domain> domains;
    std::size_t input_dim = 0;
    std::size_t num_classes = 0;
    DatasetMeta meta;

    std::size_t domain_index(const std::string& name) const;  // contract error if unknown
    const Domain& domain(const std::string& name) const;

    // Every domain nonempty with matching width; identical label sets within
    // [0, num_classes); unique domain names.
    void validate() const;
};

// Two-class two-moons, one shared noisy base cloud rotated per domain angle
// (degrees, counterclockwise). Class counts are exactly n/2 each.
DomainDataset gen_rotated_moons(std::size_t n_per_domain, const std::vector<double>& angles_deg,
                                double noise_sd, std::uint64_t seed);

// Binary blobs: causal_dims Gaussian features with class means at
// +/- signal_sep/2, plus one spurious 0/1 feature equal to the label with
// probability (1+corr_d)/2. The last correlation names the intended target
// domain and must differ from every source correlation.
DomainDataset gen_spurious_blobs(std::size_t n_per_domain, const std::vector<double>& corr_per_domain,
                                 double signal_sep, std::uint64_t seed,
                                 std::size_t causal_dims = 8);

// CSV with a header row; all columns other than domain_column and
// label_column are numeric features, kept in header order. Labels are
// indexed by sorted unique values (numeric order when all parse as numbers,
// lexicographic otherwise); domains keep first-appearance order. Errors cite
// the file row, counting the header as row 1.
DomainDataset ingest_csv(const std::string& path, const std::string& domain_column,
                         const std::string& label_column);

// Schema: domain,label,f0,f1,... with shortest round-trip feature formatting,
// so export then ingest reproduces the tensors exactly.
void export_csv(const DomainDataset& ds, const std::string& path);

struct SplitPlan {
    std::string target_domain;
    std::vector<std::string> source_names;               // dataset order, target excluded
    std::vector<std::vector<std::size_t>> train_idx;     // per source, ascending
    std::vector<std::vector<std::size_t>> val_idx;
    std::uint64_t seed = 0;
};

// Stratified-by-label validation split of every source domain; per class,
// round(val_fraction * n_c) samples go to validation. Deterministic given
// seed; the target domain is wholly held out.
SplitPlan split_leave_one_out(const DomainDataset& ds, const std::string& target_domain,
                              double val_fraction = 0.2, std::uint64_t seed = 0);

// Per-source-domain training features and labels.
struct TrainView {
    std::vector<std::string> domain_names;
    std::vector<Tensor> x;
    std::vector<std::vector<int>> labels;
    std::size_t input_dim = 0;
    std::size_t num_classes = 0;
};

struct EvalSet {
    Tensor x;
    std::vector<int> labels;
};

struct Batch {
    Tensor x;
    std::vector<int> labels;
};

// Holds the held-out domain behind accuracy/loss queries only; the trainer
// never sees target features or labels.
class TargetEvaluator {
  public:
    double accuracy(ModelState& model) const;
    double mean_loss(ModelState& model) const;
    std::size_t size() const { return labels_.size(); }
    const std::string& domain_name() const { return name_; }

  private:
    TargetEvaluator(std::string name, Tensor x, std::vector<int> labels);
    friend struct Materialized;

    std::string name_;
    Tensor x_;
    std::vector<int> labels_;
};

// Everything a training run may touch, derived from a dataset and a plan.
struct Materialized {
    TrainView train;
    EvalSet train_pool;  // all source training rows, for loss curves
    EvalSet val;         // pooled in-domain validation rows
    TargetEvaluator target;

    static Materialized from(const DomainDataset& ds, const SplitPlan& plan);

  private:
    Materialized(TrainView t, EvalSet tp, EvalSet v, TargetEvaluator te)
        : train(std::move(t)), train_pool(std::move(tp)), val(std::move(v)),
          target(std::move(te)) {}
};

// Equal per-domain draw with replacement; rows are grouped by source domain.
Batch sample_batch(const TrainView& view, std::size_t per_domain, std::mt19937_64& rng);

}  // namespace qdg
