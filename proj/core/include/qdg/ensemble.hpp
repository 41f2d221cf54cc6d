#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qdg/data.hpp"
#include "qdg/nn.hpp"
#include "qdg/trainer.hpp"

namespace qdg {

struct MemberSeeds {
    std::uint64_t split_seed = 0;
    std::uint64_t train_seed = 0;

    bool operator==(const MemberSeeds&) const = default;
};

struct EnsembleSpec {
    std::size_t members = 5;
    std::vector<MemberSeeds> seeds;  // one pair per member, pairwise distinct
    TrainConfig train;               // shared; per-member seed overrides train.seed
    double val_fraction = 0.2;

    void validate() const;
};

// (derive(base, "split", i), derive(base, "train", i)) for i in [0, count).
std::vector<MemberSeeds> make_member_seeds(std::uint64_t base_seed, std::size_t count);

struct EoqPrediction {
    std::size_t label = 0;
    std::vector<double> probabilities;  // softmax of the averaged logits
};

// Bagging rule: average member logits, softmax once, argmax with ties to the
// lowest class index.
EoqPrediction predict_eoq(std::vector<ModelState>& members, const std::vector<double>& x);
std::vector<std::size_t> predict_eoq_batch(std::vector<ModelState>& members, const Tensor& x);
double eoq_accuracy(std::vector<ModelState>& members, const Tensor& x,
                    const std::vector<int>& labels);

struct MemberReport {
    std::size_t index = 0;
    MemberSeeds seeds;
    bool failed = false;
    long diverged_step = -1;
    std::string failure;
    long best_step = -1;
    double val_acc = 0.0;
    double target_acc = 0.0;
    double model_bytes = 0.0;
    int bits = 32;
};

struct EnsembleReport {
    std::string target_domain;
    std::vector<MemberReport> members;
    std::size_t survivors = 0;
    bool partial = false;  // at least one member failed
    double ensemble_target_acc = 0.0;
    double mean_member_target_acc = 0.0;     // over survivors
    double total_quantized_bytes = 0.0;      // sum of survivor model bytes
    double fp32_baseline_bytes = 0.0;        // one full-precision model
    double relative_size = 0.0;              // total / baseline
    double ideal_relative_size = 0.0;        // members * bits / 32
};

// One independent training run per member (own split, own seed), best
// checkpoint each, then the bagging rule on the held-out domain. Failed
// members are reported and skipped; if every member diverges the run throws
// a divergence error.
EnsembleReport run_eoq(const DomainDataset& ds, const std::string& target_domain,
                       const EnsembleSpec& spec, std::size_t jobs = 1);

std::string ensemble_report_json(const EnsembleReport& report);
void write_ensemble_report(const EnsembleReport& report, const std::string& path);

}  // namespace qdg
