#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "qdg/data.hpp"
#include "qdg/quant.hpp"
#include "qdg/trainer.hpp"

namespace qdg {

struct DatasetConfig {
    std::string generator = "spurious-blobs";  // spurious-blobs | rotated-moons | csv
    std::uint64_t seed = 0;
    // spurious-blobs
    std::size_t n_per_domain = 500;
    std::vector<double> corr = {0.9, 0.8, 0.7, -0.9};
    double signal_sep = 0.9;
    std::size_t causal_dims = 8;
    // rotated-moons
    std::vector<double> angles = {0.0, 30.0, 60.0};
    double noise_sd = 0.15;
    // csv
    std::string path;
    std::string domain_column = "domain";
    std::string label_column = "label";
};

struct ProtocolConfig {
    std::vector<std::string> targets;  // empty = rotate over every domain
    double val_fraction = 0.2;
};

struct AnalysisConfig {
    std::vector<double> gamma_grid;  // empty = derived from the checkpoint
    std::size_t samples = 100;
    std::size_t trace_probes = 8;
    std::size_t power_iterations = 20;
    std::vector<double> taylor_scales = {1.0, 0.5, 0.25, 0.125};
};

struct EnsembleConfig {
    std::size_t members = 5;
};

struct SweepConfig {
    std::vector<int> bits = {3, 4, 5, 6, 7, 8};
    std::size_t seeds = 5;
};

struct ExperimentConfig {
    DatasetConfig dataset;
    ProtocolConfig protocol;
    TrainConfig train;  // holds optimizer and quant blocks
    AnalysisConfig analysis;
    EnsembleConfig ensemble;
    SweepConfig sweep;
    std::string out_dir = "out";
    std::uint64_t seed = 0;  // master seed for split/train derivation
    std::string source_text;

    void validate() const;
};

// TOML-like text: [section] headers, key = value lines, # comments. Values
// are quoted strings, numbers, true/false, or [v1, v2, ...] lists. Unknown
// sections or keys are rejected.
ExperimentConfig parse_config_text(const std::string& text, const std::string& origin = "config");
ExperimentConfig parse_config_file(const std::string& path);

// Dataset per the config's dataset block; generator errors surface as config
// errors so a bad block never looks like an internal failure.
DomainDataset build_dataset(const ExperimentConfig& config);

// The protocol's target list, or every domain when the list is empty.
std::vector<std::string> resolve_targets(const ExperimentConfig& config,
                                         const DomainDataset& ds);

}  // namespace qdg
