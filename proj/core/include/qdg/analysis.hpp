#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qdg/data.hpp"
#include "qdg/nn.hpp"

namespace qdg {

// A scalar objective over a flat weight vector. The landscape diagnostics
// run against this interface so analytic test objectives share the exact
// machinery used on models.
class Objective {
  public:
    virtual ~Objective() = default;
    virtual std::size_t dim() const = 0;
    virtual double value(const std::vector<double>& w) = 0;
    virtual std::vector<double> gradient(const std::vector<double>& w) = 0;
    virtual std::vector<double> current() const = 0;  // the center point
};

// Summed cross-entropy of a model over a fixed evaluation set, as a function
// of the flat weight+bias vector. The stored weights act as the latent
// master copy: an LSQ quantizer is re-applied by the forward pass itself,
// and a PTQ/incremental quantizer is re-applied to a scratch copy before
// evaluation, so perturbed values land back on the grid the model lives on.
// gradient() differentiates the stored-weight landscape (straight-through
// for LSQ).
class ModelObjective : public Objective {
  public:
    ModelObjective(const ModelState& model, EvalSet set);

    std::size_t dim() const override { return center_.size(); }
    double value(const std::vector<double>& w) override;
    std::vector<double> gradient(const std::vector<double>& w) override;
    std::vector<double> current() const override { return center_; }

  private:
    ModelState model_;
    EvalSet set_;
    std::vector<double> center_;
    bool requantize_ = false;
};

struct FlatnessEntry {
    double gamma = 0.0;
    double mean = 0.0;       // mean of E(w + gamma*u) - E(w)
    double std_error = 0.0;  // sample std / sqrt(samples)
    std::size_t samples = 0;
    bool widened = false;  // sample count was raised to tame the std error
};

struct FlatnessProfile {
    std::vector<FlatnessEntry> entries;
    std::string set_tag;  // "source" | "target" | caller-defined
    double baseline = 0.0;
    std::size_t default_samples = 0;
    bool std_error_flag = false;  // an entry exceeded mean/5 even after widening
};

// Monte-Carlo flatness profile: for each radius, directions are drawn
// uniformly on the unit sphere (normalized Gaussians) and the loss change is
// averaged. A zero radius is allowed as a sentinel and yields exactly zero.
// When an entry's std error exceeds mean/5 the sampler widens (up to 4x) and
// flags the entry.
FlatnessProfile flatness(Objective& obj, const std::vector<double>& gamma_grid,
                         std::size_t samples, std::uint64_t seed, std::string set_tag);
FlatnessProfile flatness(const ModelState& model, const EvalSet& set,
                         const std::vector<double>& gamma_grid, std::size_t samples = 100,
                         std::uint64_t seed = 0, std::string set_tag = "source");

// {0.01, 0.02, 0.05, 0.1, 0.2, 0.5} scaled by ||w|| / sqrt(D).
std::vector<double> default_gamma_grid(const ModelState& model);

// Hessian-vector product by central differences of the gradient, with
// eps = 1e-4 * (1 + ||w||) / ||v||.
std::vector<double> hvp(Objective& obj, const std::vector<double>& v);
std::vector<double> hvp(const ModelState& model, const EvalSet& set,
                        const std::vector<double>& v);

struct TaylorRow {
    double scale = 0.0;
    double delta_norm = 0.0;  // ||scale * delta||
    double residual = 0.0;    // |L(w + scale*delta) - second-order prediction|
};

struct TaylorTable {
    std::vector<TaylorRow> rows;
    bool degenerate = false;  // the displacement was zero
};

// Residual of the second-order expansion around the center along rescaled
// copies of a fixed displacement. Scales must be positive and decreasing.
TaylorTable taylor_residual(Objective& obj, const std::vector<double>& delta,
                            const std::vector<double>& scales);
// Displacement = the model's own quantization displacement (effective minus
// stored weights; zero for biases and unquantized layers). A model whose
// stored weights already sit on the grid yields a degenerate table. With
// smooth_clone the objective evaluates a softplus copy of the model so the
// expansion is taken at a kink-free point.
TaylorTable taylor_residual(const ModelState& model, const EvalSet& set,
                            const std::vector<double>& scales, bool smooth_clone = false);

// Same weights and biases, softplus activation, quantizer dropped.
ModelState softplus_clone(const ModelState& model);

// Quantization displacement in flat weight order.
std::vector<double> quant_displacement(const ModelState& model);

struct CurvatureReport {
    double trace_estimate = 0.0;  // Hutchinson, Rademacher probes
    std::size_t trace_probes = 0;
    double top_eigenvalue = 0.0;  // Rayleigh quotient after power iteration
    std::size_t power_iterations = 0;
    TaylorTable taylor;
};

// trace_probes >= 1 and power_iterations >= 20 are enforced.
CurvatureReport curvature(Objective& obj, std::size_t trace_probes,
                          std::size_t power_iterations, std::uint64_t seed);
CurvatureReport curvature(const ModelState& model, const EvalSet& set,
                          std::size_t trace_probes = 8, std::size_t power_iterations = 20,
                          std::uint64_t seed = 0);

// Schema: gamma,mean,stderr,samples,set
std::string flatness_csv(const FlatnessProfile& profile);
void write_flatness_csv(const FlatnessProfile& profile, const std::string& path);

std::string curvature_json(const CurvatureReport& report);
void write_curvature_json(const CurvatureReport& report, const std::string& path);

}  // namespace qdg
