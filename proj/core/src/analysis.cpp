#include "qdg/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "qdg/format.hpp"
#include "qdg/quant.hpp"
#include "qdg/rng.hpp"

namespace qdg {

using json = nlohmann::ordered_json;

namespace {

double norm2(const std::vector<double>& v) {
    double acc = 0.0;
    for (double x : v) acc += x * x;
    return std::sqrt(acc);
}

void requantize_in_place(ModelState& model) {
    const QuantState& q = *model.quant;
    const std::size_t layer_count = model.layers.size();
    for (std::size_t l = 0; l < layer_count; ++l) {
        if (!q.layer_quantized(l, layer_count) || !q.steps[l].defined()) continue;
        Tensor& w = model.layers[l].weight;
        w.mutable_values() = fake_quant_values(w.values(), q.steps[l].values(), w.shape()[0],
                                               w.shape()[1], q.spec);
    }
}

}  // namespace

ModelObjective::ModelObjective(const ModelState& model, EvalSet set)
    : model_(model.clone()), set_(std::move(set)) {
    if (set_.labels.empty()) throw contract_error("objective needs a nonempty evaluation set");
    if (set_.x.shape() != Shape{set_.labels.size(), model_.spec.input_dim})
        throw contract_error("evaluation set does not match the model's input width");
    center_ = flatten_weights(model_);
    for (double w : center_)
        if (!std::isfinite(w)) throw numeric_error("model weights are not finite");
    requantize_ = model_.quant && model_.quant->enabled && model_.quant->mode != QuantMode::Lsq;
}

double ModelObjective::value(const std::vector<double>& w) {
    assign_weights(model_, w);
    if (requantize_) {
        ModelState tmp = model_.clone();
        requantize_in_place(tmp);
        return loss_ce(forward(tmp, set_.x), set_.labels, Reduction::Sum).item();
    }
    return loss_ce(forward(model_, set_.x), set_.labels, Reduction::Sum).item();
}

std::vector<double> ModelObjective::gradient(const std::vector<double>& w) {
    assign_weights(model_, w);
    for (Tensor& p : model_.parameters()) p.zero_grad();
    loss_ce(forward(model_, set_.x), set_.labels, Reduction::Sum).backward();
    std::vector<double> flat;
    flat.reserve(center_.size());
    for (const Layer& layer : model_.layers) {
        const auto& gw = layer.weight.node()->grad;
        const auto& gb = layer.bias.node()->grad;
        flat.insert(flat.end(), gw.begin(), gw.end());
        flat.insert(flat.end(), gb.begin(), gb.end());
    }
    return flat;
}

FlatnessProfile flatness(Objective& obj, const std::vector<double>& gamma_grid,
                         std::size_t samples, std::uint64_t seed, std::string set_tag) {
    if (gamma_grid.empty()) throw contract_error("flatness needs a nonempty gamma grid");
    for (std::size_t i = 0; i < gamma_grid.size(); ++i) {
        if (gamma_grid[i] < 0.0) throw contract_error("flatness radii must be nonnegative");
        if (i > 0 && gamma_grid[i] <= gamma_grid[i - 1])
            throw contract_error("flatness radii must be strictly increasing");
    }
    if (samples < 2) throw contract_error("flatness needs >= 2 samples");

    const std::vector<double> w0 = obj.current();
    const std::size_t d = obj.dim();
    if (w0.size() != d) throw contract_error("objective center does not match its dimension");

    FlatnessProfile profile;
    profile.set_tag = std::move(set_tag);
    profile.default_samples = samples;
    profile.baseline = obj.value(w0);

    std::vector<double> w(d);
    for (std::size_t g = 0; g < gamma_grid.size(); ++g) {
        const double gamma = gamma_grid[g];
        auto rng = make_rng(derive_seed(seed, "flatness", g));
        std::normal_distribution<double> gauss(0.0, 1.0);

        std::vector<double> diffs;
        const std::size_t max_samples = samples * 4;
        std::size_t budget = samples;
        bool widened = false;
        double mean = 0.0, se = 0.0;
        while (true) {
            while (diffs.size() < budget) {
                double nrm = 0.0;
                for (std::size_t i = 0; i < d; ++i) {
                    w[i] = gauss(rng);
                    nrm += w[i] * w[i];
                }
                nrm = std::sqrt(nrm);
                if (nrm == 0.0) continue;  // resample the degenerate direction
                const double step = gamma / nrm;
                for (std::size_t i = 0; i < d; ++i) w[i] = w0[i] + step * w[i];
                diffs.push_back(obj.value(w) - profile.baseline);
            }
            double sum = 0.0;
            for (double v : diffs) sum += v;
            mean = sum / static_cast<double>(diffs.size());
            double ss = 0.0;
            for (double v : diffs) ss += (v - mean) * (v - mean);
            const double sd = std::sqrt(ss / static_cast<double>(diffs.size() - 1));
            se = sd / std::sqrt(static_cast<double>(diffs.size()));
            if (!(mean > 0.0) || se <= mean / 5.0 || budget >= max_samples) break;
            budget = std::min(budget * 2, max_samples);
            widened = true;
        }
        if (mean > 0.0 && se > mean / 5.0) profile.std_error_flag = true;
        profile.entries.push_back({gamma, mean, se, diffs.size(), widened});
    }
    return profile;
}

FlatnessProfile flatness(const ModelState& model, const EvalSet& set,
                         const std::vector<double>& gamma_grid, std::size_t samples,
                         std::uint64_t seed, std::string set_tag) {
    ModelObjective obj(model, set);
    return flatness(obj, gamma_grid, samples, seed, std::move(set_tag));
}

std::vector<double> default_gamma_grid(const ModelState& model) {
    const auto w = flatten_weights(model);
    const double scale = norm2(w) / std::sqrt(static_cast<double>(w.size()));
    std::vector<double> grid = {0.01, 0.02, 0.05, 0.1, 0.2, 0.5};
    for (double& g : grid) g *= scale;
    return grid;
}

std::vector<double> hvp(Objective& obj, const std::vector<double>& v) {
    if (v.size() != obj.dim()) throw contract_error("hvp vector does not match dimension");
    const double vn = norm2(v);
    if (vn == 0.0) throw contract_error("hvp needs a nonzero vector");
    const std::vector<double> w0 = obj.current();
    const double eps = 1e-4 * (1.0 + norm2(w0)) / vn;

    std::vector<double> wp(w0), wm(w0);
    for (std::size_t i = 0; i < w0.size(); ++i) {
        wp[i] += eps * v[i];
        wm[i] -= eps * v[i];
    }
    const auto gp = obj.gradient(wp);
    const auto gm = obj.gradient(wm);
    std::vector<double> out(w0.size());
    for (std::size_t i = 0; i < w0.size(); ++i) out[i] = (gp[i] - gm[i]) / (2.0 * eps);
    return out;
}

std::vector<double> hvp(const ModelState& model, const EvalSet& set,
                        const std::vector<double>& v) {
    ModelObjective obj(model, set);
    return hvp(obj, v);
}

TaylorTable taylor_residual(Objective& obj, const std::vector<double>& delta,
                            const std::vector<double>& scales) {
    if (delta.size() != obj.dim())
        throw contract_error("displacement does not match dimension");
    if (scales.empty()) throw contract_error("taylor_residual needs at least one scale");
    for (std::size_t i = 0; i < scales.size(); ++i) {
        if (!(scales[i] > 0.0)) throw contract_error("taylor scales must be positive");
        if (i > 0 && scales[i] >= scales[i - 1])
            throw contract_error("taylor scales must be strictly decreasing");
    }

    TaylorTable table;
    const double dn = norm2(delta);
    const std::vector<double> w0 = obj.current();
    const double base = obj.value(w0);
    if (dn == 0.0) {
        table.degenerate = true;
        for (double c : scales) table.rows.push_back({c, 0.0, 0.0});
        return table;
    }

    const auto grad = obj.gradient(w0);
    const auto hd = hvp(obj, delta);
    double gd = 0.0, dhd = 0.0;
    for (std::size_t i = 0; i < delta.size(); ++i) {
        gd += grad[i] * delta[i];
        dhd += delta[i] * hd[i];
    }

    std::vector<double> w(w0.size());
    for (double c : scales) {
        for (std::size_t i = 0; i < w0.size(); ++i) w[i] = w0[i] + c * delta[i];
        const double actual = obj.value(w);
        const double predicted = base + c * gd + 0.5 * c * c * dhd;
        table.rows.push_back({c, c * dn, std::abs(actual - predicted)});
    }
    return table;
}

ModelState softplus_clone(const ModelState& model) {
    ModelState out = model.clone();
    out.spec.activation = Activation::Softplus;
    out.quant.reset();
    out.moments.clear();
    return out;
}

std::vector<double> quant_displacement(const ModelState& model) {
    std::vector<double> delta(flatten_weights(model).size(), 0.0);
    if (!model.quant || !model.quant->enabled) return delta;
    const QuantState& q = *model.quant;
    const std::size_t layer_count = model.layers.size();
    std::size_t off = 0;
    for (std::size_t l = 0; l < layer_count; ++l) {
        const Tensor& w = model.layers[l].weight;
        if (q.layer_quantized(l, layer_count) && q.steps[l].defined()) {
            const auto wq = fake_quant_values(w.values(), q.steps[l].values(), w.shape()[0],
                                              w.shape()[1], q.spec);
            for (std::size_t i = 0; i < wq.size(); ++i)
                delta[off + i] = wq[i] - w.values()[i];
        }
        off += w.numel() + model.layers[l].bias.numel();
    }
    return delta;
}

TaylorTable taylor_residual(const ModelState& model, const EvalSet& set,
                            const std::vector<double>& scales, bool smooth_clone) {
    const auto delta = quant_displacement(model);
    if (smooth_clone) {
        ModelObjective obj(softplus_clone(model), set);
        return taylor_residual(obj, delta, scales);
    }
    ModelObjective obj(model, set);
    return taylor_residual(obj, delta, scales);
}

CurvatureReport curvature(Objective& obj, std::size_t trace_probes,
                          std::size_t power_iterations, std::uint64_t seed) {
    if (trace_probes < 1) throw contract_error("curvature needs >= 1 trace probe");
    if (power_iterations < 20) throw contract_error("power iteration needs >= 20 iterations");
    const std::size_t d = obj.dim();

    CurvatureReport report;
    report.trace_probes = trace_probes;
    report.power_iterations = power_iterations;

    auto trng = make_rng(derive_seed(seed, "hutchinson"));
    double trace_sum = 0.0;
    std::vector<double> v(d);
    for (std::size_t p = 0; p < trace_probes; ++p) {
        for (double& x : v) x = (trng() & 1ull) ? 1.0 : -1.0;
        const auto hv = hvp(obj, v);
        double vhv = 0.0;
        for (std::size_t i = 0; i < d; ++i) vhv += v[i] * hv[i];
        trace_sum += vhv;
    }
    report.trace_estimate = trace_sum / static_cast<double>(trace_probes);

    auto prng = make_rng(derive_seed(seed, "power"));
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (double& x : v) x = gauss(prng);
    double vn = norm2(v);
    if (vn == 0.0) {
        v[0] = 1.0;
        vn = 1.0;
    }
    for (double& x : v) x /= vn;
    double rayleigh = 0.0;
    for (std::size_t it = 0; it < power_iterations; ++it) {
        auto hv = hvp(obj, v);
        rayleigh = 0.0;
        for (std::size_t i = 0; i < d; ++i) rayleigh += v[i] * hv[i];
        const double hn = norm2(hv);
        if (hn == 0.0) break;  // H annihilated the probe; eigenvalue 0
        for (std::size_t i = 0; i < d; ++i) v[i] = hv[i] / hn;
    }
    report.top_eigenvalue = rayleigh;
    return report;
}

CurvatureReport curvature(const ModelState& model, const EvalSet& set, std::size_t trace_probes,
                          std::size_t power_iterations, std::uint64_t seed) {
    ModelObjective obj(model, set);
    return curvature(obj, trace_probes, power_iterations, seed);
}

std::string flatness_csv(const FlatnessProfile& profile) {
    std::string out = "gamma,mean,stderr,samples,set\n";
    for (const FlatnessEntry& e : profile.entries) {
        out += format_double(e.gamma);
        out += ',';
        out += format_double(e.mean);
        out += ',';
        out += format_double(e.std_error);
        out += ',';
        out += std::to_string(e.samples);
        out += ',';
        out += profile.set_tag;
        out += '\n';
    }
    return out;
}

void write_flatness_csv(const FlatnessProfile& profile, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot open '" + path + "' for writing");
    out << flatness_csv(profile);
    if (!out) throw io_error("failed writing '" + path + "'");
}

std::string curvature_json(const CurvatureReport& report) {
    json j;
    j["trace_estimate"] = report.trace_estimate;
    j["trace_probes"] = report.trace_probes;
    j["top_eigenvalue"] = report.top_eigenvalue;
    j["power_iterations"] = report.power_iterations;
    json rows = json::array();
    for (const TaylorRow& r : report.taylor.rows)
        rows.push_back({{"scale", r.scale}, {"delta_norm", r.delta_norm},
                        {"residual", r.residual}});
    j["taylor"] = {{"degenerate", report.taylor.degenerate}, {"rows", std::move(rows)}};
    return j.dump(2);
}

void write_curvature_json(const CurvatureReport& report, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot open '" + path + "' for writing");
    out << curvature_json(report) << "\n";
    if (!out) throw io_error("failed writing '" + path + "'");
}

}  // namespace qdg
