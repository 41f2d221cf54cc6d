#include "qdg/quant.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "qdg/nn.hpp"

namespace qdg {

using json = nlohmann::ordered_json;

void QuantSpec::validate() const {
    if (bits < 2 || bits > 16) throw contract_error("quantizer bits must be in [2, 16]");
}

std::int64_t quantize_int(double w, double s, const QuantSpec& spec) {
    spec.validate();
    if (!(s > 0.0)) throw contract_error("quantizer step size must be positive");
    if (!std::isfinite(w)) throw numeric_error("quantize_int: non-finite weight");
    const double k = w / s;
    const auto qn = static_cast<double>(spec.q_neg());
    const auto qp = static_cast<double>(spec.q_pos());
    if (k <= -qn) return -spec.q_neg();
    if (k >= qp) return spec.q_pos();
    return round_half_away(k);
}

double dequantize(std::int64_t code, double s, const QuantSpec& spec) {
    spec.validate();
    if (!(s > 0.0)) throw contract_error("quantizer step size must be positive");
    if (code < -spec.q_neg() || code > spec.q_pos())
        throw contract_error("dequantize: code " + std::to_string(code) +
                             " outside [-Q_N, Q_P]");
    return static_cast<double>(code) * s;
}

std::vector<double> init_steps(const std::vector<double>& w, std::size_t rows, std::size_t cols,
                               const QuantSpec& spec) {
    spec.validate();
    if (rows == 0 || cols == 0 || w.size() != rows * cols)
        throw contract_error("init_steps: bad weight extent");
    std::vector<double> steps(rows);
    const double root_qp = std::sqrt(static_cast<double>(spec.q_pos()));
    for (std::size_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < cols; ++c) acc += std::abs(w[r * cols + c]);
        const double mean_abs = acc / static_cast<double>(cols);
        steps[r] = std::max(2.0 * mean_abs / root_qp, 1e-8);
    }
    return steps;
}

Tensor init_steps(const Tensor& weight, const QuantSpec& spec, bool trainable) {
    if (weight.shape().size() != 2) throw contract_error("init_steps expects a weight matrix");
    auto s = init_steps(weight.values(), weight.shape()[0], weight.shape()[1], spec);
    return Tensor::from({weight.shape()[0]}, std::move(s), trainable);
}

std::vector<double> fake_quant_values(const std::vector<double>& w,
                                      const std::vector<double>& steps, std::size_t rows,
                                      std::size_t cols, const QuantSpec& spec) {
    if (w.size() != rows * cols) throw contract_error("fake_quant: bad weight extent");
    if (steps.size() != rows)
        throw contract_error("fake_quant: one step size required per output channel");
    std::vector<double> out(w.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double s = steps[r];
        for (std::size_t c = 0; c < cols; ++c)
            out[r * cols + c] = dequantize(quantize_int(w[r * cols + c], s, spec), s, spec);
    }
    return out;
}

LsqGrads lsq_backward(const std::vector<double>& w, const std::vector<double>& steps,
                      const std::vector<double>& upstream, std::size_t rows, std::size_t cols,
                      const QuantSpec& spec) {
    if (w.size() != rows * cols || upstream.size() != w.size() || steps.size() != rows)
        throw contract_error("lsq_backward: shape mismatch");
    const auto qn = static_cast<double>(spec.q_neg());
    const auto qp = static_cast<double>(spec.q_pos());
    const double g = 1.0 / std::sqrt(static_cast<double>(cols) * qp);

    LsqGrads out;
    out.grad_w.assign(w.size(), 0.0);
    out.grad_s.assign(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        const double s = steps[r];
        double acc = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            const std::size_t i = r * cols + c;
            const double k = w[i] / s;
            double r_i;
            if (k <= -qn) {
                r_i = -qn;
            } else if (k >= qp) {
                r_i = qp;
            } else {
                out.grad_w[i] = upstream[i];
                r_i = static_cast<double>(round_half_away(k)) - k;
            }
            acc += upstream[i] * r_i;
        }
        out.grad_s[r] = g * acc;
    }
    return out;
}

Tensor fake_quant(const Tensor& weight, const Tensor& steps, const QuantSpec& spec) {
    if (weight.shape().size() != 2) throw contract_error("fake_quant expects a weight matrix");
    const std::size_t rows = weight.shape()[0], cols = weight.shape()[1];
    if (steps.shape() != Shape{rows})
        throw contract_error("fake_quant: one step size required per output channel");
    for (double s : steps.values())
        if (!(s > 0.0)) throw contract_error("fake_quant: step sizes must stay positive");

    auto values = fake_quant_values(weight.values(), steps.values(), rows, cols, spec);
    auto wn = weight.node();
    auto sn = steps.node();
    return Tensor::make_op(
        "fake_quant", weight.shape(), std::move(values), {weight, steps},
        [wn, sn, rows, cols, spec](TensorNode& self) {
            LsqGrads g = lsq_backward(wn->values, sn->values, self.grad, rows, cols, spec);
            if (wn->requires_grad) wn->accumulate_grad(g.grad_w);
            if (sn->requires_grad) sn->accumulate_grad(g.grad_s);
        });
}

std::string quant_mode_name(QuantMode mode) {
    switch (mode) {
        case QuantMode::Lsq: return "lsq";
        case QuantMode::PtqRtn: return "ptq-rtn";
        case QuantMode::Incremental: return "incremental";
    }
    throw contract_error("unknown quant mode");
}

QuantMode quant_mode_from_name(const std::string& name) {
    if (name == "lsq") return QuantMode::Lsq;
    if (name == "ptq-rtn") return QuantMode::PtqRtn;
    if (name == "incremental") return QuantMode::Incremental;
    throw config_error("unknown quantization mode '" + name + "'");
}

namespace {

void init_state_steps(ModelState& model, QuantState& state, bool trainable) {
    const std::size_t layer_count = model.layers.size();
    state.steps.assign(layer_count, Tensor());
    for (std::size_t l = 0; l < layer_count; ++l) {
        const bool quantized = state.spec.quantize_last_layer || l + 1 < layer_count;
        if (quantized) state.steps[l] = init_steps(model.layers[l].weight, state.spec, trainable);
    }
}

}  // namespace

void enable_lsq(ModelState& model, const QuantSpec& spec) {
    spec.validate();
    if (model.quant && model.quant->enabled)
        throw contract_error("model is already quantized");
    QuantState state;
    state.spec = spec;
    state.mode = QuantMode::Lsq;
    state.enabled = true;
    init_state_steps(model, state, /*trainable=*/true);
    model.quant = std::move(state);
}

ModelState ptq_round_to_nearest(const ModelState& model, const QuantSpec& spec) {
    spec.validate();
    if (model.quant && model.quant->enabled)
        throw contract_error("ptq_round_to_nearest: model is already quantized");
    ModelState out = model.clone();
    QuantState state;
    state.spec = spec;
    state.mode = QuantMode::PtqRtn;
    state.enabled = true;
    init_state_steps(out, state, /*trainable=*/false);
    const std::size_t layer_count = out.layers.size();
    for (std::size_t l = 0; l < layer_count; ++l) {
        if (!state.steps[l].defined()) continue;
        Tensor& w = out.layers[l].weight;
        w.mutable_values() = fake_quant_values(w.values(), state.steps[l].values(),
                                               w.shape()[0], w.shape()[1], spec);
    }
    out.quant = std::move(state);
    return out;
}

void enable_incremental(ModelState& model, const QuantSpec& spec,
                        const std::vector<double>& stage_fractions) {
    spec.validate();
    if (model.quant && model.quant->enabled)
        throw contract_error("model is already quantized");
    if (stage_fractions.empty()) throw contract_error("incremental schedule must be nonempty");
    for (std::size_t i = 0; i < stage_fractions.size(); ++i) {
        const double f = stage_fractions[i];
        if (!(f > 0.0) || f > 1.0) throw contract_error("stage fractions must lie in (0, 1]");
        if (i > 0 && f <= stage_fractions[i - 1])
            throw contract_error("stage fractions must be strictly increasing");
    }
    if (stage_fractions.back() != 1.0)
        throw contract_error("incremental schedule must end at fraction 1.0");

    QuantState state;
    state.spec = spec;
    state.mode = QuantMode::Incremental;
    state.enabled = true;
    state.stage_fractions = stage_fractions;
    state.next_stage = 0;
    init_state_steps(model, state, /*trainable=*/false);
    state.frozen.resize(model.layers.size());
    for (std::size_t l = 0; l < model.layers.size(); ++l)
        if (state.steps[l].defined())
            state.frozen[l].assign(model.layers[l].weight.numel(), 0);
    model.quant = std::move(state);
}

void incremental_step(ModelState& model) {
    if (!model.quant || model.quant->mode != QuantMode::Incremental || !model.quant->enabled)
        throw contract_error("incremental_step: incremental quantization not enabled");
    QuantState& state = *model.quant;
    if (state.next_stage >= state.stage_fractions.size())
        throw contract_error("incremental_step: schedule exhausted");
    const double fraction = state.stage_fractions[state.next_stage++];

    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        if (!state.steps[l].defined()) continue;
        Tensor& w = model.layers[l].weight;
        auto& vals = w.mutable_values();
        auto& mask = state.frozen[l];
        const std::size_t n = vals.size();
        const std::size_t cols = w.shape()[1];
        const auto target = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));

        std::vector<std::size_t> unfrozen;
        unfrozen.reserve(n);
        std::size_t frozen_count = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if (mask[i]) ++frozen_count;
            else unfrozen.push_back(i);
        }
        if (target <= frozen_count) continue;
        const std::size_t to_freeze = target - frozen_count;
        std::partial_sort(unfrozen.begin(), unfrozen.begin() + static_cast<std::ptrdiff_t>(to_freeze),
                          unfrozen.end(), [&](std::size_t a, std::size_t b) {
                              const double ma = std::abs(vals[a]), mb = std::abs(vals[b]);
                              if (ma != mb) return ma > mb;
                              return a < b;  // deterministic ties
                          });
        const auto& steps = state.steps[l].values();
        for (std::size_t j = 0; j < to_freeze; ++j) {
            const std::size_t i = unfrozen[j];
            const double s = steps[i / cols];
            vals[i] = dequantize(quantize_int(vals[i], s, state.spec), s, state.spec);
            mask[i] = 1;
        }
    }
}

bool incremental_done(const ModelState& model) {
    return model.quant && model.quant->mode == QuantMode::Incremental &&
           model.quant->next_stage >= model.quant->stage_fractions.size();
}

SizeAccounting size_accounting(const ModelState& model) {
    SizeAccounting acc;
    const bool quantized = model.quant && model.quant->enabled;
    acc.bits = quantized ? model.quant->spec.bits : 32;
    acc.quantized_layer_compression = 32.0 / static_cast<double>(acc.bits);
    const std::size_t layer_count = model.layers.size();
    for (std::size_t l = 0; l < layer_count; ++l) {
        const std::size_t w_count = model.layers[l].weight.numel();
        const std::size_t b_count = model.layers[l].bias.numel();
        const bool layer_q = quantized && model.quant->layer_quantized(l, layer_count);
        if (layer_q) acc.quantized_weight_count += w_count;
        else acc.full_precision_param_count += w_count;
        acc.full_precision_param_count += b_count;
    }
    const double qbytes = static_cast<double>(acc.quantized_weight_count) * acc.bits / 8.0;
    const double fpbytes = static_cast<double>(acc.full_precision_param_count) * 4.0;
    acc.model_bytes = qbytes + fpbytes;
    acc.fp32_model_bytes =
        static_cast<double>(acc.quantized_weight_count + acc.full_precision_param_count) * 4.0;
    return acc;
}

std::string quantized_export_json(const ModelState& model) {
    if (!model.quant || !model.quant->enabled)
        throw contract_error("quantized export requires a quantized model");
    const QuantState& state = *model.quant;
    json j;
    j["format"] = "qdg-quantized";
    j["version"] = 1;
    j["spec"] = {{"bits", state.spec.bits},
                 {"signed", state.spec.is_signed},
                 {"quantize_last_layer", state.spec.quantize_last_layer}};
    j["mode"] = quant_mode_name(state.mode);

    json layers = json::array();
    const std::size_t layer_count = model.layers.size();
    for (std::size_t l = 0; l < layer_count; ++l) {
        const Layer& layer = model.layers[l];
        json jl;
        const bool layer_q = state.layer_quantized(l, layer_count);
        jl["quantized"] = layer_q;
        jl["rows"] = layer.weight.shape()[0];
        jl["cols"] = layer.weight.shape()[1];
        if (layer_q) {
            const auto& steps = state.steps[l].values();
            const std::size_t cols = layer.weight.shape()[1];
            std::vector<std::int64_t> codes(layer.weight.numel());
            const auto& w = layer.weight.values();
            for (std::size_t i = 0; i < w.size(); ++i)
                codes[i] = quantize_int(w[i], steps[i / cols], state.spec);
            jl["codes"] = codes;
            jl["steps"] = steps;
        } else {
            jl["weight"] = layer.weight.values();
        }
        jl["bias"] = layer.bias.values();
        layers.push_back(std::move(jl));
    }
    j["layers"] = std::move(layers);

    const SizeAccounting acc = size_accounting(model);
    j["size_accounting"] = {{"quantized_weight_count", acc.quantized_weight_count},
                            {"full_precision_param_count", acc.full_precision_param_count},
                            {"bits", acc.bits},
                            {"quantized_layer_compression", acc.quantized_layer_compression},
                            {"model_bytes", acc.model_bytes},
                            {"fp32_model_bytes", acc.fp32_model_bytes}};
    return j.dump(2);
}

void write_quantized_export(const ModelState& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot open '" + path + "' for writing");
    out << quantized_export_json(model) << "\n";
    if (!out) throw io_error("failed writing '" + path + "'");
}

}  // namespace qdg
