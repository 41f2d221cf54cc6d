#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "qdg/tensor.hpp"

namespace qdg {

struct ModelState;  // nn.hpp

// Uniform quantizer range. For signed data Q_N = 2^(b-1), Q_P = 2^(b-1)-1;
// unsigned data has Q_N = 0, Q_P = 2^b - 1.
struct QuantSpec {
    int bits = 8;
    bool is_signed = true;
    bool quantize_last_layer = false;

    std::int64_t q_neg() const { return is_signed ? (std::int64_t{1} << (bits - 1)) : 0; }
    std::int64_t q_pos() const {
        return is_signed ? (std::int64_t{1} << (bits - 1)) - 1 : (std::int64_t{1} << bits) - 1;
    }
    void validate() const;  // bits >= 2
};

// Rounding convention used everywhere in this library: half away from zero.
inline std::int64_t round_half_away(double x) { return std::llround(x); }

// Integer code for one weight: clip w/s to [-Q_N, Q_P], rounding inside the
// open interval and saturating at the ends.
std::int64_t quantize_int(double w, double s, const QuantSpec& spec);

// Back to weight scale: w_q = code * s. The code must lie in [-Q_N, Q_P].
double dequantize(std::int64_t code, double s, const QuantSpec& spec);

// Per-output-channel step sizes: s_c = 2 * mean(|W_c|) / sqrt(Q_P), floored
// at 1e-8. W is row-major [rows x cols]; channel = row.
std::vector<double> init_steps(const std::vector<double>& w, std::size_t rows, std::size_t cols,
                               const QuantSpec& spec);
Tensor init_steps(const Tensor& weight, const QuantSpec& spec, bool trainable);

// Elementwise fake quantization of a [rows x cols] weight matrix with one
// step size per row. Pure value computation, shared by the tape op and PTQ.
std::vector<double> fake_quant_values(const std::vector<double>& w,
                                      const std::vector<double>& steps, std::size_t rows,
                                      std::size_t cols, const QuantSpec& spec);

struct LsqGrads {
    std::vector<double> grad_w;  // [rows x cols]
    std::vector<double> grad_s;  // [rows]
};

// Straight-through weight gradient gated by the clip range, and the learned
// step-size gradient:
//   grad_w[i] = upstream[i]           if -Q_N < w[i]/s < Q_P, else 0
//   grad_s[c] = g * sum_i upstream[i] * r_i
//   r_i = round(w/s) - w/s in range, -Q_N below, Q_P above
//   g   = 1 / sqrt(N_w * Q_P), N_w = weights per channel
LsqGrads lsq_backward(const std::vector<double>& w, const std::vector<double>& steps,
                      const std::vector<double>& upstream, std::size_t rows, std::size_t cols,
                      const QuantSpec& spec);

// Tape op: forward is fake_quant_values, backward is lsq_backward. The full
// precision weight stays the latent master copy; steps is a [rows] tensor.
Tensor fake_quant(const Tensor& weight, const Tensor& steps, const QuantSpec& spec);

enum class QuantMode { Lsq, PtqRtn, Incremental };

std::string quant_mode_name(QuantMode mode);
QuantMode quant_mode_from_name(const std::string& name);

// Quantizer state attached to a model. steps is aligned with the model's
// layers; non-quantized layers keep an undefined Tensor. frozen masks are
// used only in incremental mode and grow monotonically.
struct QuantState {
    QuantSpec spec;
    QuantMode mode = QuantMode::Lsq;
    bool enabled = false;
    std::vector<Tensor> steps;
    std::vector<std::vector<std::uint8_t>> frozen;
    std::vector<double> stage_fractions;
    std::size_t next_stage = 0;

    bool layer_quantized(std::size_t layer, std::size_t layer_count) const {
        return enabled && (spec.quantize_last_layer || layer + 1 < layer_count);
    }
};

// Enables LSQ fake quantization: initializes per-channel steps from the
// current weights and makes them trainable parameters.
void enable_lsq(ModelState& model, const QuantSpec& spec);

// One-shot round-to-nearest post-training quantization with init_steps
// scales; no retraining. Rejects a model that is already quantized.
ModelState ptq_round_to_nearest(const ModelState& model, const QuantSpec& spec);

// Incremental quantization: validates the stage schedule (strictly
// increasing, final stage 1.0) and initializes steps and empty masks.
void enable_incremental(ModelState& model, const QuantSpec& spec,
                        const std::vector<double>& stage_fractions);

// Applies the next stage: per quantized layer, freezes the largest-magnitude
// not-yet-frozen weights at their grid values until the stage fraction of all
// weights is frozen. Frozen weights are excluded from optimizer updates.
void incremental_step(ModelState& model);

// True once every stage has been applied.
bool incremental_done(const ModelState& model);

struct SizeAccounting {
    std::size_t quantized_weight_count = 0;
    std::size_t full_precision_param_count = 0;  // unquantized weights plus all biases
    int bits = 32;
    double quantized_layer_compression = 1.0;  // 32 / b
    double model_bytes = 0.0;                  // b/8 per quantized weight, 4 per fp param
    double fp32_model_bytes = 0.0;             // 4 bytes per parameter baseline
};

SizeAccounting size_accounting(const ModelState& model);

// Integer codes + per-channel steps + spec header, for size accounting and
// external consumption. Format "qdg-quantized", version 1.
std::string quantized_export_json(const ModelState& model);
void write_quantized_export(const ModelState& model, const std::string& path);

}  // namespace qdg
