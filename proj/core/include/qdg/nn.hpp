#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "qdg/quant.hpp"
#include "qdg/tensor.hpp"

namespace qdg {

enum class Activation { Relu, Softplus };

struct MlpSpec {
    std::size_t input_dim = 0;
    std::vector<std::size_t> hidden_dims;
    std::size_t num_classes = 0;
    Activation activation = Activation::Relu;
    std::uint64_t seed = 0;

    void validate() const;  // all dims >= 1, at least one hidden layer
    std::vector<std::size_t> layer_dims() const;  // input, hidden..., classes
};

struct Layer {
    Tensor weight;  // [out x in]; rows are output channels
    Tensor bias;    // [out]
};

enum class OptimizerKind { Sgd, Adam };

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::Adam;
    double learning_rate = 1e-3;
    double momentum = 0.0;  // sgd
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.0;

    void validate() const;  // lr > 0, betas in (0,1)
};

// First and second moment buffers for one parameter; t counts updates since
// the parameter was registered, so step sizes joining at T_q get fresh bias
// correction.
struct ParamMoments {
    std::vector<double> m;
    std::vector<double> v;
    long t = 0;
};

struct ModelState {
    MlpSpec spec;
    std::vector<Layer> layers;
    long step = 0;
    std::vector<ParamMoments> moments;  // aligned with parameters()
    std::optional<QuantState> quant;

    // Trainable parameters in a fixed order: weight, bias per layer, then the
    // step-size tensors of quantized layers in LSQ mode.
    std::vector<Tensor> parameters();
    std::size_t weight_param_count() const;  // weights + biases
    ModelState clone() const;
};

ModelState init_model(const MlpSpec& spec);  // He-uniform weights, zero biases

// Logits [batch x classes]. With an active LSQ quantizer the quantized layers
// use fake-quantized effective weights; the last layer stays full precision
// unless QuantSpec::quantize_last_layer is set.
Tensor forward(ModelState& model, const Tensor& x);

enum class Reduction { Mean, Sum };

// Softmax cross entropy, stabilized by per-row max subtraction.
Tensor loss_ce(const Tensor& logits, const std::vector<int>& labels,
               Reduction reduction = Reduction::Mean);

// Parameter update per the config; increments the step counter. Requires
// populated gradients for every trainable parameter.
void optimizer_step(ModelState& model, const OptimizerConfig& config);

std::vector<double> softmax_row(const std::vector<double>& logits, std::size_t offset,
                                std::size_t classes);
// Ties broken by lowest class index.
std::size_t argmax_class(const std::vector<double>& logits, std::size_t offset,
                         std::size_t classes);

double accuracy(ModelState& model, const Tensor& x, const std::vector<int>& labels);

// Full weight+bias vector in parameter order (step sizes excluded); the
// parameter space used by the landscape diagnostics.
std::vector<double> flatten_weights(const ModelState& model);
void assign_weights(ModelState& model, const std::vector<double>& flat);

// Checkpoint container: spec, step counter, parameters, quantizer state,
// optimizer moments, RNG state. JSON, format "qdg-checkpoint", version 1;
// the header carries the quantizer bit-width (32 when full precision).
std::string checkpoint_to_json(const ModelState& model, const std::string& rng_state = "");
ModelState checkpoint_from_json(const std::string& text, std::string* rng_state = nullptr);
void save_checkpoint(const ModelState& model, const std::string& path,
                     const std::string& rng_state = "");
ModelState load_checkpoint(const std::string& path, std::string* rng_state = nullptr);

}  // namespace qdg
