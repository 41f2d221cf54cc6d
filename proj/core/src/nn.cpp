#include "qdg/nn.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "qdg/rng.hpp"

namespace qdg {

using json = nlohmann::ordered_json;

void MlpSpec::validate() const {
    if (input_dim < 1) throw contract_error("input_dim must be >= 1");
    if (num_classes < 1) throw contract_error("num_classes must be >= 1");
    if (hidden_dims.empty()) throw contract_error("at least one hidden layer required");
    for (std::size_t d : hidden_dims)
        if (d < 1) throw contract_error("hidden dims must be >= 1");
}

std::vector<std::size_t> MlpSpec::layer_dims() const {
    std::vector<std::size_t> dims;
    dims.reserve(hidden_dims.size() + 2);
    dims.push_back(input_dim);
    dims.insert(dims.end(), hidden_dims.begin(), hidden_dims.end());
    dims.push_back(num_classes);
    return dims;
}

void OptimizerConfig::validate() const {
    if (!(learning_rate > 0.0)) throw contract_error("learning rate must be positive");
    if (momentum < 0.0) throw contract_error("momentum must be nonnegative");
    if (!(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0))
        throw contract_error("Adam betas must lie in (0, 1)");
    if (!(epsilon > 0.0)) throw contract_error("Adam epsilon must be positive");
    if (weight_decay < 0.0) throw contract_error("weight decay must be nonnegative");
}

std::vector<Tensor> ModelState::parameters() {
    std::vector<Tensor> out;
    out.reserve(layers.size() * 2 + (quant ? quant->steps.size() : 0));
    for (Layer& layer : layers) {
        out.push_back(layer.weight);
        out.push_back(layer.bias);
    }
    if (quant && quant->enabled && quant->mode == QuantMode::Lsq)
        for (Tensor& s : quant->steps)
            if (s.defined()) out.push_back(s);
    return out;
}

std::size_t ModelState::weight_param_count() const {
    std::size_t n = 0;
    for (const Layer& layer : layers) n += layer.weight.numel() + layer.bias.numel();
    return n;
}

ModelState ModelState::clone() const {
    ModelState out;
    out.spec = spec;
    out.step = step;
    out.moments = moments;
    out.layers.reserve(layers.size());
    for (const Layer& layer : layers)
        out.layers.push_back({layer.weight.detach_copy(layer.weight.requires_grad()),
                              layer.bias.detach_copy(layer.bias.requires_grad())});
    if (quant) {
        QuantState q;
        q.spec = quant->spec;
        q.mode = quant->mode;
        q.enabled = quant->enabled;
        q.frozen = quant->frozen;
        q.stage_fractions = quant->stage_fractions;
        q.next_stage = quant->next_stage;
        q.steps.reserve(quant->steps.size());
        for (const Tensor& s : quant->steps)
            q.steps.push_back(s.defined() ? s.detach_copy(s.requires_grad()) : Tensor());
        out.quant = std::move(q);
    }
    return out;
}

ModelState init_model(const MlpSpec& spec) {
    spec.validate();
    ModelState model;
    model.spec = spec;
    const auto dims = spec.layer_dims();
    model.layers.reserve(dims.size() - 1);
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        const std::size_t fan_in = dims[l], fan_out = dims[l + 1];
        auto rng = make_rng(derive_seed(spec.seed, "init", l));
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        Layer layer;
        layer.weight = Tensor::uniform({fan_out, fan_in}, -bound, bound, rng, true);
        layer.bias = Tensor::zeros({fan_out}, true);
        model.layers.push_back(std::move(layer));
    }
    return model;
}

namespace {

// y = x W^T + b with x [batch x in], W [out x in], b [out].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.shape().size() != 2 || w.shape().size() != 2 || b.shape().size() != 1)
        throw dimension_error("linear expects x [batch x in], W [out x in], b [out]");
    const std::size_t batch = x.shape()[0], in = x.shape()[1];
    const std::size_t out_dim = w.shape()[0];
    if (w.shape()[1] != in)
        throw dimension_error("linear: input width " + std::to_string(in) +
                              " does not match weight columns " + std::to_string(w.shape()[1]));
    if (b.shape()[0] != out_dim)
        throw dimension_error("linear: bias length does not match output channels");

    const auto& xv = x.values();
    const auto& wv = w.values();
    const auto& bv = b.values();
    std::vector<double> yv(batch * out_dim);
    for (std::size_t i = 0; i < batch; ++i)
        for (std::size_t o = 0; o < out_dim; ++o) {
            double acc = bv[o];
            const std::size_t xoff = i * in, woff = o * in;
            for (std::size_t k = 0; k < in; ++k) acc += xv[xoff + k] * wv[woff + k];
            yv[i * out_dim + o] = acc;
        }

    auto xn = x.node();
    auto wn = w.node();
    auto bn = b.node();
    return Tensor::make_op(
        "linear", {batch, out_dim}, std::move(yv), {x, w, b},
        [xn, wn, bn, batch, in, out_dim](TensorNode& self) {
            const auto& dy = self.grad;
            if (xn->requires_grad) {
                std::vector<double> dx(batch * in, 0.0);
                for (std::size_t i = 0; i < batch; ++i)
                    for (std::size_t o = 0; o < out_dim; ++o) {
                        const double g = dy[i * out_dim + o];
                        if (g == 0.0) continue;
                        const std::size_t woff = o * in;
                        for (std::size_t k = 0; k < in; ++k)
                            dx[i * in + k] += g * wn->values[woff + k];
                    }
                xn->accumulate_grad(dx);
            }
            if (wn->requires_grad) {
                std::vector<double> dw(out_dim * in, 0.0);
                for (std::size_t i = 0; i < batch; ++i)
                    for (std::size_t o = 0; o < out_dim; ++o) {
                        const double g = dy[i * out_dim + o];
                        if (g == 0.0) continue;
                        const std::size_t xoff = i * in;
                        for (std::size_t k = 0; k < in; ++k)
                            dw[o * in + k] += g * xn->values[xoff + k];
                    }
                wn->accumulate_grad(dw);
            }
            if (bn->requires_grad) {
                std::vector<double> db(out_dim, 0.0);
                for (std::size_t i = 0; i < batch; ++i)
                    for (std::size_t o = 0; o < out_dim; ++o) db[o] += dy[i * out_dim + o];
                bn->accumulate_grad(db);
            }
        });
}

Tensor activate(const Tensor& t, Activation act) {
    switch (act) {
        case Activation::Relu: return relu(t);
        case Activation::Softplus: return softplus(t);
    }
    throw contract_error("unknown activation");
}

}  // namespace

Tensor forward(ModelState& model, const Tensor& x) {
    if (x.shape().size() != 2)
        throw dimension_error("forward expects a [batch x input_dim] tensor");
    if (x.shape()[1] != model.spec.input_dim)
        throw dimension_error("forward: input width " + std::to_string(x.shape()[1]) +
                              " does not match input_dim " +
                              std::to_string(model.spec.input_dim));

    const bool lsq = model.quant && model.quant->enabled && model.quant->mode == QuantMode::Lsq;
    const std::size_t layer_count = model.layers.size();
    Tensor h = x;
    for (std::size_t l = 0; l < layer_count; ++l) {
        Tensor w = model.layers[l].weight;
        if (lsq && model.quant->layer_quantized(l, layer_count))
            w = fake_quant(w, model.quant->steps[l], model.quant->spec);
        h = linear(h, w, model.layers[l].bias);
        if (l + 1 < layer_count) h = activate(h, model.spec.activation);
    }
    return h;
}

Tensor loss_ce(const Tensor& logits, const std::vector<int>& labels, Reduction reduction) {
    if (logits.shape().size() != 2)
        throw dimension_error("loss_ce expects [batch x classes] logits");
    const std::size_t batch = logits.shape()[0], classes = logits.shape()[1];
    if (labels.size() != batch)
        throw contract_error("loss_ce: one label required per logits row");
    for (int y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= classes)
            throw contract_error("loss_ce: label " + std::to_string(y) + " outside [0, " +
                                 std::to_string(classes) + ")");

    const auto& lv = logits.values();
    double total = 0.0;
    std::vector<double> probs(batch * classes);
    for (std::size_t i = 0; i < batch; ++i) {
        const std::size_t off = i * classes;
        double m = lv[off];
        for (std::size_t c = 1; c < classes; ++c) m = std::max(m, lv[off + c]);
        double z = 0.0;
        for (std::size_t c = 0; c < classes; ++c) {
            probs[off + c] = std::exp(lv[off + c] - m);
            z += probs[off + c];
        }
        for (std::size_t c = 0; c < classes; ++c) probs[off + c] /= z;
        total += m + std::log(z) - lv[off + static_cast<std::size_t>(labels[i])];
    }
    const double scale = reduction == Reduction::Mean ? 1.0 / static_cast<double>(batch) : 1.0;

    auto ln = logits.node();
    return Tensor::make_op(
        "loss_ce", {1}, {total * scale}, {logits},
        [ln, labels, probs = std::move(probs), batch, classes, scale](TensorNode& self) {
            if (!ln->requires_grad) return;
            const double up = self.grad[0] * scale;
            std::vector<double> dl(batch * classes);
            for (std::size_t i = 0; i < batch; ++i) {
                const std::size_t off = i * classes;
                for (std::size_t c = 0; c < classes; ++c) dl[off + c] = up * probs[off + c];
                dl[off + static_cast<std::size_t>(labels[i])] -= up;
            }
            ln->accumulate_grad(dl);
        });
}

void optimizer_step(ModelState& model, const OptimizerConfig& config) {
    config.validate();
    auto params = model.parameters();
    if (model.moments.size() > params.size())
        throw contract_error("optimizer moments outnumber parameters");
    model.moments.resize(params.size());

    const bool incremental =
        model.quant && model.quant->enabled && model.quant->mode == QuantMode::Incremental;

    for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor& param = params[p];
        if (!param.has_grad())
            throw contract_error("optimizer_step: gradient not populated for parameter " +
                                 std::to_string(p));
        auto& values = param.mutable_values();
        const auto& grad = param.node()->grad;
        ParamMoments& mom = model.moments[p];
        if (mom.m.size() != values.size()) {
            mom.m.assign(values.size(), 0.0);
            mom.v.assign(values.size(), 0.0);
            mom.t = 0;
        }

        const std::uint8_t* frozen = nullptr;
        if (incremental && p % 2 == 0 && p / 2 < model.quant->frozen.size() &&
            !model.quant->frozen[p / 2].empty())
            frozen = model.quant->frozen[p / 2].data();

        if (config.kind == OptimizerKind::Sgd) {
            for (std::size_t i = 0; i < values.size(); ++i) {
                if (frozen && frozen[i]) continue;
                const double g = grad[i] + config.weight_decay * values[i];
                if (config.momentum > 0.0) {
                    mom.m[i] = config.momentum * mom.m[i] + g;
                    values[i] -= config.learning_rate * mom.m[i];
                } else {
                    values[i] -= config.learning_rate * g;
                }
            }
        } else {
            mom.t += 1;
            const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(mom.t));
            const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(mom.t));
            for (std::size_t i = 0; i < values.size(); ++i) {
                if (frozen && frozen[i]) continue;
                const double g = grad[i] + config.weight_decay * values[i];
                mom.m[i] = config.beta1 * mom.m[i] + (1.0 - config.beta1) * g;
                mom.v[i] = config.beta2 * mom.v[i] + (1.0 - config.beta2) * g * g;
                const double mhat = mom.m[i] / bc1;
                const double vhat = mom.v[i] / bc2;
                values[i] -= config.learning_rate * mhat / (std::sqrt(vhat) + config.epsilon);
            }
        }
    }
    model.step += 1;
}

std::vector<double> softmax_row(const std::vector<double>& logits, std::size_t offset,
                                std::size_t classes) {
    if (classes == 0 || offset + classes > logits.size())
        throw contract_error("softmax_row: range out of bounds");
    std::vector<double> out(classes);
    double m = logits[offset];
    for (std::size_t c = 1; c < classes; ++c) m = std::max(m, logits[offset + c]);
    double z = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
        out[c] = std::exp(logits[offset + c] - m);
        z += out[c];
    }
    for (double& v : out) v /= z;
    return out;
}

std::size_t argmax_class(const std::vector<double>& logits, std::size_t offset,
                         std::size_t classes) {
    if (classes == 0 || offset + classes > logits.size())
        throw contract_error("argmax_class: range out of bounds");
    std::size_t best = 0;
    for (std::size_t c = 1; c < classes; ++c)
        if (logits[offset + c] > logits[offset + best]) best = c;
    return best;
}

double accuracy(ModelState& model, const Tensor& x, const std::vector<int>& labels) {
    if (x.shape().size() != 2 || x.shape()[0] != labels.size())
        throw contract_error("accuracy: one label required per input row");
    if (labels.empty()) throw contract_error("accuracy: empty evaluation set");
    Tensor logits = forward(model, x);
    const std::size_t classes = logits.shape()[1];
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (argmax_class(logits.values(), i * classes, classes) ==
            static_cast<std::size_t>(labels[i]))
            ++hits;
    return static_cast<double>(hits) / static_cast<double>(labels.size());
}

std::vector<double> flatten_weights(const ModelState& model) {
    std::vector<double> flat;
    flat.reserve(model.weight_param_count());
    for (const Layer& layer : model.layers) {
        const auto& w = layer.weight.values();
        const auto& b = layer.bias.values();
        flat.insert(flat.end(), w.begin(), w.end());
        flat.insert(flat.end(), b.begin(), b.end());
    }
    return flat;
}

void assign_weights(ModelState& model, const std::vector<double>& flat) {
    if (flat.size() != model.weight_param_count())
        throw contract_error("assign_weights: expected " +
                             std::to_string(model.weight_param_count()) + " values, got " +
                             std::to_string(flat.size()));
    std::size_t off = 0;
    for (Layer& layer : model.layers) {
        auto& w = layer.weight.mutable_values();
        std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off),
                  flat.begin() + static_cast<std::ptrdiff_t>(off + w.size()), w.begin());
        off += w.size();
        auto& b = layer.bias.mutable_values();
        std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off),
                  flat.begin() + static_cast<std::ptrdiff_t>(off + b.size()), b.begin());
        off += b.size();
    }
}

namespace {

const char* activation_name(Activation a) {
    return a == Activation::Relu ? "relu" : "softplus";
}

Activation activation_from_name(const std::string& name) {
    if (name == "relu") return Activation::Relu;
    if (name == "softplus") return Activation::Softplus;
    throw io_error("checkpoint: unknown activation '" + name + "'");
}

}  // namespace

std::string checkpoint_to_json(const ModelState& model, const std::string& rng_state) {
    json j;
    j["format"] = "qdg-checkpoint";
    j["version"] = 1;
    j["bits"] = model.quant && model.quant->enabled ? model.quant->spec.bits : 32;
    j["spec"] = {{"input_dim", model.spec.input_dim},
                 {"hidden_dims", model.spec.hidden_dims},
                 {"num_classes", model.spec.num_classes},
                 {"activation", activation_name(model.spec.activation)},
                 {"seed", model.spec.seed}};
    j["step"] = model.step;

    json layers = json::array();
    for (const Layer& layer : model.layers)
        layers.push_back({{"rows", layer.weight.shape()[0]},
                          {"cols", layer.weight.shape()[1]},
                          {"weight", layer.weight.values()},
                          {"bias", layer.bias.values()}});
    j["layers"] = std::move(layers);

    json moments = json::array();
    for (const ParamMoments& mom : model.moments)
        moments.push_back({{"m", mom.m}, {"v", mom.v}, {"t", mom.t}});
    j["moments"] = std::move(moments);

    if (model.quant) {
        const QuantState& q = *model.quant;
        json steps = json::array();
        for (const Tensor& s : q.steps) {
            if (s.defined()) steps.push_back(s.values());
            else steps.push_back(nullptr);
        }
        j["quant"] = {{"bits", q.spec.bits},
                      {"signed", q.spec.is_signed},
                      {"quantize_last_layer", q.spec.quantize_last_layer},
                      {"mode", quant_mode_name(q.mode)},
                      {"enabled", q.enabled},
                      {"steps", std::move(steps)},
                      {"frozen", q.frozen},
                      {"stage_fractions", q.stage_fractions},
                      {"next_stage", q.next_stage}};
    } else {
        j["quant"] = nullptr;
    }
    j["rng_state"] = rng_state;
    return j.dump(2);
}

ModelState checkpoint_from_json(const std::string& text, std::string* rng_state) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw io_error(std::string("checkpoint parse error: ") + e.what());
    }
    try {
        if (j.at("format").get<std::string>() != "qdg-checkpoint")
            throw io_error("not a checkpoint file");
        if (j.at("version").get<int>() != 1)
            throw io_error("unsupported checkpoint version");

        MlpSpec spec;
        const json& js = j.at("spec");
        spec.input_dim = js.at("input_dim").get<std::size_t>();
        spec.hidden_dims = js.at("hidden_dims").get<std::vector<std::size_t>>();
        spec.num_classes = js.at("num_classes").get<std::size_t>();
        spec.activation = activation_from_name(js.at("activation").get<std::string>());
        spec.seed = js.at("seed").get<std::uint64_t>();
        spec.validate();

        ModelState model;
        model.spec = spec;
        model.step = j.at("step").get<long>();
        const auto dims = spec.layer_dims();
        const json& jl = j.at("layers");
        if (jl.size() != dims.size() - 1) throw io_error("checkpoint: layer count mismatch");
        for (std::size_t l = 0; l < jl.size(); ++l) {
            const std::size_t rows = jl[l].at("rows").get<std::size_t>();
            const std::size_t cols = jl[l].at("cols").get<std::size_t>();
            if (rows != dims[l + 1] || cols != dims[l])
                throw io_error("checkpoint: layer shape mismatch");
            auto w = jl[l].at("weight").get<std::vector<double>>();
            auto b = jl[l].at("bias").get<std::vector<double>>();
            if (w.size() != rows * cols || b.size() != rows)
                throw io_error("checkpoint: parameter length mismatch");
            Layer layer;
            layer.weight = Tensor::from({rows, cols}, std::move(w), true);
            layer.bias = Tensor::from({rows}, std::move(b), true);
            model.layers.push_back(std::move(layer));
        }

        for (const json& jm : j.at("moments")) {
            ParamMoments mom;
            mom.m = jm.at("m").get<std::vector<double>>();
            mom.v = jm.at("v").get<std::vector<double>>();
            mom.t = jm.at("t").get<long>();
            model.moments.push_back(std::move(mom));
        }

        if (!j.at("quant").is_null()) {
            const json& jq = j.at("quant");
            QuantState q;
            q.spec.bits = jq.at("bits").get<int>();
            q.spec.is_signed = jq.at("signed").get<bool>();
            q.spec.quantize_last_layer = jq.at("quantize_last_layer").get<bool>();
            q.mode = quant_mode_from_name(jq.at("mode").get<std::string>());
            q.enabled = jq.at("enabled").get<bool>();
            const json& jsteps = jq.at("steps");
            if (jsteps.size() != model.layers.size())
                throw io_error("checkpoint: quantizer steps mismatch");
            for (std::size_t l = 0; l < jsteps.size(); ++l) {
                if (jsteps[l].is_null()) {
                    q.steps.emplace_back();
                } else {
                    auto s = jsteps[l].get<std::vector<double>>();
                    const std::size_t count = s.size();
                    if (count != model.layers[l].weight.shape()[0])
                        throw io_error("checkpoint: step count mismatch");
                    q.steps.push_back(Tensor::from({count}, std::move(s),
                                                   q.mode == QuantMode::Lsq));
                }
            }
            q.frozen = jq.at("frozen").get<std::vector<std::vector<std::uint8_t>>>();
            q.stage_fractions = jq.at("stage_fractions").get<std::vector<double>>();
            q.next_stage = jq.at("next_stage").get<std::size_t>();
            model.quant = std::move(q);
        }
        if (rng_state) *rng_state = j.at("rng_state").get<std::string>();
        return model;
    } catch (const json::exception& e) {
        throw io_error(std::string("checkpoint field error: ") + e.what());
    }
}

void save_checkpoint(const ModelState& model, const std::string& path,
                     const std::string& rng_state) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot open '" + path + "' for writing");
    out << checkpoint_to_json(model, rng_state) << "\n";
    if (!out) throw io_error("failed writing '" + path + "'");
}

ModelState load_checkpoint(const std::string& path, std::string* rng_state) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return checkpoint_from_json(buf.str(), rng_state);
}

}  // namespace qdg
