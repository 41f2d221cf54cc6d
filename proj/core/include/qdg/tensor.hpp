#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "qdg/errors.hpp"

namespace qdg {

using Shape = std::vector<std::size_t>;

// One node on the reverse-mode tape. Values are immutable after creation
// except for leaf tensors updated between tape builds (optimizer steps);
// grad buffers are the only state backward() mutates. A tape is confined
// to a single thread.
struct TensorNode {
    Shape shape;
    std::vector<double> values;
    bool requires_grad = false;
    std::vector<double> grad;  // same length as values once touched
    std::uint64_t seq = 0;     // creation order; a valid topological order
    std::string op;
    std::vector<std::shared_ptr<TensorNode>> parents;
    // Reads this->grad and accumulates into the parents' grad buffers.
    std::function<void(TensorNode&)> backward;

    std::size_t numel() const { return values.size(); }
    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
    }
    void accumulate_grad(const std::vector<double>& g);
};

// Value-semantic handle to a shared tape node.
class Tensor {
  public:
    Tensor() = default;

    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);
    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, double v, bool requires_grad = false);
    static Tensor uniform(const Shape& shape, double lo, double hi, std::mt19937_64& rng,
                          bool requires_grad = false);
    static Tensor gaussian(const Shape& shape, double mean, double sd, std::mt19937_64& rng,
                           bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t numel() const;
    const std::vector<double>& values() const;
    // In-place mutation hook for leaf parameters (optimizer updates between tape builds).
    std::vector<double>& mutable_values();
    bool requires_grad() const;
    const std::vector<double>& grad() const;
    bool has_grad() const;
    void zero_grad();
    double item() const;
    double at(std::size_t i) const;

    // Reverse pass from a scalar loss; grads accumulate additively.
    void backward() const;

    // Extension point: a node with externally supplied forward values and backward rule.
    using BackwardFn = std::function<void(TensorNode&)>;
    static Tensor make_op(std::string op, Shape shape, std::vector<double> values,
                          std::vector<Tensor> parents, BackwardFn backward_fn);

    std::shared_ptr<TensorNode> node() const { return node_; }

    // Deep copy of values only (fresh leaf, no tape history).
    Tensor detach_copy(bool requires_grad = false) const;

  private:
    explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}
    std::shared_ptr<TensorNode> node_;
};

Tensor matmul(const Tensor& a, const Tensor& b);                // [m×k]·[k×n]
Tensor add(const Tensor& a, const Tensor& b);                   // same shape or scalar broadcast
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double s);
Tensor mul(const Tensor& a, double s);
Tensor relu(const Tensor& a);                                   // relu'(0) = 0
Tensor softplus(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor mean(const Tensor& a);                                   // full reduction to scalar
Tensor sum(const Tensor& a);
Tensor add_bias(const Tensor& mat, const Tensor& bias);         // [m×n] rows + [n]

// Maps the upstream gradient (given the input values) to the input gradient.
using GradRule = std::function<std::vector<double>(const std::vector<double>& upstream,
                                                   const std::vector<double>& input_values)>;

// Forward behaves as forward_values; backward applies rule verbatim and routes
// the result into input. forward_values must match input's shape.
Tensor custom_grad(const Tensor& input, std::vector<double> forward_values, GradRule rule);

void check_finite(const std::vector<double>& v, const char* what);

}  // namespace qdg
