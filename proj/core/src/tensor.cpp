#include "qdg/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <unordered_set>

namespace qdg {

namespace {

std::atomic<std::uint64_t> g_seq{0};

std::size_t shape_numel(const Shape& shape) {
    if (shape.empty()) throw dimension_error("tensor shape must have at least one extent");
    std::size_t n = 1;
    for (std::size_t e : shape) {
        if (e == 0) throw dimension_error("tensor extents must be positive");
        n *= e;
    }
    return n;
}

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

std::shared_ptr<TensorNode> new_node(Shape shape, std::vector<double> values, bool requires_grad,
                                     std::string op) {
    auto n = std::make_shared<TensorNode>();
    if (shape_numel(shape) != values.size())
        throw dimension_error("tensor data length does not match shape " + shape_str(shape));
    n->shape = std::move(shape);
    n->values = std::move(values);
    n->requires_grad = requires_grad;
    n->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
    n->op = std::move(op);
    return n;
}

}  // namespace

void check_finite(const std::vector<double>& v, const char* what) {
    for (double x : v) {
        if (!std::isfinite(x)) throw numeric_error(std::string("non-finite value in ") + what);
    }
}

void TensorNode::accumulate_grad(const std::vector<double>& g) {
    if (g.size() != values.size())
        throw contract_error("gradient length mismatch for op '" + op + "'");
    ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    return Tensor(new_node(std::move(shape), std::move(values), requires_grad, "leaf"));
}

Tensor Tensor::scalar(double v, bool requires_grad) { return from({1}, {v}, requires_grad); }

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    return from(shape, std::vector<double>(shape_numel(shape), 0.0), requires_grad);
}

Tensor Tensor::full(const Shape& shape, double v, bool requires_grad) {
    return from(shape, std::vector<double>(shape_numel(shape), v), requires_grad);
}

Tensor Tensor::uniform(const Shape& shape, double lo, double hi, std::mt19937_64& rng,
                       bool requires_grad) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = dist(rng);
    return from(shape, std::move(v), requires_grad);
}

Tensor Tensor::gaussian(const Shape& shape, double mean, double sd, std::mt19937_64& rng,
                        bool requires_grad) {
    std::normal_distribution<double> dist(mean, sd);
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = dist(rng);
    return from(shape, std::move(v), requires_grad);
}

const Shape& Tensor::shape() const {
    if (!node_) throw contract_error("use of undefined tensor");
    return node_->shape;
}

std::size_t Tensor::numel() const { return node_ ? node_->numel() : 0; }

const std::vector<double>& Tensor::values() const {
    if (!node_) throw contract_error("use of undefined tensor");
    return node_->values;
}

std::vector<double>& Tensor::mutable_values() {
    if (!node_) throw contract_error("use of undefined tensor");
    return node_->values;
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

const std::vector<double>& Tensor::grad() const {
    if (!node_ || !node_->requires_grad)
        throw contract_error("grad requested on a tensor without requires_grad");
    if (node_->grad.size() != node_->values.size())
        throw contract_error("gradient not populated; run backward() or zero_grad() first");
    return node_->grad;
}

bool Tensor::has_grad() const { return node_ && node_->grad.size() == node_->values.size(); }

void Tensor::zero_grad() {
    if (!node_) return;
    node_->grad.assign(node_->values.size(), 0.0);
}

double Tensor::item() const {
    if (numel() != 1) throw contract_error("item() requires a scalar tensor");
    return node_->values[0];
}

double Tensor::at(std::size_t i) const {
    if (!node_ || i >= node_->values.size()) throw contract_error("tensor index out of range");
    return node_->values[i];
}

Tensor Tensor::make_op(std::string op, Shape shape, std::vector<double> values,
                       std::vector<Tensor> parents, BackwardFn backward_fn) {
    bool rg = false;
    for (const Tensor& p : parents) rg = rg || p.requires_grad();
    auto n = new_node(std::move(shape), std::move(values), rg, std::move(op));
    if (rg) {
        n->parents.reserve(parents.size());
        for (const Tensor& p : parents) n->parents.push_back(p.node());
        n->backward = std::move(backward_fn);
    }
    return Tensor(std::move(n));
}

Tensor Tensor::detach_copy(bool requires_grad) const {
    if (!node_) throw contract_error("use of undefined tensor");
    return from(node_->shape, node_->values, requires_grad);
}

void Tensor::backward() const {
    if (!node_) throw contract_error("backward on undefined tensor");
    if (numel() != 1) throw contract_error("backward requires a scalar loss");
    if (!node_->requires_grad)
        throw contract_error("backward requires a loss with requires_grad on the tape");

    // Collect the reachable grad-bearing subgraph; creation order is a
    // topological order, so descending seq visits children before parents.
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> seen;
    std::vector<TensorNode*> stack{node_.get()};
    seen.insert(node_.get());
    while (!stack.empty()) {
        TensorNode* cur = stack.back();
        stack.pop_back();
        order.push_back(cur);
        for (const auto& p : cur->parents) {
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
        }
    }
    std::sort(order.begin(), order.end(),
              [](const TensorNode* a, const TensorNode* b) { return a->seq > b->seq; });

    node_->ensure_grad();
    node_->grad[0] += 1.0;
    for (TensorNode* n : order) {
        if (n->backward) {
            n->ensure_grad();
            n->backward(*n);
        }
    }
}

namespace {

enum class EwKind { Add, Sub, Mul };

Tensor elementwise_binary(const Tensor& a, const Tensor& b, EwKind kind, const char* name) {
    check_finite(a.values(), name);
    check_finite(b.values(), name);
    const bool a_scalar = a.numel() == 1;
    const bool b_scalar = b.numel() == 1;
    if (!a_scalar && !b_scalar && a.shape() != b.shape())
        throw dimension_error(std::string(name) + ": shapes must match or one operand be scalar");

    const Shape& out_shape = a_scalar && !b_scalar ? b.shape() : a.shape();
    const std::size_t n = a_scalar && !b_scalar ? b.numel() : a.numel();
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double x = av[a_scalar ? 0 : i];
        const double y = bv[b_scalar ? 0 : i];
        out[i] = kind == EwKind::Add ? x + y : kind == EwKind::Sub ? x - y : x * y;
    }

    auto an = a.node(), bn = b.node();
    return Tensor::make_op(name, out_shape, std::move(out), {a, b}, [=](TensorNode& self) {
        const auto& up = self.grad;
        const std::size_t n = up.size();
        if (an->requires_grad) {
            std::vector<double> ga(an->numel(), 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                double g = up[i];
                if (kind == EwKind::Mul) g *= bn->values[b_scalar ? 0 : i];
                else if (kind == EwKind::Sub) g = g;  // d/da (a-b) = 1
                ga[a_scalar ? 0 : i] += g;
            }
            an->accumulate_grad(ga);
        }
        if (bn->requires_grad) {
            std::vector<double> gb(bn->numel(), 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                double g = up[i];
                if (kind == EwKind::Mul) g *= an->values[a_scalar ? 0 : i];
                else if (kind == EwKind::Sub) g = -g;
                gb[b_scalar ? 0 : i] += g;
            }
            bn->accumulate_grad(gb);
        }
    });
}

Tensor elementwise_unary(const Tensor& a, const char* name,
                         const std::function<double(double)>& f,
                         const std::function<double(double, double)>& dfdx_of_x_and_y) {
    check_finite(a.values(), name);
    const auto& av = a.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
    check_finite(out, name);

    auto an = a.node();
    return Tensor::make_op(name, a.shape(), std::move(out), {a},
                           [an, dfdx_of_x_and_y](TensorNode& self) {
                               std::vector<double> g(self.numel());
                               for (std::size_t i = 0; i < g.size(); ++i)
                                   g[i] = self.grad[i] *
                                          dfdx_of_x_and_y(an->values[i], self.values[i]);
                               an->accumulate_grad(g);
                           });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2)
        throw dimension_error("matmul requires rank-2 tensors");
    const std::size_t m = a.shape()[0], k = a.shape()[1];
    const std::size_t k2 = b.shape()[0], n = b.shape()[1];
    if (k != k2)
        throw dimension_error("matmul inner extents differ: " + std::to_string(k) + " vs " +
                              std::to_string(k2));
    check_finite(a.values(), "matmul");
    check_finite(b.values(), "matmul");

    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * bv[p * n + j];
        }

    auto an = a.node(), bn = b.node();
    return Tensor::make_op("matmul", {m, n}, std::move(out), {a, b}, [=](TensorNode& self) {
        const auto& up = self.grad;
        if (an->requires_grad) {
            std::vector<double> ga(m * k, 0.0);  // dA = dY · B^T
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    const double u = up[i * n + j];
                    for (std::size_t p = 0; p < k; ++p) ga[i * k + p] += u * bn->values[p * n + j];
                }
            an->accumulate_grad(ga);
        }
        if (bn->requires_grad) {
            std::vector<double> gb(k * n, 0.0);  // dB = A^T · dY
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double aip = an->values[i * k + p];
                    for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * up[i * n + j];
                }
            bn->accumulate_grad(gb);
        }
    });
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise_binary(a, b, EwKind::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise_binary(a, b, EwKind::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise_binary(a, b, EwKind::Mul, "mul"); }
Tensor add(const Tensor& a, double s) { return add(a, Tensor::scalar(s)); }
Tensor mul(const Tensor& a, double s) { return mul(a, Tensor::scalar(s)); }

Tensor relu(const Tensor& a) {
    return elementwise_unary(
        a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor softplus(const Tensor& a) {
    // log(1 + e^x), evaluated stably; derivative is the logistic function.
    return elementwise_unary(
        a, "softplus",
        [](double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); },
        [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

Tensor exp(const Tensor& a) {
    return elementwise_unary(a, "exp", [](double x) { return std::exp(x); },
                             [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    for (double x : a.values())
        if (x <= 0.0) throw numeric_error("log of non-positive value");
    return elementwise_unary(a, "log", [](double x) { return std::log(x); },
                             [](double x, double) { return 1.0 / x; });
}

namespace {

Tensor reduce_all(const Tensor& a, bool take_mean) {
    check_finite(a.values(), take_mean ? "mean" : "sum");
    const double denom = take_mean ? static_cast<double>(a.numel()) : 1.0;
    double acc = 0.0;
    for (double x : a.values()) acc += x;
    acc /= denom;
    auto an = a.node();
    return Tensor::make_op(take_mean ? "mean" : "sum", {1}, {acc}, {a},
                           [an, denom](TensorNode& self) {
                               std::vector<double> g(an->numel(), self.grad[0] / denom);
                               an->accumulate_grad(g);
                           });
}

}  // namespace

Tensor mean(const Tensor& a) { return reduce_all(a, true); }
Tensor sum(const Tensor& a) { return reduce_all(a, false); }

Tensor add_bias(const Tensor& mat, const Tensor& bias) {
    if (mat.shape().size() != 2 || bias.shape().size() != 1)
        throw dimension_error("add_bias expects a matrix and a vector");
    const std::size_t m = mat.shape()[0], n = mat.shape()[1];
    if (bias.shape()[0] != n) throw dimension_error("add_bias width mismatch");
    check_finite(mat.values(), "add_bias");
    check_finite(bias.values(), "add_bias");

    std::vector<double> out(mat.values());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bias.values()[j];

    auto mn = mat.node(), bn = bias.node();
    return Tensor::make_op("add_bias", mat.shape(), std::move(out), {mat, bias},
                           [=](TensorNode& self) {
                               if (mn->requires_grad) mn->accumulate_grad(self.grad);
                               if (bn->requires_grad) {
                                   std::vector<double> gb(n, 0.0);
                                   for (std::size_t i = 0; i < m; ++i)
                                       for (std::size_t j = 0; j < n; ++j)
                                           gb[j] += self.grad[i * n + j];
                                   bn->accumulate_grad(gb);
                               }
                           });
}

Tensor custom_grad(const Tensor& input, std::vector<double> forward_values, GradRule rule) {
    if (forward_values.size() != input.numel())
        throw contract_error("custom_grad forward values must match the input shape");
    check_finite(forward_values, "custom_grad");
    auto in = input.node();
    return Tensor::make_op(
        "custom_grad", input.shape(), std::move(forward_values), {input},
        [in, rule = std::move(rule)](TensorNode& self) {
            std::vector<double> g = rule(self.grad, in->values);
            if (g.size() != in->numel())
                throw contract_error("custom_grad rule produced a shape-incompatible gradient");
            in->accumulate_grad(g);
        });
}

}  // namespace qdg
