#include <doctest.h>

#include <cmath>
#include <random>

#include "qdg/analysis.hpp"
#include "qdg/trainer.hpp"

using namespace qdg;

namespace {

// E(w) = 1/2 * sum_i lambda_i * w_i^2, optionally shifted off the origin.
class QuadraticObjective : public Objective {
  public:
    QuadraticObjective(std::vector<double> lambda, std::vector<double> center)
        : lambda_(std::move(lambda)), center_(std::move(center)) {}

    std::size_t dim() const override { return lambda_.size(); }
    double value(const std::vector<double>& w) override {
        double s = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) s += lambda_[i] * w[i] * w[i];
        return 0.5 * s;
    }
    std::vector<double> gradient(const std::vector<double>& w) override {
        std::vector<double> g(w.size());
        for (std::size_t i = 0; i < w.size(); ++i) g[i] = lambda_[i] * w[i];
        return g;
    }
    std::vector<double> current() const override { return center_; }

  private:
    std::vector<double> lambda_;
    std::vector<double> center_;
};

// E(w) = sum_i a_i * w_i^3; its second-order Taylor residual is exactly cubic.
class CubicObjective : public Objective {
  public:
    explicit CubicObjective(std::vector<double> a, std::vector<double> center)
        : a_(std::move(a)), center_(std::move(center)) {}

    std::size_t dim() const override { return a_.size(); }
    double value(const std::vector<double>& w) override {
        double s = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) s += a_[i] * w[i] * w[i] * w[i];
        return s;
    }
    std::vector<double> gradient(const std::vector<double>& w) override {
        std::vector<double> g(w.size());
        for (std::size_t i = 0; i < w.size(); ++i) g[i] = 3.0 * a_[i] * w[i] * w[i];
        return g;
    }
    std::vector<double> current() const override { return center_; }

  private:
    std::vector<double> a_;
    std::vector<double> center_;
};

class LinearObjective : public Objective {
  public:
    explicit LinearObjective(std::vector<double> c) : c_(std::move(c)) {}
    std::size_t dim() const override { return c_.size(); }
    double value(const std::vector<double>& w) override {
        double s = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) s += c_[i] * w[i];
        return s;
    }
    std::vector<double> gradient(const std::vector<double>&) override { return c_; }
    std::vector<double> current() const override { return std::vector<double>(c_.size(), 0.3); }

  private:
    std::vector<double> c_;
};

// E(w) = k * relu(w_0): half of all random directions leave the value flat,
// so the sample noise never settles relative to the mean.
class HingeObjective : public Objective {
  public:
    explicit HingeObjective(std::size_t dim, double k) : dim_(dim), k_(k) {}
    std::size_t dim() const override { return dim_; }
    double value(const std::vector<double>& w) override { return k_ * std::max(w[0], 0.0); }
    std::vector<double> gradient(const std::vector<double>& w) override {
        std::vector<double> g(dim_, 0.0);
        g[0] = w[0] > 0.0 ? k_ : 0.0;
        return g;
    }
    std::vector<double> current() const override { return std::vector<double>(dim_, 0.0); }

  private:
    std::size_t dim_;
    double k_;
};

ModelState trained_toy(Activation act = Activation::Softplus) {
    const DomainDataset ds = gen_spurious_blobs(80, {0.3, -0.3}, 2.0, 4, 3);
    const SplitPlan plan = split_leave_one_out(ds, ds.domains.back().name, 0.2, 1);
    TrainConfig c;
    c.total_steps = 60;
    c.validate_every = 30;
    c.hidden_dims = {5};
    c.activation = act;
    c.batch_per_domain = 8;
    c.optimizer.learning_rate = 0.01;
    c.seed = 6;
    const RunRecord rec = train(ds, plan, c);
    REQUIRE(!rec.diverged);
    return rec.last;
}

EvalSet toy_eval() {
    const DomainDataset ds = gen_spurious_blobs(80, {0.3, -0.3}, 2.0, 4, 3);
    return EvalSet{ds.domains[0].x, ds.domains[0].labels};
}

}  // namespace

TEST_SUITE_BEGIN("analysis");

TEST_CASE("flatness of an isotropic quadratic at the origin is exactly half lambda gamma^2") {
    const double lambda = 3.0;
    QuadraticObjective obj(std::vector<double>(6, lambda), std::vector<double>(6, 0.0));
    const std::vector<double> grid{0.1, 0.2, 0.4};
    const FlatnessProfile p = flatness(obj, grid, 8, 42, "test");
    REQUIRE(p.entries.size() == 3);
    for (const FlatnessEntry& e : p.entries) {
        const double want = 0.5 * lambda * e.gamma * e.gamma;
        CHECK(std::abs(e.mean - want) <= 1e-12 * want);
        CHECK(e.std_error <= 1e-12);
        CHECK(e.samples == 8);
    }
    CHECK_FALSE(p.std_error_flag);
}

TEST_CASE("flatness at a shifted center stays within three standard errors") {
    const double lambda = 2.0;
    std::mt19937_64 rng(9);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<double> center(10);
    for (double& c : center) c = gauss(rng);
    QuadraticObjective obj(std::vector<double>(10, lambda), center);
    const std::vector<double> grid{0.05, 0.1, 0.2};
    const FlatnessProfile p = flatness(obj, grid, 100, 7, "test");
    for (const FlatnessEntry& e : p.entries) {
        const double want = 0.5 * lambda * e.gamma * e.gamma;
        CHECK(std::abs(e.mean - want) <= 3.0 * e.std_error + 1e-15);
    }
}

TEST_CASE("flatness gamma=0 sentinel is exactly zero") {
    QuadraticObjective obj({1.0, 2.0}, {0.5, -0.5});
    const FlatnessProfile p = flatness(obj, {0.0, 0.1}, 4, 1, "test");
    CHECK(p.entries[0].gamma == 0.0);
    CHECK(p.entries[0].mean == 0.0);
    CHECK(p.entries[0].std_error == 0.0);
}

TEST_CASE("flatness grid validation") {
    QuadraticObjective obj({1.0}, {0.0});
    CHECK_THROWS_AS(flatness(obj, {}, 4, 1, "t"), contract_error);
    CHECK_THROWS_AS(flatness(obj, {-0.1, 0.2}, 4, 1, "t"), contract_error);
    CHECK_THROWS_AS(flatness(obj, {0.2, 0.1}, 4, 1, "t"), contract_error);
    CHECK_THROWS_AS(flatness(obj, {0.1, 0.1}, 4, 1, "t"), contract_error);
    CHECK_THROWS_AS(flatness(obj, {0.1}, 1, 1, "t"), contract_error);
}

TEST_CASE("noisy profiles widen their sample budget and are flagged") {
    HingeObjective obj(6, 3.0);
    const FlatnessProfile p = flatness(obj, {0.5}, 8, 21, "test");
    REQUIRE(p.entries.size() == 1);
    CHECK(p.entries[0].widened);
    CHECK(p.entries[0].samples == 32);  // 4x the requested budget
    CHECK(p.std_error_flag);
    CHECK(p.default_samples == 8);
}

TEST_CASE("flatness csv schema") {
    QuadraticObjective obj({1.0, 2.0}, {0.0, 0.0});
    const FlatnessProfile p = flatness(obj, {0.0, 0.1, 0.2}, 4, 1, "source");
    const std::string csv = flatness_csv(p);
    CHECK(csv.rfind("gamma,mean,stderr,samples,set\n", 0) == 0);
    std::size_t lines = 0;
    for (char ch : csv)
        if (ch == '\n') ++lines;
    CHECK(lines == 4);
    CHECK(csv.find("source") != std::string::npos);
}

TEST_CASE("hvp on a diagonal quadratic returns lambda v") {
    const std::vector<double> lambda{1.0, 4.0, 9.0, 0.5};
    QuadraticObjective obj(lambda, {0.2, -0.3, 0.4, 1.0});
    const std::vector<double> v{1.0, -2.0, 0.5, 3.0};
    const auto hv = hvp(obj, v);
    for (std::size_t i = 0; i < v.size(); ++i)
        CHECK(std::abs(hv[i] - lambda[i] * v[i]) <= 1e-6 * std::abs(lambda[i] * v[i]));
}

TEST_CASE("hvp input validation") {
    QuadraticObjective obj({1.0, 2.0}, {0.0, 0.0});
    CHECK_THROWS_AS(hvp(obj, {1.0}), contract_error);
    CHECK_THROWS_AS(hvp(obj, {0.0, 0.0}), contract_error);
}

TEST_CASE("hvp is linear and symmetric on a smooth model") {
    ModelState m = trained_toy(Activation::Softplus);
    const EvalSet set = toy_eval();
    ModelObjective obj(m, set);
    std::mt19937_64 rng(31);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<double> v1(obj.dim()), v2(obj.dim());
    for (double& x : v1) x = gauss(rng);
    for (double& x : v2) x = gauss(rng);

    const auto h1 = hvp(obj, v1);
    const auto h2 = hvp(obj, v2);
    std::vector<double> v12(obj.dim());
    for (std::size_t i = 0; i < v12.size(); ++i) v12[i] = v1[i] + v2[i];
    const auto h12 = hvp(obj, v12);

    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < v12.size(); ++i) {
        const double want = h1[i] + h2[i];
        num += (h12[i] - want) * (h12[i] - want);
        den += want * want;
    }
    CHECK(std::sqrt(num) <= 1e-5 * std::sqrt(den));

    double a = 0.0, b = 0.0;
    for (std::size_t i = 0; i < v12.size(); ++i) {
        a += v1[i] * h2[i];
        b += v2[i] * h1[i];
    }
    CHECK(std::abs(a - b) <= 1e-5 * std::max(std::abs(a), std::abs(b)));
}

TEST_CASE("taylor residual of a linear objective vanishes") {
    LinearObjective obj({0.5, -1.5, 2.0});
    const TaylorTable t = taylor_residual(obj, {1.0, -1.0, 0.5}, {1.0, 0.5});
    CHECK_FALSE(t.degenerate);
    for (const TaylorRow& r : t.rows) CHECK(r.residual <= 1e-8);
}

TEST_CASE("taylor residual of a zero displacement is degenerate") {
    QuadraticObjective obj({1.0, 2.0}, {0.3, 0.3});
    const TaylorTable t = taylor_residual(obj, {0.0, 0.0}, {1.0, 0.5});
    CHECK(t.degenerate);
    for (const TaylorRow& r : t.rows) {
        CHECK(r.residual == 0.0);
        CHECK(r.delta_norm == 0.0);
    }
}

TEST_CASE("taylor residual of a cubic shrinks by exactly eight per halving") {
    CubicObjective obj({0.7, -0.3, 1.1}, {0.4, -0.2, 0.6});
    const TaylorTable t = taylor_residual(obj, {1.0, 0.5, -0.8}, {1.0, 0.5, 0.25, 0.125});
    REQUIRE(t.rows.size() == 4);
    for (std::size_t i = 0; i + 1 < t.rows.size(); ++i) {
        const double ratio = t.rows[i].residual / t.rows[i + 1].residual;
        CHECK(ratio == doctest::Approx(8.0).epsilon(1e-6));
    }
}

TEST_CASE("taylor scales must be positive and decreasing") {
    QuadraticObjective obj({1.0}, {0.1});
    CHECK_THROWS_AS(taylor_residual(obj, {1.0}, {0.5, 1.0}), contract_error);
    CHECK_THROWS_AS(taylor_residual(obj, {1.0}, {1.0, 1.0}), contract_error);
    CHECK_THROWS_AS(taylor_residual(obj, {1.0}, {-1.0}), contract_error);
    CHECK_THROWS_AS(taylor_residual(obj, {1.0}, {}), contract_error);
}

TEST_CASE("model objective value equals summed cross entropy") {
    ModelState m = trained_toy(Activation::Relu);
    const EvalSet set = toy_eval();
    ModelObjective obj(m, set);
    const double direct =
        loss_ce(forward(m, set.x), set.labels, Reduction::Sum).item();
    CHECK(obj.value(obj.current()) == doctest::Approx(direct).epsilon(1e-12));
}

TEST_CASE("model objective gradient matches finite differences") {
    ModelState m = trained_toy(Activation::Softplus);
    const DomainDataset ds = gen_spurious_blobs(20, {0.3, -0.3}, 2.0, 4, 3);
    const EvalSet set{ds.domains[0].x, ds.domains[0].labels};
    ModelObjective obj(m, set);
    const auto w0 = obj.current();
    const auto g = obj.gradient(w0);
    const double h = 1e-6;
    std::vector<double> w = w0;
    for (std::size_t i = 0; i < w.size(); i += 7) {  // spot-check a subset
        w[i] = w0[i] + h;
        const double up = obj.value(w);
        w[i] = w0[i] - h;
        const double down = obj.value(w);
        w[i] = w0[i];
        const double fd = (up - down) / (2.0 * h);
        CHECK(std::abs(g[i] - fd) <= 1e-5 * std::max(1.0, std::abs(fd)));
    }
}

TEST_CASE("ptq model objective snaps perturbations back to the grid") {
    ModelState m = trained_toy(Activation::Relu);
    QuantSpec q;
    q.bits = 6;
    ModelState p = ptq_round_to_nearest(m, q);
    const EvalSet set = toy_eval();
    ModelObjective obj(p, set);
    const auto w0 = obj.current();
    const double base = obj.value(w0);
    // Shift the first quantized weight by much less than half its step.
    const double s = p.quant->steps[0].values()[0];
    auto w = w0;
    w[0] += s / 8.0;
    CHECK(obj.value(w) == base);
}

TEST_CASE("default gamma grid scales with the weight norm") {
    ModelState m = trained_toy(Activation::Relu);
    const auto grid = default_gamma_grid(m);
    REQUIRE(grid.size() == 6);
    const auto w = flatten_weights(m);
    double nrm = 0.0;
    for (double x : w) nrm += x * x;
    const double scale = std::sqrt(nrm) / std::sqrt(static_cast<double>(w.size()));
    const std::vector<double> factors{0.01, 0.02, 0.05, 0.1, 0.2, 0.5};
    for (std::size_t i = 0; i < 6; ++i)
        CHECK(grid[i] == doctest::Approx(factors[i] * scale).epsilon(1e-12));
}

TEST_CASE("curvature on a diagonal quadratic") {
    const std::vector<double> lambda{0.5, 1.0, 5.0};
    QuadraticObjective obj(lambda, {0.1, 0.2, 0.3});
    const CurvatureReport r = curvature(obj, 4, 25, 3);
    // Rademacher probes are exact on a diagonal Hessian: z'Hz = sum(lambda).
    CHECK(r.trace_estimate == doctest::Approx(6.5).epsilon(1e-6));
    CHECK(r.trace_probes == 4);
    CHECK(r.top_eigenvalue == doctest::Approx(5.0).epsilon(1e-6));
    CHECK(r.power_iterations >= 25);
}

TEST_CASE("curvature parameter bounds") {
    QuadraticObjective obj({1.0}, {0.1});
    CHECK_THROWS_AS(curvature(obj, 0, 20, 1), contract_error);
    CHECK_THROWS_AS(curvature(obj, 4, 19, 1), contract_error);
}

TEST_CASE("curvature json carries the report fields") {
    QuadraticObjective obj({1.0, 2.0}, {0.1, 0.2});
    CurvatureReport r = curvature(obj, 2, 20, 5);
    r.taylor = taylor_residual(obj, {1.0, -1.0}, {1.0, 0.5});
    const std::string j = curvature_json(r);
    CHECK(j.find("trace_estimate") != std::string::npos);
    CHECK(j.find("top_eigenvalue") != std::string::npos);
    CHECK(j.find("taylor") != std::string::npos);
}

TEST_SUITE_END();
