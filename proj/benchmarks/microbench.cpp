#include <benchmark/benchmark.h>

#include <optional>
#include <vector>

#include "qdg/data.hpp"
#include "qdg/nn.hpp"
#include "qdg/quant.hpp"
#include "qdg/rng.hpp"
#include "qdg/tensor.hpp"
#include "qdg/trainer.hpp"

using namespace qdg;

namespace {

void bm_quantize_int(benchmark::State& state) {
    QuantSpec q;
    q.bits = static_cast<int>(state.range(0));
    auto rng = make_rng(1);
    std::uniform_real_distribution<double> dist(-3.0, 3.0);
    std::vector<double> w(4096);
    for (double& x : w) x = dist(rng);
    for (auto _ : state) {
        std::int64_t acc = 0;
        for (double x : w) acc += quantize_int(x, 0.05, q);
        benchmark::DoNotOptimize(acc);
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(w.size()));
}

void bm_fake_quant_layer(benchmark::State& state) {
    const std::size_t n = static_cast<std::size_t>(state.range(0));
    auto rng = make_rng(2);
    Tensor w = Tensor::gaussian({n, n}, 0.0, 0.5, rng, true);
    QuantSpec q;
    q.bits = 8;
    const Tensor steps = init_steps(w, q, false);
    for (auto _ : state) {
        Tensor out = fake_quant(w, steps, q);
        benchmark::DoNotOptimize(out.node()->values.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n));
}

void bm_matmul(benchmark::State& state) {
    const std::size_t n = static_cast<std::size_t>(state.range(0));
    auto rng = make_rng(3);
    Tensor a = Tensor::gaussian({n, n}, 0.0, 1.0, rng);
    Tensor b = Tensor::gaussian({n, n}, 0.0, 1.0, rng);
    for (auto _ : state) {
        Tensor c = matmul(a, b);
        benchmark::DoNotOptimize(c.node()->values.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}

void bm_train_step(benchmark::State& state) {
    DomainDataset ds = gen_spurious_blobs(200, {0.5, -0.5}, 1.5, 7, 4);
    SplitPlan plan = split_leave_one_out(ds, ds.domains.back().name, 0.2, 8);
    TrainConfig c;
    c.total_steps = static_cast<long>(state.range(0));
    c.validate_every = c.total_steps;
    c.hidden_dims = {32, 16};
    c.batch_per_domain = 16;
    c.quantize_at_step = c.total_steps / 2;
    c.quant.bits = 6;
    c.seed = 9;
    for (auto _ : state) {
        RunRecord rec = train(ds, plan, c);
        benchmark::DoNotOptimize(rec.points.data());
    }
    state.SetItemsProcessed(state.iterations() * c.total_steps);
}

BENCHMARK(bm_quantize_int)->Arg(4)->Arg(8);
BENCHMARK(bm_fake_quant_layer)->Arg(64)->Arg(256);
BENCHMARK(bm_matmul)->Arg(32)->Arg(128);
BENCHMARK(bm_train_step)->Arg(50)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
