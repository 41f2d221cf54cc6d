#include <doctest.h>

#include <cmath>

#include "qdg/trainer.hpp"

using namespace qdg;

namespace {

DomainDataset easy_blobs(std::uint64_t seed = 2) {
    return gen_spurious_blobs(120, {0.2, -0.2}, 3.0, seed, 4);
}

TrainConfig fast_config() {
    TrainConfig c;
    c.total_steps = 200;
    c.validate_every = 50;
    c.hidden_dims = {8};
    c.batch_per_domain = 8;
    c.seed = 5;
    return c;
}

RunRecord hand_record(const std::vector<long>& steps, const std::vector<double>& val,
                      const std::vector<double>& target = {}) {
    RunRecord rec;
    for (std::size_t i = 0; i < steps.size(); ++i) {
        ValidationPoint p;
        p.step = steps[i];
        p.val_acc = val[i];
        p.target_acc = target.empty() ? val[i] : target[i];
        rec.points.push_back(p);
    }
    return rec;
}

}  // namespace

TEST_SUITE_BEGIN("trainer");

TEST_CASE("config validation") {
    TrainConfig c = fast_config();
    CHECK_NOTHROW(c.validate());
    c.quantize_at_step = 0;
    CHECK_THROWS_AS(c.validate(), contract_error);
    c.quantize_at_step = 200;
    CHECK_THROWS_AS(c.validate(), contract_error);
    c.quantize_at_step = 100;
    CHECK_NOTHROW(c.validate());
    c.quant_mode = QuantMode::PtqRtn;
    CHECK_THROWS_AS(c.validate(), contract_error);
    c = fast_config();
    c.total_steps = 0;
    CHECK_THROWS_AS(c.validate(), contract_error);
    c = fast_config();
    c.validate_every = 0;
    CHECK_THROWS_AS(c.validate(), contract_error);
}

TEST_CASE("training reaches high accuracy on separable data and is deterministic") {
    const DomainDataset ds = easy_blobs();
    const SplitPlan plan = split_leave_one_out(ds, ds.domains.back().name, 0.2, 3);
    const TrainConfig c = fast_config();
    RunRecord a = train(ds, plan, c);
    RunRecord b = train(ds, plan, c);
    CHECK_FALSE(a.diverged);
    REQUIRE(!a.points.empty());
    CHECK(a.points.back().step == c.total_steps);
    CHECK(a.points.back().val_acc >= 0.9);
    CHECK(metrics_csv(a) == metrics_csv(b));
    CHECK(a.best_step == select_best_step(a));
}

TEST_CASE("metrics csv shape") {
    const DomainDataset ds = easy_blobs();
    const SplitPlan plan = split_leave_one_out(ds, ds.domains.back().name, 0.2, 3);
    TrainConfig c = fast_config();
    c.total_steps = 130;  // not a multiple of validate_every
    const RunRecord rec = train(ds, plan, c);
    const std::string csv = metrics_csv(rec);
    CHECK(csv.rfind("step,train_loss,val_acc,target_acc\n", 0) == 0);
    // Validation fires at 50, 100 and the final step 130.
    REQUIRE(rec.points.size() == 3);
    CHECK(rec.points[0].step == 50);
    CHECK(rec.points[1].step == 100);
    CHECK(rec.points[2].step == 130);
    std::size_t lines = 0;
    for (char ch : csv)
        if (ch == '\n') ++lines;
    CHECK(lines == 4);
}

TEST_CASE("quantization enables exactly at the configured step") {
    const DomainDataset ds = easy_blobs();
    const SplitPlan plan = split_leave_one_out(ds, ds.domains.back().name, 0.2, 3);
    TrainConfig c = fast_config();
    c.quantize_at_step = 100;
    c.quant.bits = 6;
    c.retain_checkpoints = true;
    const RunRecord rec = train(ds, plan, c);
    CHECK_FALSE(rec.diverged);
    REQUIRE(rec.checkpoints.size() == rec.points.size());
    // Snapshot at step 50 is still full precision, 100 onward is quantized.
    CHECK_FALSE(rec.checkpoints[0].quant.has_value());
    REQUIRE(rec.checkpoints[1].quant.has_value());
    CHECK(rec.checkpoints[1].quant->enabled);
    CHECK(rec.last.quant.has_value());
    CHECK(rec.last.quant->spec.bits == 6);
}

TEST_CASE("pre-quantization prefix matches the plain run bit for bit") {
    const DomainDataset ds = easy_blobs();
    const SplitPlan plan = split_leave_one_out(ds, ds.domains.back().name, 0.2, 3);
    TrainConfig erm = fast_config();
    TrainConfig qat = fast_config();
    qat.quantize_at_step = 199;
    const RunRecord a = train(ds, plan, erm);
    const RunRecord b = train(ds, plan, qat);
    REQUIRE(a.points.size() == b.points.size());
    for (std::size_t i = 0; i < a.points.size(); ++i) {
        if (b.points[i].step >= 199) continue;
        CHECK(a.points[i].train_loss == b.points[i].train_loss);
        CHECK(a.points[i].val_acc == b.points[i].val_acc);
        CHECK(a.points[i].target_acc == b.points[i].target_acc);
    }
}

TEST_CASE("fine-grid quantization tracks the plain run closely") {
    const DomainDataset ds = easy_blobs();
    const SplitPlan plan = split_leave_one_out(ds, ds.domains.back().name, 0.2, 3);
    TrainConfig erm = fast_config();
    TrainConfig qat = fast_config();
    qat.quantize_at_step = 100;
    qat.quant.bits = 16;
    const RunRecord a = train(ds, plan, erm);
    const RunRecord b = train(ds, plan, qat);
    REQUIRE(a.points.size() == b.points.size());
    for (std::size_t i = 0; i < a.points.size(); ++i)
        CHECK(std::abs(a.points[i].val_acc - b.points[i].val_acc) <= 0.01 + 1e-12);
}

TEST_CASE("incremental mode freezes everything by the end") {
    const DomainDataset ds = easy_blobs();
    const SplitPlan plan = split_leave_one_out(ds, ds.domains.back().name, 0.2, 3);
    TrainConfig c = fast_config();
    c.quantize_at_step = 100;
    c.quant_mode = QuantMode::Incremental;
    c.stage_fractions = {0.5, 1.0};
    RunRecord rec = train(ds, plan, c);
    CHECK_FALSE(rec.diverged);
    REQUIRE(rec.last.quant.has_value());
    CHECK(rec.last.quant->mode == QuantMode::Incremental);
    CHECK(incremental_done(rec.last));
    for (std::size_t l = 0; l + 1 < rec.last.layers.size(); ++l) {
        const auto& mask = rec.last.quant->frozen[l];
        for (auto f : mask) CHECK(f == 1);
        // Frozen weights sit on their quantization grid.
        const auto& w = rec.last.layers[l].weight;
        const auto snapped = fake_quant_values(w.values(), rec.last.quant->steps[l].values(),
                                               w.shape()[0], w.shape()[1], rec.last.quant->spec);
        CHECK(w.values() == snapped);
    }
}

TEST_CASE("diverging runs are recorded, not thrown") {
    const DomainDataset ds = easy_blobs();
    const SplitPlan plan = split_leave_one_out(ds, ds.domains.back().name, 0.2, 3);
    TrainConfig c = fast_config();
    c.optimizer.kind = OptimizerKind::Sgd;
    c.optimizer.learning_rate = 1e9;
    const RunRecord rec = train(ds, plan, c);
    CHECK(rec.diverged);
    CHECK(rec.diverged_step >= 1);
    CHECK_FALSE(rec.divergence_reason.empty());
}

TEST_CASE("select_best tie rules") {
    CHECK(select_best_step(hand_record({100, 200, 300}, {0.7, 0.9, 0.8})) == 200);
    CHECK(select_best_step(hand_record({500, 900}, {0.9, 0.9})) == 500);
    CHECK(select_best_step(hand_record({100, 200, 300}, {0.1, 0.2, 0.3})) == 300);
    CHECK_THROWS_AS(select_best(hand_record({}, {})), contract_error);
}

TEST_CASE("stability statistics") {
    const RunRecord rec = hand_record({100, 200, 300}, {0, 0, 0}, {0.5, 0.5, 0.5});
    const StabilityStats constant = stability_stats(rec, 100);
    CHECK(constant.mean == 0.5);
    CHECK(constant.stddev == 0.0);
    CHECK(constant.count == 3);
    CHECK_FALSE(constant.degenerate);

    const RunRecord two = hand_record({100, 200}, {0, 0}, {0.5, 0.7});
    const StabilityStats pair = stability_stats(two, 100);
    CHECK(pair.mean == doctest::Approx(0.6).epsilon(1e-14));
    CHECK(pair.stddev == doctest::Approx(std::sqrt(0.02)).epsilon(1e-12));

    const StabilityStats single = stability_stats(two, 200);
    CHECK(single.count == 1);
    CHECK(single.degenerate);
    CHECK(single.stddev == 0.0);

    CHECK_THROWS_AS(stability_stats(two, 1000), contract_error);
}

TEST_SUITE_END();
