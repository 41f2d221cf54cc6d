#include "qdg/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "qdg/parallel.hpp"
#include "qdg/quant.hpp"
#include "qdg/rng.hpp"

namespace qdg {

using json = nlohmann::ordered_json;

void EnsembleSpec::validate() const {
    if (members < 1) throw contract_error("ensemble needs >= 1 member");
    if (seeds.size() != members)
        throw contract_error("ensemble needs one seed pair per member");
    for (std::size_t i = 0; i < seeds.size(); ++i)
        for (std::size_t j = i + 1; j < seeds.size(); ++j)
            if (seeds[i] == seeds[j])
                throw contract_error("ensemble member seeds must be pairwise distinct");
    if (!(val_fraction > 0.0 && val_fraction < 1.0))
        throw contract_error("val_fraction must lie in (0, 1)");
    train.validate();
}

std::vector<MemberSeeds> make_member_seeds(std::uint64_t base_seed, std::size_t count) {
    std::vector<MemberSeeds> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i)
        out.push_back({derive_seed(base_seed, "split", i), derive_seed(base_seed, "train", i)});
    return out;
}

namespace {

void check_members(const std::vector<ModelState>& members) {
    if (members.empty()) throw contract_error("prediction needs >= 1 ensemble member");
    const MlpSpec& first = members.front().spec;
    for (const ModelState& m : members)
        if (m.spec.input_dim != first.input_dim || m.spec.num_classes != first.num_classes)
            throw contract_error("ensemble members disagree on input or output width");
}

// Averaged logits for every row of x, [n x classes].
std::vector<double> averaged_logits(std::vector<ModelState>& members, const Tensor& x) {
    check_members(members);
    const std::size_t n = x.shape()[0];
    const std::size_t classes = members.front().spec.num_classes;
    std::vector<double> avg(n * classes, 0.0);
    for (ModelState& m : members) {
        const Tensor logits = forward(m, x);
        const auto& lv = logits.values();
        for (std::size_t i = 0; i < avg.size(); ++i) avg[i] += lv[i];
    }
    const double inv = 1.0 / static_cast<double>(members.size());
    for (double& v : avg) v *= inv;
    return avg;
}

}  // namespace

EoqPrediction predict_eoq(std::vector<ModelState>& members, const std::vector<double>& x) {
    check_members(members);
    if (x.size() != members.front().spec.input_dim)
        throw contract_error("input width does not match the ensemble");
    const Tensor xt = Tensor::from({1, x.size()}, x);
    const auto avg = averaged_logits(members, xt);
    const std::size_t classes = members.front().spec.num_classes;
    EoqPrediction pred;
    pred.probabilities = softmax_row(avg, 0, classes);
    pred.label = argmax_class(avg, 0, classes);
    return pred;
}

std::vector<std::size_t> predict_eoq_batch(std::vector<ModelState>& members, const Tensor& x) {
    const auto avg = averaged_logits(members, x);
    const std::size_t classes = members.front().spec.num_classes;
    const std::size_t n = x.shape()[0];
    std::vector<std::size_t> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = argmax_class(avg, i * classes, classes);
    return out;
}

double eoq_accuracy(std::vector<ModelState>& members, const Tensor& x,
                    const std::vector<int>& labels) {
    if (x.shape()[0] != labels.size())
        throw contract_error("eoq_accuracy: one label required per input row");
    if (labels.empty()) throw contract_error("eoq_accuracy: empty evaluation set");
    const auto pred = predict_eoq_batch(members, x);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (pred[i] == static_cast<std::size_t>(labels[i])) ++hits;
    return static_cast<double>(hits) / static_cast<double>(labels.size());
}

EnsembleReport run_eoq(const DomainDataset& ds, const std::string& target_domain,
                       const EnsembleSpec& spec, std::size_t jobs) {
    spec.validate();
    ds.domain_index(target_domain);

    std::vector<RunRecord> records(spec.members);
    run_parallel(spec.members, jobs, [&](std::size_t i) {
        SplitPlan plan = split_leave_one_out(ds, target_domain, spec.val_fraction,
                                             spec.seeds[i].split_seed);
        TrainConfig config = spec.train;
        config.seed = spec.seeds[i].train_seed;
        records[i] = train(ds, plan, config);
    });

    EnsembleReport report;
    report.target_domain = target_domain;
    std::vector<ModelState> survivors;
    double member_acc_sum = 0.0;
    // The ideal size ratio is a property of the configured precision, not of
    // whichever checkpoint a member happened to select.
    const int ensemble_bits =
        spec.train.quantize_at_step ? spec.train.quant.bits : 32;
    for (std::size_t i = 0; i < spec.members; ++i) {
        const RunRecord& rec = records[i];
        MemberReport mr;
        mr.index = i;
        mr.seeds = spec.seeds[i];
        if (rec.diverged) {
            mr.failed = true;
            mr.diverged_step = rec.diverged_step;
            mr.failure = rec.divergence_reason;
            report.partial = true;
            report.members.push_back(std::move(mr));
            continue;
        }
        const ModelState& best = select_best(rec);
        mr.best_step = rec.best_step;
        const auto it = std::find_if(rec.points.begin(), rec.points.end(),
                                     [&](const ValidationPoint& p) {
                                         return p.step == rec.best_step;
                                     });
        if (it == rec.points.end())
            throw contract_error("member record lacks its best validation point");
        mr.val_acc = it->val_acc;
        mr.target_acc = it->target_acc;
        const SizeAccounting acc = size_accounting(best);
        mr.model_bytes = acc.model_bytes;
        mr.bits = acc.bits;
        if (survivors.empty()) report.fp32_baseline_bytes = acc.fp32_model_bytes;
        report.total_quantized_bytes += acc.model_bytes;
        member_acc_sum += mr.target_acc;
        survivors.push_back(best.clone());
        report.members.push_back(std::move(mr));
    }

    report.survivors = survivors.size();
    if (survivors.empty())
        throw divergence_error("every ensemble member diverged for target '" + target_domain +
                               "'");
    report.mean_member_target_acc = member_acc_sum / static_cast<double>(survivors.size());

    const Domain& target = ds.domain(target_domain);
    report.ensemble_target_acc = eoq_accuracy(survivors, target.x, target.labels);
    report.relative_size = report.total_quantized_bytes / report.fp32_baseline_bytes;
    report.ideal_relative_size =
        static_cast<double>(report.survivors) * static_cast<double>(ensemble_bits) / 32.0;
    return report;
}

std::string ensemble_report_json(const EnsembleReport& report) {
    json j;
    j["target_domain"] = report.target_domain;
    j["survivors"] = report.survivors;
    j["partial"] = report.partial;
    j["ensemble_target_acc"] = report.ensemble_target_acc;
    j["mean_member_target_acc"] = report.mean_member_target_acc;
    j["total_quantized_bytes"] = report.total_quantized_bytes;
    j["fp32_baseline_bytes"] = report.fp32_baseline_bytes;
    j["relative_size"] = report.relative_size;
    j["ideal_relative_size"] = report.ideal_relative_size;
    json members = json::array();
    for (const MemberReport& m : report.members) {
        json jm;
        jm["index"] = m.index;
        jm["split_seed"] = m.seeds.split_seed;
        jm["train_seed"] = m.seeds.train_seed;
        jm["failed"] = m.failed;
        if (m.failed) {
            jm["diverged_step"] = m.diverged_step;
            jm["failure"] = m.failure;
        } else {
            jm["best_step"] = m.best_step;
            jm["val_acc"] = m.val_acc;
            jm["target_acc"] = m.target_acc;
            jm["model_bytes"] = m.model_bytes;
            jm["bits"] = m.bits;
        }
        members.push_back(std::move(jm));
    }
    j["members"] = std::move(members);
    return j.dump(2);
}

void write_ensemble_report(const EnsembleReport& report, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot open '" + path + "' for writing");
    out << ensemble_report_json(report) << "\n";
    if (!out) throw io_error("failed writing '" + path + "'");
}

}  // namespace qdg
