#include "qdg/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "qdg/format.hpp"
#include "qdg/rng.hpp"

namespace qdg {

namespace {

constexpr double kPi = 3.14159265358979323846;

std::string fmt_g(double v, bool forced_sign = false) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), forced_sign ? "%+g" : "%g", v);
    return buf;
}

std::string unique_name(std::map<std::string, int>& seen, const std::string& base) {
    int& count = seen[base];
    ++count;
    return count == 1 ? base : base + "_" + std::to_string(count);
}

std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r')) ++b;
    while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
    return s.substr(b, e - b);
}

std::vector<std::string> split_fields(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t comma = line.find(',', start);
        if (comma == std::string::npos) {
            out.push_back(trim(line.substr(start)));
            break;
        }
        out.push_back(trim(line.substr(start, comma - start)));
        start = comma + 1;
    }
    return out;
}

bool parse_double(const std::string& s, double& out) {
    if (s.empty()) return false;
    char* end = nullptr;
    out = std::strtod(s.c_str(), &end);
    return end == s.c_str() + s.size() && std::isfinite(out);
}

// Fisher-Yates with explicit draws, so plans do not depend on library
// distribution internals.
void shuffle_indices(std::vector<std::size_t>& v, std::mt19937_64& rng) {
    for (std::size_t i = v.size(); i > 1; --i)
        std::swap(v[i - 1], v[rng() % i]);
}

}  // namespace

std::size_t DomainDataset::domain_index(const std::string& name) const {
    for (std::size_t i = 0; i < domains.size(); ++i)
        if (domains[i].name == name) return i;
    throw contract_error("unknown domain '" + name + "'");
}

const Domain& DomainDataset::domain(const std::string& name) const {
    return domains[domain_index(name)];
}

void DomainDataset::validate() const {
    if (domains.empty()) throw contract_error("dataset has no domains");
    if (input_dim == 0) throw contract_error("dataset input_dim must be >= 1");
    if (num_classes == 0) throw contract_error("dataset num_classes must be >= 1");
    std::set<std::string> names;
    std::set<int> label_set;
    for (std::size_t d = 0; d < domains.size(); ++d) {
        const Domain& dom = domains[d];
        if (!names.insert(dom.name).second)
            throw contract_error("duplicate domain name '" + dom.name + "'");
        if (dom.labels.empty()) throw contract_error("domain '" + dom.name + "' is empty");
        if (dom.x.shape() != Shape{dom.labels.size(), input_dim})
            throw contract_error("domain '" + dom.name + "' has inconsistent feature shape");
        std::set<int> ls;
        for (int y : dom.labels) {
            if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
                throw contract_error("domain '" + dom.name + "' has label outside [0, " +
                                     std::to_string(num_classes) + ")");
            ls.insert(y);
        }
        if (d == 0) label_set = std::move(ls);
        else if (ls != label_set)
            throw contract_error("domain '" + dom.name + "' does not share the label set");
    }
}

DomainDataset gen_rotated_moons(std::size_t n_per_domain, const std::vector<double>& angles_deg,
                                double noise_sd, std::uint64_t seed) {
    if (angles_deg.size() < 3)
        throw contract_error("rotated moons needs >= 3 domains (2 sources + 1 target)");
    if (n_per_domain < 2 || n_per_domain % 2 != 0)
        throw contract_error("n_per_domain must be even and >= 2");
    if (noise_sd < 0.0) throw contract_error("noise_sd must be nonnegative");

    // One noisy base cloud shared by all domains; each domain is a rotation
    // of the same points, so equal angles give identical domains.
    const std::size_t half = n_per_domain / 2;
    std::vector<double> base(n_per_domain * 2);
    for (std::size_t k = 0; k < half; ++k) {
        const double t = half > 1 ? kPi * static_cast<double>(k) / static_cast<double>(half - 1)
                                  : 0.0;
        base[k * 2 + 0] = std::cos(t) - 0.5;
        base[k * 2 + 1] = std::sin(t) - 0.25;
        base[(half + k) * 2 + 0] = 1.0 - std::cos(t) - 0.5;
        base[(half + k) * 2 + 1] = 0.5 - std::sin(t) - 0.25;
    }
    auto rng = make_rng(derive_seed(seed, "moons"));
    std::normal_distribution<double> noise(0.0, 1.0);
    if (noise_sd > 0.0)
        for (double& v : base) v += noise_sd * noise(rng);

    std::vector<int> labels(n_per_domain);
    std::fill(labels.begin() + static_cast<std::ptrdiff_t>(half), labels.end(), 1);

    DomainDataset ds;
    ds.input_dim = 2;
    ds.num_classes = 2;
    std::map<std::string, int> seen;
    for (double deg : angles_deg) {
        const double rad = deg * kPi / 180.0;
        const double c = std::cos(rad), s = std::sin(rad);
        std::vector<double> x(n_per_domain * 2);
        for (std::size_t i = 0; i < n_per_domain; ++i) {
            const double px = base[i * 2 + 0], py = base[i * 2 + 1];
            x[i * 2 + 0] = c * px - s * py;
            x[i * 2 + 1] = s * px + c * py;
        }
        Domain dom;
        dom.name = unique_name(seen, "rot" + fmt_g(deg));
        dom.x = Tensor::from({n_per_domain, 2}, std::move(x));
        dom.labels = labels;
        ds.domains.push_back(std::move(dom));
    }

    std::string angle_list;
    for (std::size_t i = 0; i < angles_deg.size(); ++i)
        angle_list += (i ? "," : "") + fmt_g(angles_deg[i]);
    ds.meta = {"rotated-moons", seed,
               "angles=" + angle_list + ";noise_sd=" + fmt_g(noise_sd)};
    ds.validate();
    return ds;
}

DomainDataset gen_spurious_blobs(std::size_t n_per_domain,
                                 const std::vector<double>& corr_per_domain, double signal_sep,
                                 std::uint64_t seed, std::size_t causal_dims) {
    if (corr_per_domain.size() < 2)
        throw contract_error("spurious blobs needs >= 2 domains (sources + 1 target)");
    for (double c : corr_per_domain)
        if (!(c >= -1.0 && c <= 1.0))
            throw contract_error("invalid correlation " + fmt_g(c) + "; must lie in [-1, 1]");
    const double target_corr = corr_per_domain.back();
    for (std::size_t i = 0; i + 1 < corr_per_domain.size(); ++i)
        if (corr_per_domain[i] == target_corr)
            throw contract_error(
                "target correlation must differ from every source correlation");
    if (n_per_domain < 2 || n_per_domain % 2 != 0)
        throw contract_error("n_per_domain must be even and >= 2");
    if (!(signal_sep > 0.0)) throw contract_error("signal_sep must be positive");
    if (causal_dims < 1) throw contract_error("causal_dims must be >= 1");

    const std::size_t dim = causal_dims + 1;
    const std::size_t half = n_per_domain / 2;

    DomainDataset ds;
    ds.input_dim = dim;
    ds.num_classes = 2;
    std::map<std::string, int> seen;
    for (std::size_t d = 0; d < corr_per_domain.size(); ++d) {
        const double corr = corr_per_domain[d];
        const double p_match = (1.0 + corr) / 2.0;
        auto rng = make_rng(derive_seed(seed, "blobs", d));
        std::normal_distribution<double> gauss(0.0, 1.0);
        std::uniform_real_distribution<double> unit(0.0, 1.0);

        std::vector<double> x(n_per_domain * dim);
        std::vector<int> labels(n_per_domain);
        for (std::size_t i = 0; i < n_per_domain; ++i) {
            const int y = i < half ? 0 : 1;
            labels[i] = y;
            const double mean = (y == 1 ? 0.5 : -0.5) * signal_sep;
            for (std::size_t j = 0; j < causal_dims; ++j)
                x[i * dim + j] = mean + gauss(rng);
            const int s = unit(rng) < p_match ? y : 1 - y;
            x[i * dim + causal_dims] = static_cast<double>(s);
        }
        Domain dom;
        dom.name = unique_name(seen, "corr" + fmt_g(corr, true));
        dom.x = Tensor::from({n_per_domain, dim}, std::move(x));
        dom.labels = std::move(labels);
        ds.domains.push_back(std::move(dom));
    }

    std::string corr_list;
    for (std::size_t i = 0; i < corr_per_domain.size(); ++i)
        corr_list += (i ? "," : "") + fmt_g(corr_per_domain[i], true);
    ds.meta = {"spurious-blobs", seed,
               "corr=" + corr_list + ";signal_sep=" + fmt_g(signal_sep) +
                   ";causal_dims=" + std::to_string(causal_dims)};
    ds.validate();
    return ds;
}

DomainDataset ingest_csv(const std::string& path, const std::string& domain_column,
                         const std::string& label_column) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open '" + path + "'");

    std::string line;
    if (!std::getline(in, line)) throw io_error("'" + path + "': empty file");
    const auto header = split_fields(line);
    std::size_t domain_col = header.size(), label_col = header.size();
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (header[i] == domain_column) domain_col = i;
        if (header[i] == label_column) label_col = i;
    }
    if (domain_col == header.size())
        throw io_error("'" + path + "': missing column '" + domain_column + "'");
    if (label_col == header.size())
        throw io_error("'" + path + "': missing column '" + label_column + "'");
    if (domain_col == label_col)
        throw io_error("'" + path + "': domain and label columns coincide");

    std::vector<std::size_t> feature_cols;
    for (std::size_t i = 0; i < header.size(); ++i)
        if (i != domain_col && i != label_col) feature_cols.push_back(i);
    if (feature_cols.empty()) throw io_error("'" + path + "': no feature columns");

    struct RawDomain {
        std::vector<double> features;
        std::vector<std::string> labels;
    };
    std::vector<std::string> domain_order;
    std::map<std::string, RawDomain> raw;
    std::set<std::string> label_values;

    std::size_t row = 1;  // header
    while (std::getline(in, line)) {
        ++row;
        if (trim(line).empty()) continue;
        const auto fields = split_fields(line);
        if (fields.size() != header.size())
            throw io_error("'" + path + "' row " + std::to_string(row) + ": expected " +
                           std::to_string(header.size()) + " fields, got " +
                           std::to_string(fields.size()));
        const std::string& dom = fields[domain_col];
        if (dom.empty())
            throw io_error("'" + path + "' row " + std::to_string(row) + ": empty domain");
        const std::string& lab = fields[label_col];
        if (lab.empty())
            throw io_error("'" + path + "' row " + std::to_string(row) + ": empty label");

        auto it = raw.find(dom);
        if (it == raw.end()) {
            domain_order.push_back(dom);
            it = raw.emplace(dom, RawDomain{}).first;
        }
        for (std::size_t c : feature_cols) {
            double v;
            if (!parse_double(fields[c], v))
                throw io_error("'" + path + "' row " + std::to_string(row) +
                               ": non-numeric feature '" + fields[c] + "' in column '" +
                               header[c] + "'");
            it->second.features.push_back(v);
        }
        it->second.labels.push_back(lab);
        label_values.insert(lab);
    }
    if (domain_order.empty()) throw io_error("'" + path + "': no data rows");

    // Label order: numeric when every value parses as a number, else
    // lexicographic. Ties on numeric value fall back to the string.
    std::vector<std::string> labels_sorted(label_values.begin(), label_values.end());
    bool all_numeric = true;
    std::vector<double> numeric(labels_sorted.size());
    for (std::size_t i = 0; i < labels_sorted.size(); ++i)
        if (!parse_double(labels_sorted[i], numeric[i])) {
            all_numeric = false;
            break;
        }
    if (all_numeric) {
        std::vector<std::size_t> order(labels_sorted.size());
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            if (numeric[a] != numeric[b]) return numeric[a] < numeric[b];
            return labels_sorted[a] < labels_sorted[b];
        });
        std::vector<std::string> tmp(labels_sorted.size());
        for (std::size_t i = 0; i < order.size(); ++i) tmp[i] = labels_sorted[order[i]];
        labels_sorted = std::move(tmp);
    }
    std::map<std::string, int> label_index;
    for (std::size_t i = 0; i < labels_sorted.size(); ++i)
        label_index[labels_sorted[i]] = static_cast<int>(i);

    DomainDataset ds;
    ds.input_dim = feature_cols.size();
    ds.num_classes = labels_sorted.size();
    ds.meta = {"csv", 0, "path=" + path};
    for (const std::string& name : domain_order) {
        RawDomain& rd = raw[name];
        Domain dom;
        dom.name = name;
        dom.labels.reserve(rd.labels.size());
        for (const std::string& lab : rd.labels) dom.labels.push_back(label_index[lab]);
        dom.x = Tensor::from({rd.labels.size(), ds.input_dim}, std::move(rd.features));
        ds.domains.push_back(std::move(dom));
    }
    ds.validate();
    return ds;
}

void export_csv(const DomainDataset& ds, const std::string& path) {
    ds.validate();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot open '" + path + "' for writing");
    out << "domain,label";
    for (std::size_t j = 0; j < ds.input_dim; ++j) out << ",f" << j;
    out << "\n";
    for (const Domain& dom : ds.domains) {
        const auto& x = dom.x.values();
        for (std::size_t i = 0; i < dom.labels.size(); ++i) {
            out << dom.name << "," << dom.labels[i];
            for (std::size_t j = 0; j < ds.input_dim; ++j)
                out << "," << format_double(x[i * ds.input_dim + j]);
            out << "\n";
        }
    }
    if (!out) throw io_error("failed writing '" + path + "'");
}

SplitPlan split_leave_one_out(const DomainDataset& ds, const std::string& target_domain,
                              double val_fraction, std::uint64_t seed) {
    ds.validate();
    if (!(val_fraction > 0.0 && val_fraction < 1.0))
        throw contract_error("val_fraction must lie in (0, 1)");
    const std::size_t target = ds.domain_index(target_domain);
    if (ds.domains.size() < 2)
        throw contract_error("leave-one-domain-out needs at least one source domain");

    SplitPlan plan;
    plan.target_domain = target_domain;
    plan.seed = seed;
    for (std::size_t d = 0; d < ds.domains.size(); ++d) {
        if (d == target) continue;
        const Domain& dom = ds.domains[d];
        if (dom.labels.size() < 5)
            throw contract_error("source domain '" + dom.name + "' has fewer than 5 samples");

        std::map<int, std::vector<std::size_t>> by_class;
        for (std::size_t i = 0; i < dom.labels.size(); ++i)
            by_class[dom.labels[i]].push_back(i);

        auto rng = make_rng(derive_seed(seed, "split", d));
        std::vector<std::size_t> train, val;
        for (auto& [label, idx] : by_class) {
            shuffle_indices(idx, rng);
            const auto n_val = static_cast<std::size_t>(
                std::llround(val_fraction * static_cast<double>(idx.size())));
            val.insert(val.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
            train.insert(train.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_val),
                         idx.end());
        }
        if (train.empty())
            throw contract_error("source domain '" + dom.name + "' has no training samples");
        std::sort(train.begin(), train.end());
        std::sort(val.begin(), val.end());
        plan.source_names.push_back(dom.name);
        plan.train_idx.push_back(std::move(train));
        plan.val_idx.push_back(std::move(val));
    }
    return plan;
}

namespace {

EvalSet gather(const Domain& dom, const std::vector<std::size_t>& idx, std::size_t input_dim) {
    const auto& x = dom.x.values();
    std::vector<double> out;
    out.reserve(idx.size() * input_dim);
    std::vector<int> labels;
    labels.reserve(idx.size());
    for (std::size_t i : idx) {
        if (i >= dom.labels.size())
            throw contract_error("split index out of range for domain '" + dom.name + "'");
        out.insert(out.end(), x.begin() + static_cast<std::ptrdiff_t>(i * input_dim),
                   x.begin() + static_cast<std::ptrdiff_t>((i + 1) * input_dim));
        labels.push_back(dom.labels[i]);
    }
    return {Tensor::from({idx.size(), input_dim}, std::move(out)), std::move(labels)};
}

void append(EvalSet& pool, std::vector<double>& buf, const EvalSet& part) {
    const auto& v = part.x.values();
    buf.insert(buf.end(), v.begin(), v.end());
    pool.labels.insert(pool.labels.end(), part.labels.begin(), part.labels.end());
}

}  // namespace

TargetEvaluator::TargetEvaluator(std::string name, Tensor x, std::vector<int> labels)
    : name_(std::move(name)), x_(std::move(x)), labels_(std::move(labels)) {}

double TargetEvaluator::accuracy(ModelState& model) const {
    return qdg::accuracy(model, x_, labels_);
}

double TargetEvaluator::mean_loss(ModelState& model) const {
    return loss_ce(forward(model, x_), labels_, Reduction::Mean).item();
}

Materialized Materialized::from(const DomainDataset& ds, const SplitPlan& plan) {
    ds.validate();
    const std::size_t target = ds.domain_index(plan.target_domain);
    if (plan.source_names.size() != ds.domains.size() - 1 ||
        plan.source_names.size() != plan.train_idx.size() ||
        plan.source_names.size() != plan.val_idx.size())
        throw contract_error("split plan does not match the dataset's source domains");

    TrainView train;
    train.input_dim = ds.input_dim;
    train.num_classes = ds.num_classes;
    EvalSet train_pool, val;
    std::vector<double> pool_buf, val_buf;
    for (std::size_t s = 0; s < plan.source_names.size(); ++s) {
        const Domain& dom = ds.domain(plan.source_names[s]);
        if (&dom == &ds.domains[target])
            throw contract_error("split plan lists the target as a source");
        EvalSet tr = gather(dom, plan.train_idx[s], ds.input_dim);
        EvalSet va = gather(dom, plan.val_idx[s], ds.input_dim);
        append(train_pool, pool_buf, tr);
        append(val, val_buf, va);
        train.domain_names.push_back(dom.name);
        train.x.push_back(tr.x);
        train.labels.push_back(std::move(tr.labels));
    }
    if (val.labels.empty()) throw contract_error("split plan has an empty validation set");
    train_pool.x = Tensor::from({train_pool.labels.size(), ds.input_dim}, std::move(pool_buf));
    val.x = Tensor::from({val.labels.size(), ds.input_dim}, std::move(val_buf));

    const Domain& tdom = ds.domains[target];
    TargetEvaluator te(tdom.name, tdom.x.detach_copy(), tdom.labels);
    return Materialized(std::move(train), std::move(train_pool), std::move(val), std::move(te));
}

Batch sample_batch(const TrainView& view, std::size_t per_domain, std::mt19937_64& rng) {
    if (view.x.empty()) throw contract_error("sample_batch: no source domains");
    if (per_domain == 0) throw contract_error("sample_batch: per_domain must be >= 1");
    const std::size_t dim = view.input_dim;
    std::vector<double> xb;
    xb.reserve(view.x.size() * per_domain * dim);
    std::vector<int> yb;
    yb.reserve(view.x.size() * per_domain);
    for (std::size_t d = 0; d < view.x.size(); ++d) {
        const auto& xv = view.x[d].values();
        const std::size_t n = view.labels[d].size();
        for (std::size_t k = 0; k < per_domain; ++k) {
            const std::size_t i = rng() % n;
            xb.insert(xb.end(), xv.begin() + static_cast<std::ptrdiff_t>(i * dim),
                      xv.begin() + static_cast<std::ptrdiff_t>((i + 1) * dim));
            yb.push_back(view.labels[d][i]);
        }
    }
    return {Tensor::from({yb.size(), dim}, std::move(xb)), std::move(yb)};
}

}  // namespace qdg
