#include "qdg/config.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace qdg {

namespace {

struct Value {
    enum class Kind { String, Number, Boolean, List };
    Kind kind = Kind::String;
    std::string str;
    double num = 0.0;
    bool boolean = false;
    std::vector<Value> list;
    int line = 0;
};

struct ParsedConfig {
    // section -> key -> value, with consumption tracking for strictness
    std::map<std::string, std::map<std::string, Value>> sections;
    std::string origin;
};

std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r')) ++b;
    while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
    return s.substr(b, e - b);
}

[[noreturn]] void fail(const ParsedConfig& pc, int line, const std::string& msg) {
    throw config_error(pc.origin + ":" + std::to_string(line) + ": " + msg);
}

Value parse_scalar(const ParsedConfig& pc, const std::string& text, int line) {
    Value v;
    v.line = line;
    if (text.size() >= 2 && text.front() == '"' && text.back() == '"') {
        v.kind = Value::Kind::String;
        v.str = text.substr(1, text.size() - 2);
        return v;
    }
    if (text == "true" || text == "false") {
        v.kind = Value::Kind::Boolean;
        v.boolean = text == "true";
        return v;
    }
    char* end = nullptr;
    const double num = std::strtod(text.c_str(), &end);
    if (!text.empty() && end == text.c_str() + text.size() && std::isfinite(num)) {
        v.kind = Value::Kind::Number;
        v.num = num;
        return v;
    }
    fail(pc, line, "cannot parse value '" + text + "' (quote strings)");
}

Value parse_value(const ParsedConfig& pc, const std::string& text, int line) {
    if (!text.empty() && text.front() == '[') {
        if (text.back() != ']') fail(pc, line, "unterminated list");
        Value v;
        v.kind = Value::Kind::List;
        v.line = line;
        const std::string inner = trim(text.substr(1, text.size() - 2));
        if (inner.empty()) return v;
        std::size_t start = 0;
        while (start <= inner.size()) {
            const std::size_t comma = inner.find(',', start);
            const std::string item =
                trim(comma == std::string::npos ? inner.substr(start)
                                                : inner.substr(start, comma - start));
            if (item.empty()) fail(pc, line, "empty list item");
            v.list.push_back(parse_scalar(pc, item, line));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        return v;
    }
    return parse_scalar(pc, text, line);
}

// Strips a # comment that is not inside a quoted string.
std::string strip_comment(const std::string& line) {
    bool in_string = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '"') in_string = !in_string;
        else if (line[i] == '#' && !in_string) return line.substr(0, i);
    }
    return line;
}

ParsedConfig parse_raw(const std::string& text, const std::string& origin) {
    ParsedConfig pc;
    pc.origin = origin;
    std::istringstream in(text);
    std::string raw;
    std::string section;
    int line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        const std::string line = trim(strip_comment(raw));
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') fail(pc, line_no, "unterminated section header");
            section = trim(line.substr(1, line.size() - 2));
            if (section.empty()) fail(pc, line_no, "empty section name");
            pc.sections[section];  // an empty section is legal
            continue;
        }
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) fail(pc, line_no, "expected key = value");
        const std::string key = trim(line.substr(0, eq));
        if (key.empty()) fail(pc, line_no, "empty key");
        if (section.empty()) fail(pc, line_no, "key '" + key + "' outside any [section]");
        if (pc.sections[section].count(key))
            fail(pc, line_no, "duplicate key '" + key + "' in [" + section + "]");
        pc.sections[section][key] = parse_value(pc, trim(line.substr(eq + 1)), line_no);
    }
    return pc;
}

// Typed access with strict consumption accounting.
class Schema {
  public:
    Schema(ParsedConfig pc) : pc_(std::move(pc)) {}

    bool has(const std::string& section, const std::string& key) {
        auto sit = pc_.sections.find(section);
        if (sit == pc_.sections.end()) return false;
        return sit->second.count(key) > 0;
    }

    const Value& get(const std::string& section, const std::string& key) {
        consumed_[section].insert(key);
        return pc_.sections.at(section).at(key);
    }

    std::string get_string(const std::string& s, const std::string& k) {
        const Value& v = get(s, k);
        if (v.kind != Value::Kind::String)
            fail(pc_, v.line, "[" + s + "] " + k + " must be a quoted string");
        return v.str;
    }

    bool get_bool(const std::string& s, const std::string& k) {
        const Value& v = get(s, k);
        if (v.kind != Value::Kind::Boolean)
            fail(pc_, v.line, "[" + s + "] " + k + " must be true or false");
        return v.boolean;
    }

    double get_double(const std::string& s, const std::string& k) {
        const Value& v = get(s, k);
        if (v.kind != Value::Kind::Number)
            fail(pc_, v.line, "[" + s + "] " + k + " must be a number");
        return v.num;
    }

    long get_long(const std::string& s, const std::string& k) {
        const Value& v = get(s, k);
        if (v.kind != Value::Kind::Number || v.num != std::floor(v.num) ||
            std::abs(v.num) > 9e15)
            fail(pc_, v.line, "[" + s + "] " + k + " must be an integer");
        return static_cast<long>(v.num);
    }

    std::size_t get_size(const std::string& s, const std::string& k) {
        const long n = get_long(s, k);
        if (n < 0) {
            const Value& v = pc_.sections.at(s).at(k);
            fail(pc_, v.line, "[" + s + "] " + k + " must be nonnegative");
        }
        return static_cast<std::size_t>(n);
    }

    std::uint64_t get_seed(const std::string& s, const std::string& k) {
        return static_cast<std::uint64_t>(get_long(s, k));
    }

    std::vector<double> get_double_list(const std::string& s, const std::string& k) {
        const Value& v = get(s, k);
        if (v.kind != Value::Kind::List)
            fail(pc_, v.line, "[" + s + "] " + k + " must be a list");
        std::vector<double> out;
        for (const Value& item : v.list) {
            if (item.kind != Value::Kind::Number)
                fail(pc_, v.line, "[" + s + "] " + k + " must hold numbers");
            out.push_back(item.num);
        }
        return out;
    }

    std::vector<std::string> get_string_list(const std::string& s, const std::string& k) {
        const Value& v = get(s, k);
        if (v.kind != Value::Kind::List)
            fail(pc_, v.line, "[" + s + "] " + k + " must be a list");
        std::vector<std::string> out;
        for (const Value& item : v.list) {
            if (item.kind != Value::Kind::String)
                fail(pc_, v.line, "[" + s + "] " + k + " must hold quoted strings");
            out.push_back(item.str);
        }
        return out;
    }

    // Every present section/key must be known and consumed.
    void finish(const std::set<std::string>& known_sections) {
        for (const auto& [section, keys] : pc_.sections) {
            if (!known_sections.count(section))
                throw config_error(pc_.origin + ": unknown section [" + section + "]");
            for (const auto& [key, value] : keys)
                if (!consumed_[section].count(key))
                    fail(pc_, value.line, "unknown key '" + key + "' in [" + section + "]");
        }
    }

  private:
    ParsedConfig pc_;
    std::map<std::string, std::set<std::string>> consumed_;
};

}  // namespace

void ExperimentConfig::validate() const {
    if (dataset.generator != "spurious-blobs" && dataset.generator != "rotated-moons" &&
        dataset.generator != "csv")
        throw config_error("unknown dataset generator '" + dataset.generator + "'");
    if (dataset.generator == "csv" && dataset.path.empty())
        throw config_error("[dataset] path is required for the csv generator");
    if (!(protocol.val_fraction > 0.0 && protocol.val_fraction < 1.0))
        throw config_error("[protocol] val_fraction must lie in (0, 1)");
    try {
        train.validate();
    } catch (const error& e) {
        throw config_error(std::string("[train] ") + e.what());
    }
    if (analysis.samples < 2) throw config_error("[analysis] samples must be >= 2");
    if (analysis.trace_probes < 1) throw config_error("[analysis] trace_probes must be >= 1");
    if (analysis.power_iterations < 20)
        throw config_error("[analysis] power_iterations must be >= 20");
    for (std::size_t i = 0; i < analysis.gamma_grid.size(); ++i) {
        if (analysis.gamma_grid[i] < 0.0)
            throw config_error("[analysis] gamma_grid entries must be nonnegative");
        if (i > 0 && analysis.gamma_grid[i] <= analysis.gamma_grid[i - 1])
            throw config_error("[analysis] gamma_grid must be strictly increasing");
    }
    if (ensemble.members < 1) throw config_error("[ensemble] members must be >= 1");
    if (sweep.bits.empty()) throw config_error("[sweep] bits must be nonempty");
    for (int b : sweep.bits)
        if (b < 2 || b > 16) throw config_error("[sweep] bits must lie in [2, 16]");
    if (sweep.seeds < 1) throw config_error("[sweep] seeds must be >= 1");
    if (out_dir.empty()) throw config_error("[output] dir must be nonempty");
}

ExperimentConfig parse_config_text(const std::string& text, const std::string& origin) {
    Schema schema(parse_raw(text, origin));
    ExperimentConfig c;
    c.source_text = text;

    if (schema.has("dataset", "generator"))
        c.dataset.generator = schema.get_string("dataset", "generator");
    if (schema.has("dataset", "seed")) c.dataset.seed = schema.get_seed("dataset", "seed");
    if (schema.has("dataset", "n_per_domain"))
        c.dataset.n_per_domain = schema.get_size("dataset", "n_per_domain");
    if (schema.has("dataset", "corr")) c.dataset.corr = schema.get_double_list("dataset", "corr");
    if (schema.has("dataset", "signal_sep"))
        c.dataset.signal_sep = schema.get_double("dataset", "signal_sep");
    if (schema.has("dataset", "causal_dims"))
        c.dataset.causal_dims = schema.get_size("dataset", "causal_dims");
    if (schema.has("dataset", "angles"))
        c.dataset.angles = schema.get_double_list("dataset", "angles");
    if (schema.has("dataset", "noise_sd"))
        c.dataset.noise_sd = schema.get_double("dataset", "noise_sd");
    if (schema.has("dataset", "path")) c.dataset.path = schema.get_string("dataset", "path");
    if (schema.has("dataset", "domain_column"))
        c.dataset.domain_column = schema.get_string("dataset", "domain_column");
    if (schema.has("dataset", "label_column"))
        c.dataset.label_column = schema.get_string("dataset", "label_column");

    if (schema.has("protocol", "targets"))
        c.protocol.targets = schema.get_string_list("protocol", "targets");
    if (schema.has("protocol", "val_fraction"))
        c.protocol.val_fraction = schema.get_double("protocol", "val_fraction");

    if (schema.has("train", "total_steps"))
        c.train.total_steps = schema.get_long("train", "total_steps");
    if (schema.has("train", "quantize_at_step"))
        c.train.quantize_at_step = schema.get_long("train", "quantize_at_step");
    if (schema.has("train", "validate_every"))
        c.train.validate_every = schema.get_long("train", "validate_every");
    if (schema.has("train", "batch_per_domain"))
        c.train.batch_per_domain = schema.get_size("train", "batch_per_domain");
    if (schema.has("train", "hidden_dims")) {
        c.train.hidden_dims.clear();
        for (double d : schema.get_double_list("train", "hidden_dims")) {
            if (d < 1.0 || d != std::floor(d))
                throw config_error("[train] hidden_dims must hold positive integers");
            c.train.hidden_dims.push_back(static_cast<std::size_t>(d));
        }
    }
    if (schema.has("train", "activation")) {
        const std::string a = schema.get_string("train", "activation");
        if (a == "relu") c.train.activation = Activation::Relu;
        else if (a == "softplus") c.train.activation = Activation::Softplus;
        else throw config_error("[train] unknown activation '" + a + "'");
    }
    if (schema.has("train", "seed")) c.train.seed = schema.get_seed("train", "seed");

    if (schema.has("optimizer", "kind")) {
        const std::string k = schema.get_string("optimizer", "kind");
        if (k == "sgd") c.train.optimizer.kind = OptimizerKind::Sgd;
        else if (k == "adam") c.train.optimizer.kind = OptimizerKind::Adam;
        else throw config_error("[optimizer] unknown kind '" + k + "'");
    }
    if (schema.has("optimizer", "learning_rate"))
        c.train.optimizer.learning_rate = schema.get_double("optimizer", "learning_rate");
    if (schema.has("optimizer", "momentum"))
        c.train.optimizer.momentum = schema.get_double("optimizer", "momentum");
    if (schema.has("optimizer", "beta1"))
        c.train.optimizer.beta1 = schema.get_double("optimizer", "beta1");
    if (schema.has("optimizer", "beta2"))
        c.train.optimizer.beta2 = schema.get_double("optimizer", "beta2");
    if (schema.has("optimizer", "epsilon"))
        c.train.optimizer.epsilon = schema.get_double("optimizer", "epsilon");
    if (schema.has("optimizer", "weight_decay"))
        c.train.optimizer.weight_decay = schema.get_double("optimizer", "weight_decay");

    if (schema.has("quant", "bits"))
        c.train.quant.bits = static_cast<int>(schema.get_long("quant", "bits"));
    if (schema.has("quant", "signed")) c.train.quant.is_signed = schema.get_bool("quant", "signed");
    if (schema.has("quant", "quantize_last_layer"))
        c.train.quant.quantize_last_layer = schema.get_bool("quant", "quantize_last_layer");
    if (schema.has("quant", "mode"))
        c.train.quant_mode = quant_mode_from_name(schema.get_string("quant", "mode"));
    if (schema.has("quant", "stage_fractions"))
        c.train.stage_fractions = schema.get_double_list("quant", "stage_fractions");

    if (schema.has("analysis", "gamma_grid"))
        c.analysis.gamma_grid = schema.get_double_list("analysis", "gamma_grid");
    if (schema.has("analysis", "samples"))
        c.analysis.samples = schema.get_size("analysis", "samples");
    if (schema.has("analysis", "trace_probes"))
        c.analysis.trace_probes = schema.get_size("analysis", "trace_probes");
    if (schema.has("analysis", "power_iterations"))
        c.analysis.power_iterations = schema.get_size("analysis", "power_iterations");
    if (schema.has("analysis", "taylor_scales"))
        c.analysis.taylor_scales = schema.get_double_list("analysis", "taylor_scales");

    if (schema.has("ensemble", "members"))
        c.ensemble.members = schema.get_size("ensemble", "members");

    if (schema.has("sweep", "bits")) {
        c.sweep.bits.clear();
        for (double b : schema.get_double_list("sweep", "bits")) {
            if (b != std::floor(b)) throw config_error("[sweep] bits must hold integers");
            c.sweep.bits.push_back(static_cast<int>(b));
        }
    }
    if (schema.has("sweep", "seeds")) c.sweep.seeds = schema.get_size("sweep", "seeds");

    if (schema.has("output", "dir")) c.out_dir = schema.get_string("output", "dir");
    if (schema.has("experiment", "seed")) c.seed = schema.get_seed("experiment", "seed");

    schema.finish({"dataset", "protocol", "train", "optimizer", "quant", "analysis", "ensemble",
                   "sweep", "output", "experiment"});
    c.validate();
    return c;
}

ExperimentConfig parse_config_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str(), path);
}

DomainDataset build_dataset(const ExperimentConfig& config) {
    const DatasetConfig& d = config.dataset;
    try {
        if (d.generator == "spurious-blobs")
            return gen_spurious_blobs(d.n_per_domain, d.corr, d.signal_sep, d.seed,
                                      d.causal_dims);
        if (d.generator == "rotated-moons")
            return gen_rotated_moons(d.n_per_domain, d.angles, d.noise_sd, d.seed);
        if (d.generator == "csv") return ingest_csv(d.path, d.domain_column, d.label_column);
    } catch (const config_error&) {
        throw;
    } catch (const error& e) {
        throw config_error("[dataset] " + std::string(e.what()));
    }
    throw config_error("unknown dataset generator '" + d.generator + "'");
}

std::vector<std::string> resolve_targets(const ExperimentConfig& config,
                                         const DomainDataset& ds) {
    if (config.protocol.targets.empty()) {
        std::vector<std::string> all;
        for (const Domain& dom : ds.domains) all.push_back(dom.name);
        return all;
    }
    for (const std::string& name : config.protocol.targets) {
        try {
            ds.domain_index(name);
        } catch (const error&) {
            throw config_error("[protocol] target '" + name + "' is not a dataset domain");
        }
    }
    return config.protocol.targets;
}

}  // namespace qdg
