#pragma once

// Seeded, reproducible experiment runner: single runs, sweeps over
// epsilon x steps x seeds, CSV/JSON persistence with resume support.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <tuple>
#include <utility>
#include <vector>

#include "json.hpp"

#include "flowcast/analysis.hpp"
#include "flowcast/core.hpp"
#include "flowcast/field_io.hpp"
#include "flowcast/fields.hpp"
#include "flowcast/integrator.hpp"
#include "flowcast/rng.hpp"

namespace flowcast::bench {

using nlohmann::json;
using nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Built-in field registry: pins the exact parameters used by tests and the
// CLI in one place.
// ---------------------------------------------------------------------------

inline ordered_json alias_spec(const std::string& name) {
    if (name == "constant2d") {
        return ordered_json{{"kind", "analytic"}, {"variant", "constant"}, {"c", {1.0, -1.0}}};
    }
    if (name == "linear-contract") {
        return ordered_json{{"kind", "analytic"},
                            {"variant", "linear"},
                            {"A", {{-1.0, 0.0}, {0.0, -1.0}}},
                            {"b", {0.0, 0.0}}};
    }
    if (name == "rotation") {
        return ordered_json{{"kind", "analytic"}, {"variant", "rotation"}, {"omega", 1.0}};
    }
    if (name == "gauss-bridge") {
        return ordered_json{{"kind", "analytic"},
                            {"variant", "gaussian_bridge"},
                            {"mu", {3.0, 0.0}},
                            {"sigma0", 1.0},
                            {"sigma1", 1.0}};
    }
    if (name == "gauss-bridge-complex") {
        return ordered_json{{"kind", "analytic"},
                            {"variant", "gaussian_bridge"},
                            {"mu", {3.0, 0.0}},
                            {"sigma0", 1.0},
                            {"sigma1", 0.1}};
    }
    throw std::runtime_error("unknown field alias \"" + name +
                             "\" (known: constant2d, linear-contract, rotation, "
                             "gauss-bridge, gauss-bridge-complex)");
}

inline std::vector<std::string> field_aliases() {
    return {"constant2d", "linear-contract", "rotation", "gauss-bridge",
            "gauss-bridge-complex"};
}

// ---------------------------------------------------------------------------
// Field sources
// ---------------------------------------------------------------------------

struct ResolvedField {
    std::shared_ptr<VelocityField> field;
    std::string id;    // stable, comma-free row identifier
    ordered_json spec; // self-contained source for the effective config echo
};

namespace detail {

inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string compact_number(double v) {
    std::ostringstream os;
    os << v;
    return os.str();
}

inline std::string vector_descriptor(const StateVector& v) {
    std::string out = "[";
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ";";
        out += compact_number(v[i]);
    }
    return out + "]";
}

inline std::string inline_field_id(const json& spec,
                                   const std::shared_ptr<VelocityField>& field) {
    const std::string kind = spec.value("kind", "");
    if (kind == "analytic") {
        const std::string variant = spec.value("variant", "");
        if (auto c = std::dynamic_pointer_cast<ConstantField>(field)) {
            return "constant" + vector_descriptor(c->velocity());
        }
        if (auto r = std::dynamic_pointer_cast<RotationField>(field)) {
            return "rotation(omega=" + compact_number(r->omega()) + ")";
        }
        if (auto g = std::dynamic_pointer_cast<GaussianBridgeField>(field)) {
            return "gaussian_bridge(mu=" + vector_descriptor(g->mu()) +
                   ";s0=" + compact_number(g->sigma0()) + ";s1=" + compact_number(g->sigma1()) +
                   ")";
        }
        if (variant == "linear") {
            char buf[24];
            std::snprintf(buf, sizeof(buf), "%08llx",
                          static_cast<unsigned long long>(fnv1a(spec.dump()) & 0xFFFFFFFFu));
            return "linear-" + std::string(buf);
        }
    }
    char buf[24];
    std::snprintf(buf, sizeof(buf), "%08llx",
                  static_cast<unsigned long long>(fnv1a(spec.dump()) & 0xFFFFFFFFu));
    return (kind.empty() ? std::string("field") : kind) + "-" + std::string(buf);
}

inline std::string sanitize_id(std::string s) {
    for (char& c : s) {
        if (c == ',' || c == '\n' || c == '\r') c = '_';
    }
    return s;
}

}  // namespace detail

/// Accepts {"alias": name}, {"path": file} or an inline field object.
/// Path sources are loaded eagerly and embedded, so the resolved spec is
/// self-contained.
inline ResolvedField resolve_field(const json& source) {
    if (!source.is_object()) {
        throw std::runtime_error("config: \"field\" must be an object");
    }
    if (source.contains("alias")) {
        if (source.size() != 1) {
            throw std::runtime_error("config: field alias source takes no other keys");
        }
        const std::string name = source.at("alias").get<std::string>();
        const ordered_json spec = alias_spec(name);
        return {field_from_json(spec), name, ordered_json{{"alias", name}}};
    }
    if (source.contains("path")) {
        if (source.size() != 1) {
            throw std::runtime_error("config: field path source takes no other keys");
        }
        const std::string path = source.at("path").get<std::string>();
        std::ifstream in(path);
        if (!in) throw std::runtime_error("field file: cannot open \"" + path + "\"");
        ordered_json spec;
        try {
            in >> spec;
        } catch (const json::exception& e) {
            throw std::runtime_error("field file: \"" + path + "\" is not valid JSON: " +
                                     e.what());
        }
        auto field = field_from_json(spec);
        std::string base = path;
        const auto slash = base.find_last_of("/\\");
        if (slash != std::string::npos) base = base.substr(slash + 1);
        return {std::move(field), detail::sanitize_id(base), std::move(spec)};
    }
    auto field = field_from_json(source);
    ordered_json spec = source;
    return {field, detail::sanitize_id(detail::inline_field_id(source, field)), std::move(spec)};
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Initial state: either an explicit vector or x0 ~ N(mean, stddev^2 I)
/// drawn from the pinned SplitMix64 + Box-Muller generator. Repetition r of
/// a run uses seed + r.
struct InitialStateSpec {
    std::optional<StateVector> values;
    long seed = 0;
    int dimension = 0;
    StateVector mean;  // broadcast from a scalar when parsed
    double stddev = 1.0;
};

struct EstimationSpec {
    double box_extent = 3.0;  // box [-extent, extent]^d
    std::optional<BoundingBox> box;
    int samples = 10000;
    std::uint64_t seed = 0;
};

/// Explicit constants win over field-declared ones; a sampling estimate is
/// the fallback and demotes the bound to advisory.
struct RegularityConfig {
    std::optional<double> lipschitz;
    std::optional<double> curvature;
    std::optional<EstimationSpec> estimate;
};

struct RunConfig {
    json field = json{{"alias", "gauss-bridge"}};
    std::optional<int> steps;
    std::optional<std::vector<double>> grid_nodes;
    InitialStateSpec initial_state;
    std::vector<double> epsilons;
    std::optional<double> tolerance;  // derives an extra epsilon when present
    int repetitions = 1;
    int fine_steps_multiplier = 100;
    int curvature_resolution = 10000;
    RegularityConfig regularity;
    std::string output_dir = ".";
};

struct SweepConfig {
    std::vector<json> fields;
    std::vector<int> steps;
    std::vector<double> epsilons;
    std::vector<long> seeds;
    int dimension = 2;
    StateVector mean;  // empty means zero vector
    double stddev = 1.0;
    int fine_steps_multiplier = 100;
    int curvature_resolution = 10000;
    RegularityConfig regularity;
    std::string output_dir = ".";
};

/// Default threshold sweep: 13 log-spaced points covering 1e-5 .. 1e-1.
inline std::vector<double> default_epsilon_sweep() {
    std::vector<double> eps;
    eps.reserve(13);
    for (int i = 0; i <= 12; ++i) {
        eps.push_back(std::pow(10.0, -5.0 + static_cast<double>(i) / 3.0));
    }
    return eps;
}

namespace detail {

inline void reject_unknown_keys(const json& j, std::initializer_list<const char*> allowed,
                                const std::string& context) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : allowed) {
            if (it.key() == k) {
                ok = true;
                break;
            }
        }
        if (!ok) {
            throw std::runtime_error("config: unknown key \"" + it.key() + "\" in " + context);
        }
    }
}

inline StateVector broadcast_mean(const json& j, int dimension) {
    if (j.is_number()) {
        return StateVector(static_cast<std::size_t>(dimension), j.get<double>());
    }
    StateVector mean = j.get<StateVector>();
    if (mean.size() != static_cast<std::size_t>(dimension)) {
        throw std::runtime_error("config: initial_state.mean dimension mismatch");
    }
    return mean;
}

inline InitialStateSpec parse_initial_state(const json& j) {
    if (!j.is_object()) throw std::runtime_error("config: initial_state must be an object");
    InitialStateSpec spec;
    if (j.contains("values")) {
        reject_unknown_keys(j, {"values"}, "initial_state");
        spec.values = j.at("values").get<StateVector>();
        if (spec.values->empty()) {
            throw std::runtime_error("config: initial_state.values must be non-empty");
        }
        spec.dimension = static_cast<int>(spec.values->size());
        return spec;
    }
    reject_unknown_keys(j, {"seed", "dimension", "mean", "stddev"}, "initial_state");
    if (!j.contains("dimension")) {
        throw std::runtime_error("config: sampled initial_state needs \"dimension\"");
    }
    spec.dimension = j.at("dimension").get<int>();
    if (spec.dimension < 1) throw std::runtime_error("config: dimension must be >= 1");
    spec.seed = j.value("seed", 0L);
    spec.stddev = j.value("stddev", 1.0);
    spec.mean = j.contains("mean") ? broadcast_mean(j.at("mean"), spec.dimension)
                                   : StateVector(static_cast<std::size_t>(spec.dimension), 0.0);
    return spec;
}

inline ordered_json initial_state_to_json(const InitialStateSpec& s) {
    if (s.values.has_value()) return ordered_json{{"values", *s.values}};
    return ordered_json{
        {"seed", s.seed}, {"dimension", s.dimension}, {"mean", s.mean}, {"stddev", s.stddev}};
}

inline RegularityConfig parse_regularity(const json& j) {
    RegularityConfig cfg;
    if (j.is_null()) return cfg;
    if (!j.is_object()) throw std::runtime_error("config: regularity must be an object");
    reject_unknown_keys(j, {"lipschitz", "curvature", "estimate"}, "regularity");
    if (j.contains("lipschitz")) cfg.lipschitz = j.at("lipschitz").get<double>();
    if (j.contains("curvature")) cfg.curvature = j.at("curvature").get<double>();
    if (j.contains("estimate")) {
        const json& e = j.at("estimate");
        reject_unknown_keys(e, {"box_extent", "box_lo", "box_hi", "samples", "seed"},
                            "regularity.estimate");
        EstimationSpec est;
        est.box_extent = e.value("box_extent", 3.0);
        if (e.contains("box_lo") != e.contains("box_hi")) {
            throw std::runtime_error("config: box_lo and box_hi must be given together");
        }
        if (e.contains("box_lo")) {
            est.box = BoundingBox{e.at("box_lo").get<StateVector>(),
                                  e.at("box_hi").get<StateVector>()};
        }
        est.samples = e.value("samples", 10000);
        est.seed = e.value("seed", std::uint64_t{0});
        cfg.estimate = est;
    }
    return cfg;
}

inline ordered_json regularity_to_json(const RegularityConfig& cfg) {
    ordered_json j = ordered_json::object();
    if (cfg.lipschitz.has_value()) j["lipschitz"] = *cfg.lipschitz;
    if (cfg.curvature.has_value()) j["curvature"] = *cfg.curvature;
    if (cfg.estimate.has_value()) {
        ordered_json e = ordered_json::object();
        if (cfg.estimate->box.has_value()) {
            e["box_lo"] = cfg.estimate->box->lo;
            e["box_hi"] = cfg.estimate->box->hi;
        } else {
            e["box_extent"] = cfg.estimate->box_extent;
        }
        e["samples"] = cfg.estimate->samples;
        e["seed"] = cfg.estimate->seed;
        j["estimate"] = e;
    }
    return j;
}

}  // namespace detail

inline RunConfig parse_run_config(const json& j) {
    if (!j.is_object()) throw std::runtime_error("config: root must be an object");
    detail::reject_unknown_keys(
        j,
        {"field", "steps", "grid_nodes", "initial_state", "epsilons", "tolerance",
         "repetitions", "fine_steps_multiplier", "curvature_resolution", "regularity",
         "output_dir"},
        "run config");
    RunConfig cfg;
    if (j.contains("field")) cfg.field = j.at("field");
    if (j.contains("steps")) cfg.steps = j.at("steps").get<int>();
    if (j.contains("grid_nodes")) {
        cfg.grid_nodes = j.at("grid_nodes").get<std::vector<double>>();
    }
    if (cfg.steps.has_value() == cfg.grid_nodes.has_value()) {
        throw std::runtime_error("config: exactly one of \"steps\" / \"grid_nodes\" required");
    }
    if (!j.contains("initial_state")) {
        throw std::runtime_error("config: \"initial_state\" is required");
    }
    cfg.initial_state = detail::parse_initial_state(j.at("initial_state"));
    if (j.contains("epsilons")) cfg.epsilons = j.at("epsilons").get<std::vector<double>>();
    if (j.contains("tolerance")) cfg.tolerance = j.at("tolerance").get<double>();
    if (cfg.epsilons.empty() && !cfg.tolerance.has_value()) {
        throw std::runtime_error("config: need \"epsilons\" and/or \"tolerance\"");
    }
    for (double e : cfg.epsilons) {
        if (!(e >= 0.0)) throw std::runtime_error("config: epsilons must be >= 0");
    }
    cfg.repetitions = j.value("repetitions", 1);
    if (cfg.repetitions < 1) throw std::runtime_error("config: repetitions must be >= 1");
    cfg.fine_steps_multiplier = j.value("fine_steps_multiplier", 100);
    if (cfg.fine_steps_multiplier < 10) {
        throw std::runtime_error("config: fine_steps_multiplier must be >= 10");
    }
    cfg.curvature_resolution = j.value("curvature_resolution", 10000);
    cfg.regularity = detail::parse_regularity(j.value("regularity", json(nullptr)));
    cfg.output_dir = j.value("output_dir", std::string("."));
    return cfg;
}

inline ordered_json to_json(const RunConfig& cfg) {
    ordered_json j;
    j["field"] = cfg.field;
    if (cfg.steps.has_value()) j["steps"] = *cfg.steps;
    if (cfg.grid_nodes.has_value()) j["grid_nodes"] = *cfg.grid_nodes;
    j["initial_state"] = detail::initial_state_to_json(cfg.initial_state);
    if (!cfg.epsilons.empty()) j["epsilons"] = cfg.epsilons;
    if (cfg.tolerance.has_value()) j["tolerance"] = *cfg.tolerance;
    j["repetitions"] = cfg.repetitions;
    j["fine_steps_multiplier"] = cfg.fine_steps_multiplier;
    j["curvature_resolution"] = cfg.curvature_resolution;
    const ordered_json reg = detail::regularity_to_json(cfg.regularity);
    if (!reg.empty()) j["regularity"] = reg;
    j["output_dir"] = cfg.output_dir;
    return j;
}

inline SweepConfig parse_sweep_config(const json& j) {
    if (!j.is_object()) throw std::runtime_error("config: root must be an object");
    detail::reject_unknown_keys(
        j,
        {"fields", "steps", "epsilons", "default_epsilon_sweep", "seeds", "dimension", "mean",
         "stddev", "fine_steps_multiplier", "curvature_resolution", "regularity", "output_dir"},
        "sweep config");
    SweepConfig cfg;
    if (!j.contains("fields") || !j.at("fields").is_array() || j.at("fields").empty()) {
        throw std::runtime_error("config: sweep needs a non-empty \"fields\" array");
    }
    for (const auto& f : j.at("fields")) cfg.fields.push_back(f);
    if (!j.contains("steps") || j.at("steps").empty()) {
        throw std::runtime_error("config: sweep needs a non-empty \"steps\" array");
    }
    cfg.steps = j.at("steps").get<std::vector<int>>();
    if (j.value("default_epsilon_sweep", false)) {
        cfg.epsilons = default_epsilon_sweep();
    }
    if (j.contains("epsilons")) {
        const auto extra = j.at("epsilons").get<std::vector<double>>();
        cfg.epsilons.insert(cfg.epsilons.end(), extra.begin(), extra.end());
    }
    if (cfg.epsilons.empty()) {
        throw std::runtime_error(
            "config: sweep needs \"epsilons\" and/or \"default_epsilon_sweep\": true");
    }
    if (!j.contains("seeds") || j.at("seeds").empty()) {
        throw std::runtime_error("config: sweep needs a non-empty \"seeds\" array");
    }
    cfg.seeds = j.at("seeds").get<std::vector<long>>();
    cfg.dimension = j.value("dimension", 2);
    if (cfg.dimension < 1) throw std::runtime_error("config: dimension must be >= 1");
    cfg.mean = j.contains("mean")
                   ? detail::broadcast_mean(j.at("mean"), cfg.dimension)
                   : StateVector(static_cast<std::size_t>(cfg.dimension), 0.0);
    cfg.stddev = j.value("stddev", 1.0);
    cfg.fine_steps_multiplier = j.value("fine_steps_multiplier", 100);
    if (cfg.fine_steps_multiplier < 10) {
        throw std::runtime_error("config: fine_steps_multiplier must be >= 10");
    }
    cfg.curvature_resolution = j.value("curvature_resolution", 10000);
    cfg.regularity = detail::parse_regularity(j.value("regularity", json(nullptr)));
    cfg.output_dir = j.value("output_dir", std::string("."));
    return cfg;
}

inline ordered_json to_json(const SweepConfig& cfg) {
    ordered_json j;
    j["fields"] = cfg.fields;
    j["steps"] = cfg.steps;
    j["epsilons"] = cfg.epsilons;
    j["seeds"] = cfg.seeds;
    j["dimension"] = cfg.dimension;
    j["mean"] = cfg.mean;
    j["stddev"] = cfg.stddev;
    j["fine_steps_multiplier"] = cfg.fine_steps_multiplier;
    j["curvature_resolution"] = cfg.curvature_resolution;
    const ordered_json reg = detail::regularity_to_json(cfg.regularity);
    if (!reg.empty()) j["regularity"] = reg;
    j["output_dir"] = cfg.output_dir;
    return j;
}

// ---------------------------------------------------------------------------
// Result rows and CSV persistence
// ---------------------------------------------------------------------------

/// One experiment outcome. seed is -1 for explicitly supplied initial
/// states. speedup_rounds = steps / rounds_folded, the sequential-round
/// speedup against a same-steps Euler baseline.
struct ResultRow {
    std::string field_id;
    int steps = 0;
    double epsilon = 0.0;
    long seed = 0;
    long rounds_folded = 0;
    long rounds_strict = 0;
    long total_evals = 0;
    double acceptance_fraction = 0.0;
    double speedup_rounds = 0.0;
    double final_spec_deviation = 0.0;
    double max_spec_deviation = 0.0;
    double bound_value = 0.0;
    bool bound_holds = false;
};

inline const char* csv_header() {
    return "field_id,steps,epsilon,seed,rounds_folded,rounds_strict,total_evals,"
           "acceptance_fraction,speedup_rounds,final_spec_deviation,max_spec_deviation,"
           "bound_value,bound_holds";
}

inline std::string to_csv_line(const ResultRow& r) {
    std::string out = r.field_id;
    out += ',';
    out += std::to_string(r.steps);
    out += ',';
    out += detail::format_double(r.epsilon);
    out += ',';
    out += std::to_string(r.seed);
    out += ',';
    out += std::to_string(r.rounds_folded);
    out += ',';
    out += std::to_string(r.rounds_strict);
    out += ',';
    out += std::to_string(r.total_evals);
    out += ',';
    out += detail::format_double(r.acceptance_fraction);
    out += ',';
    out += detail::format_double(r.speedup_rounds);
    out += ',';
    out += detail::format_double(r.final_spec_deviation);
    out += ',';
    out += detail::format_double(r.max_spec_deviation);
    out += ',';
    out += detail::format_double(r.bound_value);
    out += ',';
    out += r.bound_holds ? "true" : "false";
    return out;
}

using RowKey = std::tuple<std::string, int, double, long>;

inline RowKey row_key(const ResultRow& r) {
    return {r.field_id, r.steps, r.epsilon, r.seed};
}

inline bool row_less(const ResultRow& a, const ResultRow& b) {
    return row_key(a) < row_key(b);
}

inline void sort_rows(std::vector<ResultRow>& rows) {
    std::stable_sort(rows.begin(), rows.end(), row_less);
}

inline std::string rows_to_csv(const std::vector<ResultRow>& rows) {
    std::string out = csv_header();
    out += '\n';
    for (const auto& r : rows) {
        out += to_csv_line(r);
        out += '\n';
    }
    return out;
}

inline void write_csv_file(const std::vector<ResultRow>& rows, const std::string& path) {
    std::ofstream out(path, std::ios::binary);  // binary keeps newlines LF
    if (!out) throw std::runtime_error("cannot write \"" + path + "\"");
    out << rows_to_csv(rows);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
        const std::size_t comma = line.find(',', start);
        if (comma == std::string::npos) {
            parts.push_back(line.substr(start));
            break;
        }
        parts.push_back(line.substr(start, comma - start));
        start = comma + 1;
    }
    return parts;
}

inline std::vector<ResultRow> parse_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("results csv: empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != csv_header()) {
        throw std::runtime_error("results csv: unexpected header \"" + line + "\"");
    }
    std::vector<ResultRow> rows;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto parts = split_csv_line(line);
        if (parts.size() != 13) {
            throw std::runtime_error("results csv: line " + std::to_string(lineno) + " has " +
                                     std::to_string(parts.size()) + " columns, expected 13");
        }
        try {
            ResultRow r;
            r.field_id = parts[0];
            r.steps = std::stoi(parts[1]);
            r.epsilon = std::stod(parts[2]);
            r.seed = std::stol(parts[3]);
            r.rounds_folded = std::stol(parts[4]);
            r.rounds_strict = std::stol(parts[5]);
            r.total_evals = std::stol(parts[6]);
            r.acceptance_fraction = std::stod(parts[7]);
            r.speedup_rounds = std::stod(parts[8]);
            r.final_spec_deviation = std::stod(parts[9]);
            r.max_spec_deviation = std::stod(parts[10]);
            r.bound_value = std::stod(parts[11]);
            if (parts[12] == "true") {
                r.bound_holds = true;
            } else if (parts[12] == "false") {
                r.bound_holds = false;
            } else {
                throw std::runtime_error("bound_holds must be true/false");
            }
            rows.push_back(std::move(r));
        } catch (const std::exception& e) {
            throw std::runtime_error("results csv: line " + std::to_string(lineno) + ": " +
                                     e.what());
        }
    }
    return rows;
}

inline std::vector<ResultRow> read_csv_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read \"" + path + "\"");
    return parse_csv(in);
}

// ---------------------------------------------------------------------------
// Running experiments
// ---------------------------------------------------------------------------

/// Full outcome of one (epsilon, seed) run; the CSV row plus the report
/// artifacts that go into the companion JSON.
struct RunArtifacts {
    ResultRow row;
    BoundReport bound;
    SpecTrace trace;
    RunStats stats;
    double speedup_rounds_vs_50steps = 0.0;
};

namespace detail {

struct RegularityResolution {
    FieldRegularity regularity;
    bool curvature_estimated = false;
};

/// M from explicit override, field declaration, or sampling (in that
/// order); N from override, field declaration, or a trajectory estimate.
inline RegularityResolution resolve_regularity(const VelocityField& field,
                                               const RegularityConfig& cfg,
                                               const StateVector& x0,
                                               int curvature_resolution) {
    RegularityResolution out;
    if (cfg.lipschitz.has_value()) {
        out.regularity.lipschitz = *cfg.lipschitz;
        out.regularity.provenance = Provenance::declared;
    } else if (auto m = field.declared_lipschitz()) {
        out.regularity.lipschitz = *m;
        out.regularity.provenance = Provenance::declared;
    } else if (cfg.estimate.has_value()) {
        BoundingBox box;
        if (cfg.estimate->box.has_value()) {
            box = *cfg.estimate->box;
        } else {
            const std::size_t d = static_cast<std::size_t>(field.dim());
            box.lo.assign(d, -cfg.estimate->box_extent);
            box.hi.assign(d, cfg.estimate->box_extent);
        }
        out.regularity.lipschitz =
            estimate_lipschitz(field, box, cfg.estimate->samples, cfg.estimate->seed);
        out.regularity.provenance = Provenance::estimated;
    } else {
        throw std::runtime_error(
            "field declares no Lipschitz constant; supply regularity.lipschitz or "
            "regularity.estimate (--estimate-regularity on the command line)");
    }
    if (cfg.curvature.has_value()) {
        out.regularity.curvature = *cfg.curvature;
    } else if (auto n = field.declared_curvature()) {
        out.regularity.curvature = *n;
    } else {
        out.regularity.curvature = estimate_curvature(field, x0, curvature_resolution);
        out.curvature_estimated = true;
    }
    return out;
}

}  // namespace detail

/// Runs Euler, the speculative sampler, and the reference oracle for every
/// (epsilon, repetition) pair of the config. Fully deterministic given the
/// seeds. Rows come back sorted by (field, steps, epsilon, seed).
inline std::vector<RunArtifacts> run_single(const RunConfig& config) {
    const ResolvedField resolved = resolve_field(config.field);
    const VelocityField& field = *resolved.field;

    const TimeGrid grid = config.steps.has_value() ? make_uniform_grid(*config.steps)
                                                   : TimeGrid(*config.grid_nodes);
    const int K = grid.step_count();

    if (config.initial_state.dimension != field.dim()) {
        throw std::runtime_error("config: initial state dimension " +
                                 std::to_string(config.initial_state.dimension) +
                                 " does not match field dimension " +
                                 std::to_string(field.dim()) + " for field " + resolved.id);
    }

    std::vector<double> epsilons = config.epsilons;
    if (config.tolerance.has_value()) {
        // The threshold rule needs M; resolve it against a throwaway x0.
        const StateVector probe(static_cast<std::size_t>(field.dim()), 0.0);
        const auto reg = detail::resolve_regularity(field, config.regularity, probe,
                                                    config.curvature_resolution);
        epsilons.push_back(epsilon_for_tolerance(*config.tolerance, reg.regularity.lipschitz));
    }

    std::vector<RunArtifacts> artifacts;
    for (int rep = 0; rep < config.repetitions; ++rep) {
        long seed = -1;
        StateVector x0;
        if (config.initial_state.values.has_value()) {
            x0 = *config.initial_state.values;
        } else {
            seed = config.initial_state.seed + rep;
            x0 = sample_gaussian_state(static_cast<std::uint64_t>(seed),
                                       config.initial_state.dimension,
                                       config.initial_state.mean, config.initial_state.stddev);
        }

        const auto [euler, euler_stats] = full_euler(field, grid, x0);
        const Trajectory reference = restrict_to_grid(
            reference_solution(field, x0, config.fine_steps_multiplier * K), grid);
        const auto reg =
            detail::resolve_regularity(field, config.regularity, x0, config.curvature_resolution);

        for (double eps : epsilons) {
            SpecConfig spec_config;
            spec_config.epsilon = eps;
            SpeculativeResult fc = speculative_euler(field, grid, x0, spec_config);
            const DeviationReport dev = deviation_report(fc.trajectory, euler, reference);
            const BoundReport bound =
                evaluate_bound(reg.regularity, grid, fc.stats, spec_config, field.dim(), dev);

            RunArtifacts art;
            art.row.field_id = resolved.id;
            art.row.steps = K;
            art.row.epsilon = eps;
            art.row.seed = seed;
            art.row.rounds_folded = fc.stats.rounds_folded;
            art.row.rounds_strict = fc.stats.rounds_strict;
            art.row.total_evals = fc.stats.total_evals;
            art.row.acceptance_fraction = fc.stats.acceptance_fraction;
            art.row.speedup_rounds =
                static_cast<double>(K) / static_cast<double>(fc.stats.rounds_folded);
            art.row.final_spec_deviation = dev.final_spec_deviation;
            art.row.max_spec_deviation = dev.max_spec_deviation;
            art.row.bound_value = bound.per_step_bound.back();
            art.row.bound_holds = bound.bound_holds;
            art.bound = bound;
            art.trace = std::move(fc.trace);
            art.stats = fc.stats;
            art.speedup_rounds_vs_50steps =
                50.0 / static_cast<double>(fc.stats.rounds_folded);
            artifacts.push_back(std::move(art));
        }
    }
    std::stable_sort(artifacts.begin(), artifacts.end(),
                     [](const RunArtifacts& a, const RunArtifacts& b) {
                         return row_less(a.row, b.row);
                     });
    return artifacts;
}

/// Per-row failure note emitted by a sweep that keeps going.
struct SweepError {
    RowKey key;
    std::string message;
};

struct SweepOutcome {
    std::vector<ResultRow> rows;          // merged with resumed rows, sorted
    std::vector<RunArtifacts> artifacts;  // newly computed this invocation
    std::vector<SweepError> errors;
};

/// Cross-product execution over fields x steps x epsilons x seeds. Rows
/// already present in `existing` are skipped by key, which makes an
/// interrupted sweep resumable; unknown rows in `existing` are preserved.
/// Tasks group the epsilon axis so the Euler/reference/curvature work per
/// (field, steps, seed) is shared. With jobs > 1 tasks run concurrently;
/// every task is pure, and the final stable sort makes the output
/// independent of scheduling.
inline SweepOutcome sweep(const SweepConfig& config,
                          const std::vector<ResultRow>& existing = {}, int jobs = 1) {
    if (jobs < 1) throw std::invalid_argument("sweep: jobs must be >= 1");

    std::vector<RowKey> existing_keys;
    existing_keys.reserve(existing.size());
    for (const auto& r : existing) existing_keys.push_back(row_key(r));
    std::sort(existing_keys.begin(), existing_keys.end());
    const auto already_have = [&existing_keys](const RowKey& k) {
        return std::binary_search(existing_keys.begin(), existing_keys.end(), k);
    };

    struct Task {
        RunConfig config;
        std::string field_id;
    };
    std::vector<Task> tasks;
    SweepOutcome out;
    for (const auto& field_json : config.fields) {
        ResolvedField resolved;
        try {
            resolved = resolve_field(field_json);
        } catch (const std::exception& e) {
            out.errors.push_back(SweepError{{field_json.dump(), 0, 0.0, 0}, e.what()});
            continue;
        }
        for (int K : config.steps) {
            for (long seed : config.seeds) {
                std::vector<double> missing;
                for (double eps : config.epsilons) {
                    if (!already_have({resolved.id, K, eps, seed})) missing.push_back(eps);
                }
                if (missing.empty()) continue;
                RunConfig rc;
                rc.field = field_json;
                rc.steps = K;
                rc.initial_state.seed = seed;
                rc.initial_state.dimension = config.dimension;
                rc.initial_state.mean = config.mean;
                rc.initial_state.stddev = config.stddev;
                rc.epsilons = std::move(missing);
                rc.repetitions = 1;
                rc.fine_steps_multiplier = config.fine_steps_multiplier;
                rc.curvature_resolution = config.curvature_resolution;
                rc.regularity = config.regularity;
                tasks.push_back(Task{std::move(rc), resolved.id});
            }
        }
    }

    std::vector<std::vector<RunArtifacts>> results(tasks.size());
    std::vector<std::optional<SweepError>> task_errors(tasks.size());
    std::atomic<std::size_t> next{0};
    const auto worker = [&]() {
        while (true) {
            const std::size_t i = next.fetch_add(1);
            if (i >= tasks.size()) return;
            try {
                results[i] = run_single(tasks[i].config);
            } catch (const std::exception& e) {
                task_errors[i] = SweepError{
                    {tasks[i].field_id, tasks[i].config.steps.value_or(0),
                     tasks[i].config.epsilons.empty() ? 0.0 : tasks[i].config.epsilons.front(),
                     tasks[i].config.initial_state.seed},
                    e.what()};
            }
        }
    };
    if (jobs == 1 || tasks.size() <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(jobs), tasks.size());
        pool.reserve(n);
        for (std::size_t i = 0; i < n; ++i) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    out.rows = existing;
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        if (task_errors[i].has_value()) {
            out.errors.push_back(*task_errors[i]);
            continue;
        }
        for (auto& art : results[i]) {
            out.rows.push_back(art.row);
            out.artifacts.push_back(std::move(art));
        }
    }
    sort_rows(out.rows);
    std::stable_sort(out.artifacts.begin(), out.artifacts.end(),
                     [](const RunArtifacts& a, const RunArtifacts& b) {
                         return row_less(a.row, b.row);
                     });
    return out;
}

/// Companion JSON for a batch of runs: the full bound report and run stats
/// per row, keyed like the CSV.
inline ordered_json artifacts_to_json(const std::vector<RunArtifacts>& artifacts) {
    ordered_json rows = ordered_json::array();
    for (const auto& art : artifacts) {
        rows.push_back(ordered_json{
            {"field_id", art.row.field_id},
            {"steps", art.row.steps},
            {"epsilon", art.row.epsilon},
            {"seed", art.row.seed},
            {"run_stats", flowcast::to_json(art.stats)},
            {"speedup_rounds", art.row.speedup_rounds},
            {"speedup_rounds_vs_50steps", art.speedup_rounds_vs_50steps},
            {"bound_report", flowcast::to_json(art.bound)},
        });
    }
    return ordered_json{{"runs", rows}};
}

}  // namespace flowcast::bench
