// Command-line entry point: run / sweep / bound / compare / gen-field.
//
// Exit codes: 0 success, 1 expected failure (config or runtime), 2 usage or
// schema error. Failures print a single machine-parsable line to stderr:
//   flowcast: error: <message>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "flowcast/flowcast.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;
using namespace flowcast;

namespace {

struct CliError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

json load_json_file(const std::string& path, const std::string& what) {
    std::ifstream in(path);
    if (!in) throw CliError("cannot open " + what + " \"" + path + "\"");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw CliError(what + " \"" + path + "\" is not valid JSON: " + e.what());
    }
    return j;
}

void write_text_file(const fs::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CliError("cannot write \"" + path.string() + "\"");
    out << content;
}

void write_json_file(const fs::path& path, const ordered_json& j) {
    write_text_file(path, j.dump(2) + "\n");
}

/// --field accepts a registry alias, a path to a field file, or kind:path.
json field_source_from_flag(const std::string& flag) {
    const auto colon = flag.find(':');
    if (colon != std::string::npos) {
        return json{{"path", flag.substr(colon + 1)}};
    }
    if (flag.find('/') != std::string::npos ||
        (flag.size() > 5 && flag.compare(flag.size() - 5, 5, ".json") == 0)) {
        return json{{"path", flag}};
    }
    return json{{"alias", flag}};
}

StateVector parse_state_flag(const std::string& str) {
    StateVector out;
    std::stringstream ss(str);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            out.push_back(std::stod(item));
        } catch (const std::exception&) {
            throw CliError("cannot parse --x0 component \"" + item + "\"");
        }
    }
    if (out.empty()) throw CliError("--x0 must list at least one coordinate");
    return out;
}

struct RunFlags {
    std::string config_path;
    std::string output_dir;
    std::string field;
    int steps = 0;
    double epsilon = std::nan("");
    double tolerance = std::nan("");
    long seed = std::numeric_limits<long>::min();
    std::string x0;
    bool estimate_regularity = false;
    double box_extent = 3.0;
    int estimate_samples = 10000;
    int verbosity = 0;
};

/// Builds the effective run config from an optional config file plus
/// command-line overrides (overrides win).
bench::RunConfig resolve_run_config(const RunFlags& flags, bool tolerance_only) {
    bench::RunConfig cfg;
    bool have_config = false;
    if (!flags.config_path.empty()) {
        cfg = bench::parse_run_config(load_json_file(flags.config_path, "config"));
        have_config = true;
    }
    if (!flags.field.empty()) cfg.field = field_source_from_flag(flags.field);
    if (flags.steps > 0) {
        cfg.steps = flags.steps;
        cfg.grid_nodes.reset();
    } else if (!cfg.steps.has_value() && !cfg.grid_nodes.has_value()) {
        cfg.steps = 50;
    }
    if (!std::isnan(flags.epsilon)) cfg.epsilons = {flags.epsilon};
    if (!std::isnan(flags.tolerance)) {
        cfg.tolerance = flags.tolerance;
        if (tolerance_only) cfg.epsilons.clear();
    }
    if (flags.estimate_regularity) {
        bench::EstimationSpec est;
        est.box_extent = flags.box_extent;
        est.samples = flags.estimate_samples;
        cfg.regularity.estimate = est;
    }

    const bench::ResolvedField resolved = bench::resolve_field(cfg.field);
    if (!flags.x0.empty()) {
        cfg.initial_state = bench::InitialStateSpec{};
        cfg.initial_state.values = parse_state_flag(flags.x0);
        cfg.initial_state.dimension = static_cast<int>(cfg.initial_state.values->size());
    } else if (!have_config || cfg.initial_state.dimension == 0) {
        cfg.initial_state = bench::InitialStateSpec{};
        cfg.initial_state.dimension = resolved.field->dim();
        cfg.initial_state.mean.assign(static_cast<std::size_t>(resolved.field->dim()), 0.0);
        cfg.initial_state.stddev = 1.0;
    }
    if (flags.seed != std::numeric_limits<long>::min()) {
        if (cfg.initial_state.values.has_value()) {
            throw CliError("--seed conflicts with an explicit initial state");
        }
        cfg.initial_state.seed = flags.seed;
    }
    if (cfg.epsilons.empty() && !cfg.tolerance.has_value()) {
        throw CliError("no threshold given: pass --epsilon, --tolerance, or a config with "
                       "\"epsilons\"");
    }
    // Embed the field source so the echoed config is self-contained.
    if (!resolved.spec.contains("alias")) cfg.field = json(resolved.spec);
    if (!flags.output_dir.empty()) cfg.output_dir = flags.output_dir;
    return cfg;
}

fs::path prepare_output_dir(const std::string& dir) {
    fs::path p(dir);
    fs::create_directories(p);
    return p;
}

int cmd_run(const RunFlags& flags) {
    const bench::RunConfig cfg = resolve_run_config(flags, false);
    const auto artifacts = bench::run_single(cfg);

    const fs::path out = prepare_output_dir(cfg.output_dir);
    std::vector<bench::ResultRow> rows;
    rows.reserve(artifacts.size());
    for (const auto& a : artifacts) rows.push_back(a.row);
    bench::write_csv_file(rows, (out / "results.csv").string());
    write_json_file(out / "reports.json", bench::artifacts_to_json(artifacts));
    for (std::size_t i = 0; i < artifacts.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "trace_%03zu.json", i);
        write_json_file(out / name, to_json(artifacts[i].trace));
    }
    write_json_file(out / "effective-config.json", bench::to_json(cfg));

    std::cout << "wrote " << rows.size() << " row" << (rows.size() == 1 ? "" : "s") << " to "
              << (out / "results.csv").string() << "\n";
    if (flags.verbosity > 0) {
        std::cout << bench::csv_header() << "\n";
        for (const auto& r : rows) std::cout << bench::to_csv_line(r) << "\n";
    }
    return 0;
}

int cmd_bound(const RunFlags& flags) {
    bench::RunConfig cfg = resolve_run_config(flags, true);
    cfg.repetitions = 1;
    const bool tolerance_mode = cfg.tolerance.has_value() && cfg.epsilons.empty();
    const auto artifacts = bench::run_single(cfg);
    const bench::RunArtifacts& art = artifacts.back();

    if (tolerance_mode) {
        std::cout << "epsilon " << art.row.epsilon << " chosen for tolerance "
                  << *cfg.tolerance << "\n";
        std::cout << "max_spec_deviation " << art.row.max_spec_deviation
                  << (art.row.max_spec_deviation <= *cfg.tolerance ? " <= " : " > ")
                  << *cfg.tolerance << "\n";
    }
    if (art.bound.advisory) {
        std::cerr << "advisory: Lipschitz constant was estimated by sampling; it is a lower "
                     "bound and the guarantee is only indicative\n";
    }
    double max_ratio = 0.0;
    bool any_ratio = false;
    for (double r : art.bound.tightness_ratio) {
        if (!is_tightness_sentinel(r)) {
            max_ratio = std::max(max_ratio, r);
            any_ratio = true;
        }
    }
    std::cout << "bound_holds " << (art.bound.bound_holds ? "true" : "false") << "\n";
    if (any_ratio) {
        std::cout << "max_tightness_ratio " << max_ratio << "\n";
    } else {
        std::cout << "max_tightness_ratio exact-match (measured error is zero everywhere)\n";
    }

    const fs::path out = prepare_output_dir(cfg.output_dir);
    write_json_file(out / "bound-report.json", to_json(art.bound));
    write_json_file(out / "effective-config.json", bench::to_json(cfg));
    return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& output_dir, int jobs,
              bool no_resume, int verbosity) {
    if (config_path.empty()) throw CliError("sweep requires --config");
    bench::SweepConfig cfg = bench::parse_sweep_config(load_json_file(config_path, "config"));
    if (!output_dir.empty()) cfg.output_dir = output_dir;

    const fs::path out = prepare_output_dir(cfg.output_dir);
    const fs::path csv_path = out / "results.csv";

    std::vector<bench::ResultRow> existing;
    if (!no_resume && fs::exists(csv_path)) {
        existing = bench::read_csv_file(csv_path.string());
        std::cout << "resuming: " << existing.size() << " rows already in "
                  << csv_path.string() << "\n";
    }

    const bench::SweepOutcome outcome = bench::sweep(cfg, existing, jobs);
    bench::write_csv_file(outcome.rows, csv_path.string());
    write_json_file(out / "reports.json", bench::artifacts_to_json(outcome.artifacts));
    write_json_file(out / "effective-config.json", bench::to_json(cfg));

    if (!outcome.errors.empty()) {
        std::string report;
        for (const auto& err : outcome.errors) {
            report += std::get<0>(err.key) + ",steps=" + std::to_string(std::get<1>(err.key)) +
                      ",seed=" + std::to_string(std::get<3>(err.key)) + ": " + err.message +
                      "\n";
        }
        write_text_file(out / "errors.txt", report);
        std::cerr << outcome.errors.size() << " task(s) failed; see "
                  << (out / "errors.txt").string() << "\n";
    }
    std::cout << "wrote " << outcome.rows.size() << " rows to " << csv_path.string() << "\n";
    if (verbosity > 0) {
        for (const auto& r : outcome.rows) std::cout << bench::to_csv_line(r) << "\n";
    }
    return outcome.errors.empty() ? 0 : 1;
}

//  compare: per-column maximum absolute differences between two result CSVs.
//  Deviation-valued columns tolerate 1e-9; everything else must match.

struct ColumnRule {
    const char* name;
    bool numeric;
    double tolerance;  // 0 means exact
};

constexpr ColumnRule kColumns[] = {
    {"field_id", false, 0.0},
    {"steps", true, 0.0},
    {"epsilon", true, 0.0},
    {"seed", true, 0.0},
    {"rounds_folded", true, 0.0},
    {"rounds_strict", true, 0.0},
    {"total_evals", true, 0.0},
    {"acceptance_fraction", true, 0.0},
    {"speedup_rounds", true, 0.0},
    {"final_spec_deviation", true, 1e-9},
    {"max_spec_deviation", true, 1e-9},
    {"bound_value", true, 1e-9},
    {"bound_holds", false, 0.0},
};

std::vector<std::vector<std::string>> read_table(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CliError("cannot read \"" + path + "\"");
    std::vector<std::vector<std::string>> table;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        table.push_back(bench::split_csv_line(line));
    }
    if (table.empty()) throw CliError("\"" + path + "\" is empty");
    return table;
}

int cmd_compare(const std::string& path_a, const std::string& path_b) {
    const auto a = read_table(path_a);
    const auto b = read_table(path_b);

    const auto join = [](const std::vector<std::string>& parts) {
        std::string s;
        for (std::size_t i = 0; i < parts.size(); ++i) {
            if (i) s += ',';
            s += parts[i];
        }
        return s;
    };
    if (join(a[0]) != bench::csv_header() || join(b[0]) != bench::csv_header()) {
        std::cerr << "flowcast: error: schema mismatch (headers differ from the results "
                     "schema)\n";
        return 2;
    }
    if (a.size() != b.size()) {
        std::cout << "row count differs: " << a.size() - 1 << " vs " << b.size() - 1 << "\n";
        return 1;
    }

    constexpr std::size_t ncols = sizeof(kColumns) / sizeof(kColumns[0]);
    std::vector<double> max_diff(ncols, 0.0);
    std::vector<long> mismatches(ncols, 0);
    for (std::size_t r = 1; r < a.size(); ++r) {
        if (a[r].size() != ncols || b[r].size() != ncols) {
            std::cerr << "flowcast: error: schema mismatch (row " << r
                      << " has the wrong column count)\n";
            return 2;
        }
        for (std::size_t c = 0; c < ncols; ++c) {
            if (!kColumns[c].numeric) {
                if (a[r][c] != b[r][c]) mismatches[c] += 1;
                continue;
            }
            const double va = std::stod(a[r][c]);
            const double vb = std::stod(b[r][c]);
            max_diff[c] = std::max(max_diff[c], std::abs(va - vb));
        }
    }

    bool ok = true;
    std::cout << "column,max_abs_diff,tolerance,status\n";
    for (std::size_t c = 0; c < ncols; ++c) {
        bool within;
        std::string diff;
        if (kColumns[c].numeric) {
            within = max_diff[c] <= kColumns[c].tolerance;
            diff = bench::detail::format_double(max_diff[c]);
        } else {
            within = mismatches[c] == 0;
            diff = std::to_string(mismatches[c]) + " mismatching";
        }
        ok = ok && within;
        std::cout << kColumns[c].name << "," << diff << ","
                  << bench::detail::format_double(kColumns[c].tolerance) << ","
                  << (within ? "ok" : "DIFFERS") << "\n";
    }
    return ok ? 0 : 1;
}

//  gen-field: synthesize tabulated / MLP field files by sampling an
//  analytic source, giving the file-ingestion path self-contained fixtures.

ordered_json sample_nested(const VelocityField& field, const std::vector<StateVector>& axes,
                           std::size_t axis, StateVector& coords) {
    ordered_json out = ordered_json::array();
    const bool leaf = axis + 1 == axes.size();
    for (double value : axes[axis]) {
        coords[axis] = value;
        if (leaf) {
            StateVector x(coords.begin(), coords.end() - 1);
            out.push_back(field.eval(x, coords.back()));
        } else {
            out.push_back(sample_nested(field, axes, axis + 1, coords));
        }
    }
    return out;
}

struct GenFieldFlags {
    std::string config_path;
    std::string field;
    std::string kind = "tabulated";
    std::string output_dir = ".";
    std::string name = "field.json";
    double box_extent = 3.0;
    int space_nodes = 5;
    int time_nodes = 9;
};

int cmd_gen_field_impl(const GenFieldFlags& flags, const bench::ResolvedField& resolved,
                       const json& source);

int cmd_gen_field(GenFieldFlags flags) {
    if (!flags.config_path.empty()) {
        const json j = load_json_file(flags.config_path, "config");
        bench::detail::reject_unknown_keys(
            j, {"field", "kind", "output_dir", "name", "box_extent", "space_nodes",
                "time_nodes"},
            "gen-field config");
        if (j.contains("field")) flags.field = ""; // config field object wins below
        flags.kind = j.value("kind", flags.kind);
        flags.output_dir = j.value("output_dir", flags.output_dir);
        flags.name = j.value("name", flags.name);
        flags.box_extent = j.value("box_extent", flags.box_extent);
        flags.space_nodes = j.value("space_nodes", flags.space_nodes);
        flags.time_nodes = j.value("time_nodes", flags.time_nodes);
        if (j.contains("field")) {
            const bench::ResolvedField resolved = bench::resolve_field(j.at("field"));
            return cmd_gen_field_impl(flags, resolved, j.at("field"));
        }
    }
    if (flags.field.empty()) throw CliError("gen-field requires --field or --config");
    const json source = field_source_from_flag(flags.field);
    const bench::ResolvedField resolved = bench::resolve_field(source);
    return cmd_gen_field_impl(flags, resolved, source);
}

int cmd_gen_field_impl(const GenFieldFlags& flags, const bench::ResolvedField& resolved,
                       const json& source) {
    const VelocityField& field = *resolved.field;
    const int d = field.dim();
    ordered_json out;

    if (flags.kind == "tabulated") {
        if (flags.space_nodes < 2 || flags.time_nodes < 2) {
            throw CliError("gen-field: need at least 2 nodes per axis");
        }
        std::vector<StateVector> axes;
        for (int a = 0; a < d; ++a) {
            StateVector nodes;
            for (int i = 0; i < flags.space_nodes; ++i) {
                nodes.push_back(-flags.box_extent +
                                2.0 * flags.box_extent * static_cast<double>(i) /
                                    static_cast<double>(flags.space_nodes - 1));
            }
            axes.push_back(std::move(nodes));
        }
        StateVector tnodes;
        for (int i = 0; i < flags.time_nodes; ++i) {
            tnodes.push_back(static_cast<double>(i) / static_cast<double>(flags.time_nodes - 1));
        }
        axes.push_back(std::move(tnodes));

        StateVector coords(axes.size(), 0.0);
        out["kind"] = "tabulated";
        out["axes"] = axes;
        out["values"] = sample_nested(field, axes, 0, coords);
    } else if (flags.kind == "mlp") {
        // Exact single-layer synthesis: only fields affine in (x, t) with a
        // time-independent slope can be represented.
        Matrix a(static_cast<std::size_t>(d),
                 StateVector(static_cast<std::size_t>(d) + 1, 0.0));
        StateVector bias(static_cast<std::size_t>(d), 0.0);
        if (auto c = dynamic_cast<const ConstantField*>(&field)) {
            bias = c->velocity();
        } else if (auto lin = dynamic_cast<const LinearField*>(&field)) {
            for (int r = 0; r < d; ++r) {
                for (int col = 0; col < d; ++col) {
                    a[static_cast<std::size_t>(r)][static_cast<std::size_t>(col)] =
                        lin->matrix()[static_cast<std::size_t>(r)][static_cast<std::size_t>(col)];
                }
            }
            bias = lin->offset();
        } else if (auto rot = dynamic_cast<const RotationField*>(&field)) {
            a[0][1] = -rot->omega();
            a[1][0] = rot->omega();
        } else {
            throw CliError("gen-field: --kind mlp supports constant, linear, and rotation "
                           "sources only (others are not exactly representable); use --kind "
                           "tabulated");
        }
        out["kind"] = "mlp";
        out["layers"] = ordered_json::array({ordered_json{
            {"weights", a}, {"bias", bias}, {"activation", "identity"}}});
    } else {
        throw CliError("gen-field: unknown --kind \"" + flags.kind +
                       "\" (expected tabulated or mlp)");
    }

    const fs::path dir = prepare_output_dir(flags.output_dir);
    write_json_file(dir / flags.name, out);

    ordered_json echo;
    echo["field"] = source;
    echo["kind"] = flags.kind;
    echo["output_dir"] = flags.output_dir;
    echo["name"] = flags.name;
    echo["box_extent"] = flags.box_extent;
    echo["space_nodes"] = flags.space_nodes;
    echo["time_nodes"] = flags.time_nodes;
    write_json_file(dir / "effective-config.json", echo);

    std::cout << "wrote " << (dir / flags.name).string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"flowcast: speculative generation for flow-matching ODE samplers"};
    app.require_subcommand(1);

    RunFlags run_flags;
    auto add_common = [&](CLI::App* cmd, bool with_eps) {
        cmd->add_option("--config", run_flags.config_path, "JSON run config");
        cmd->add_option("--output", run_flags.output_dir, "output directory");
        cmd->add_option("--field", run_flags.field,
                        "field alias, field file path, or kind:path");
        cmd->add_option("--steps", run_flags.steps, "number of grid steps K");
        if (with_eps) cmd->add_option("--epsilon", run_flags.epsilon, "acceptance threshold");
        cmd->add_option("--tolerance", run_flags.tolerance,
                        "deviation budget q_d (derives epsilon)");
        cmd->add_option("--seed", run_flags.seed, "initial-state seed");
        cmd->add_option("--x0", run_flags.x0, "explicit initial state, comma separated");
        cmd->add_flag("--estimate-regularity", run_flags.estimate_regularity,
                      "estimate the Lipschitz constant by sampling when not declared");
        cmd->add_option("--box-extent", run_flags.box_extent,
                        "half-width of the estimation box");
        cmd->add_option("--samples", run_flags.estimate_samples, "estimation sample count");
        cmd->add_flag_function(
            "-v,--verbose", [&](std::int64_t n) { run_flags.verbosity = static_cast<int>(n); },
            "verbose output");
    };

    CLI::App* run = app.add_subcommand("run", "run Euler + speculative samplers, write rows");
    add_common(run, true);

    CLI::App* bound = app.add_subcommand(
        "bound", "evaluate the trajectory error bound against a measured run");
    add_common(bound, true);

    std::string sweep_config, sweep_output;
    int jobs = 1;
    bool no_resume = false;
    int sweep_verbosity = 0;
    CLI::App* sweep = app.add_subcommand("sweep", "cross-product runs over epsilon x K x seeds");
    sweep->add_option("--config", sweep_config, "JSON sweep config")->required();
    sweep->add_option("--output", sweep_output, "output directory");
    sweep->add_option("--jobs", jobs, "max concurrent runs");
    sweep->add_flag("--no-resume", no_resume, "recompute even if rows exist");
    sweep->add_flag_function(
        "-v,--verbose", [&](std::int64_t n) { sweep_verbosity = static_cast<int>(n); },
        "verbose output");

    std::string cmp_a, cmp_b;
    CLI::App* compare = app.add_subcommand("compare", "diff two result CSVs column by column");
    compare->add_option("a", cmp_a, "first CSV")->required();
    compare->add_option("b", cmp_b, "second CSV")->required();

    GenFieldFlags gen_flags;
    CLI::App* gen = app.add_subcommand("gen-field",
                                       "sample an analytic field into a field file");
    gen->add_option("--config", gen_flags.config_path, "JSON gen-field config");
    gen->add_option("--field", gen_flags.field, "source field alias or path");
    gen->add_option("--kind", gen_flags.kind, "tabulated or mlp");
    gen->add_option("--output", gen_flags.output_dir, "output directory");
    gen->add_option("--name", gen_flags.name, "output file name");
    gen->add_option("--box-extent", gen_flags.box_extent, "half-width of the sampled box");
    gen->add_option("--nodes", gen_flags.space_nodes, "nodes per space axis");
    gen->add_option("--time-nodes", gen_flags.time_nodes, "nodes on the time axis");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "flowcast: error: " << e.what() << "\n";
        return 2;
    }

    try {
        if (run->parsed()) return cmd_run(run_flags);
        if (bound->parsed()) return cmd_bound(run_flags);
        if (sweep->parsed()) {
            return cmd_sweep(sweep_config, sweep_output, jobs, no_resume, sweep_verbosity);
        }
        if (compare->parsed()) return cmd_compare(cmp_a, cmp_b);
        if (gen->parsed()) return cmd_gen_field(gen_flags);
    } catch (const std::exception& e) {
        std::cerr << "flowcast: error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
