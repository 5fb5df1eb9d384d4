#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gpsens/bench.hpp"
#include "gpsens/csv.hpp"
#include "gpsens/detail/util.hpp"
#include "gpsens/errors.hpp"
#include "gpsens/gp.hpp"
#include "gpsens/gp_io.hpp"
#include "gpsens/runner.hpp"
#include "gpsens/space.hpp"
#include "gpsens/uncertainty.hpp"

namespace gpsens {

/// Which indices are estimated from the predictive mean alone instead of
/// full posterior realizations.
enum class MeanOnlyMode { None, Second, All };

inline std::string to_string(MeanOnlyMode m) {
    switch (m) {
        case MeanOnlyMode::None:
            return "none";
        case MeanOnlyMode::Second:
            return "second";
        default:
            return "all";
    }
}

/// A complete, validated run description. The configuration hash covers
/// every field that can change a computed number (model identity, sampling
/// sizes, seed, kernel, block size, parameter ranges); it deliberately
/// excludes where results go and how work is scheduled (output_dir, threads,
/// cache_dir, model_batch_size, model_timeout_s), so moving a run or
/// changing its parallelism never invalidates its artifacts.
struct RunConfig {
    ParameterSpace space;
    std::string model_selector;  // "builtin:<name>?..." or "exec:<command template>"
    std::string output_dir = "out";
    Eigen::Index n_train = 100;
    Eigen::Index n_valid = 500;  // Sobol points reserved after training, used
                                 // for held-out validation of builtin models
    Eigen::Index m_mc = 10000;
    int n_realizations = 500;
    int n_bootstrap = 300;
    std::uint64_t seed = 0;
    KernelKind kernel = KernelKind::SquaredExponential;
    bool second_order = false;
    MeanOnlyMode mean_only = MeanOnlyMode::None;
    Eigen::Index block = 1024;
    unsigned threads = 0;
    int restarts = 10;
    int grid = 32;              // projection bins
    Eigen::Index probes = 4096; // projection probe points

    std::vector<Eigen::Index> convergence_n;  // extra training sizes for the
                                              // index-vs-N convergence table

    std::string model_workdir;
    double model_timeout_s = 3600.0;
    std::string model_output_column;
    Eigen::Index model_batch_size = 1;
    std::vector<std::pair<std::string, std::string>> model_env;
    std::string cache_dir;  // empty = <output_dir>/cache

    bool is_builtin() const { return detail::starts_with(model_selector, "builtin:"); }

    BenchmarkFn builtin_model() const {
        return BenchmarkFn::parse(model_selector, space.dimension());
    }

    ModelSpec model_spec() const {
        if (is_builtin()) throw ConfigError("model_spec: model is a builtin");
        if (!detail::starts_with(model_selector, "exec:"))
            throw ConfigError("model must start with builtin: or exec:");
        ModelSpec spec;
        spec.command = model_selector.substr(5);
        spec.workdir = model_workdir;
        spec.timeout_s = model_timeout_s;
        spec.output_column = model_output_column;
        spec.batch_size = model_batch_size;
        spec.extra_env = model_env;
        spec.param_names = space.names();
        spec.validate();
        return spec;
    }

    void validate() const {
        if (space.dimension() < 1) throw ConfigError("config: no parameters");
        if (model_selector.empty()) throw ConfigError("config: missing model");
        if (!is_builtin() && !detail::starts_with(model_selector, "exec:"))
            throw ConfigError("config: model must start with builtin: or exec:");
        if (n_train < 4) throw ConfigError("config: n_train must be >= 4");
        if (n_valid < 0) throw ConfigError("config: n_valid must be >= 0");
        if (is_builtin() && n_valid < 2)
            throw ConfigError("config: builtin models need n_valid >= 2 for validation");
        if (m_mc < 16) throw ConfigError("config: m_mc must be >= 16");
        if (n_realizations < 2) throw ConfigError("config: n_realizations must be >= 2");
        if (n_bootstrap < 2) throw ConfigError("config: n_bootstrap must be >= 2");
        if (block < 1) throw ConfigError("config: block must be >= 1");
        if (restarts < 1) throw ConfigError("config: restarts must be >= 1");
        if (grid < 2) throw ConfigError("config: grid must be >= 2");
        if (probes < 16) throw ConfigError("config: probes must be >= 16");
        if (mean_only == MeanOnlyMode::Second && !second_order)
            throw ConfigError("config: mean_only=second requires second_order=true");
        for (std::size_t i = 0; i < convergence_n.size(); ++i) {
            if (convergence_n[i] < 4 || convergence_n[i] > n_train)
                throw ConfigError("config: convergence_n entries must lie in [4, n_train]");
            if (i > 0 && convergence_n[i] <= convergence_n[i - 1])
                throw ConfigError("config: convergence_n must be strictly increasing");
        }
        if (is_builtin())
            builtin_model();  // validates name, query and dimension
        else
            model_spec();
        if (output_dir.empty()) throw ConfigError("config: output_dir must not be empty");
    }

    /// Canonical text whose hash identifies the scientific content.
    std::string canonical() const {
        std::ostringstream out;
        out << "block=" << block << "\n";
        out << "convergence_n=";
        for (std::size_t i = 0; i < convergence_n.size(); ++i)
            out << (i ? "," : "") << convergence_n[i];
        out << "\n";
        out << "grid=" << grid << "\n";
        out << "kernel=" << to_string(kernel) << "\n";
        out << "m_mc=" << m_mc << "\n";
        out << "mean_only=" << to_string(mean_only) << "\n";
        out << "model=" << model_selector << "\n";
        if (!is_builtin()) {
            out << "model_env=";
            for (std::size_t i = 0; i < model_env.size(); ++i)
                out << (i ? ";" : "") << model_env[i].first << "=" << model_env[i].second;
            out << "\n";
            out << "model_output_column=" << model_output_column << "\n";
            out << "model_workdir=" << model_workdir << "\n";
        }
        out << "n_bootstrap=" << n_bootstrap << "\n";
        out << "n_realizations=" << n_realizations << "\n";
        out << "n_train=" << n_train << "\n";
        out << "n_valid=" << n_valid << "\n";
        for (const auto& p : space.parameters())
            out << "param=" << p.name << " " << detail::format_double(p.lower) << " "
                << detail::format_double(p.upper) << "\n";
        out << "probes=" << probes << "\n";
        out << "restarts=" << restarts << "\n";
        out << "second_order=" << (second_order ? "true" : "false") << "\n";
        out << "seed=" << seed << "\n";
        return out.str();
    }

    std::string hash() const { return detail::to_hex64(detail::fnv1a(canonical())); }

    std::string path(const std::string& artifact) const {
        return (std::filesystem::path(output_dir) / artifact).string();
    }

    std::string effective_cache_dir() const {
        return cache_dir.empty() ? path("cache") : cache_dir;
    }

    /// Sobol index the pick-freeze design starts at: training and validation
    /// points come first in the stream, so designs never overlap them.
    std::uint64_t design_skip() const {
        return static_cast<std::uint64_t>(n_train) + static_cast<std::uint64_t>(n_valid);
    }
};

/// Parses the key = value run-description format. '#' starts a comment;
/// `param = <name> <lower> <upper>` lines declare inputs in order and
/// `model_env = KEY=VALUE` lines accumulate; every other key takes its last
/// occurrence to be an error (duplicates usually mean a botched edit).
inline RunConfig parse_config_text(const std::string& text) {
    RunConfig cfg;
    std::vector<Parameter> params;
    std::set<std::string> seen;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;

    auto require_fresh = [&](const std::string& key) {
        if (!seen.insert(key).second)
            throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key '" +
                              key + "'");
    };
    auto parse_count = [&](const std::string& key, const std::string& value, auto lo) {
        std::int64_t v = 0;
        if (!detail::parse_i64(value, v) || v < static_cast<std::int64_t>(lo))
            throw ConfigError("config line " + std::to_string(lineno) + ": bad value for '" +
                              key + "'");
        return v;
    };
    auto parse_bool = [&](const std::string& key, const std::string& value) {
        std::string v = detail::to_lower(value);
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        throw ConfigError("config line " + std::to_string(lineno) + ": bad boolean for '" + key +
                          "'");
    };

    while (std::getline(in, line)) {
        ++lineno;
        auto hash_pos = line.find('#');
        if (hash_pos != std::string::npos) line.erase(hash_pos);
        std::string stripped = detail::trim(line);
        if (stripped.empty()) continue;
        auto eq = stripped.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        std::string key = detail::trim(stripped.substr(0, eq));
        std::string value = detail::trim(stripped.substr(eq + 1));

        if (key == "param") {
            std::istringstream ps(value);
            Parameter p;
            std::string lo_tok, hi_tok;
            if (!(ps >> p.name >> lo_tok >> hi_tok) || (ps >> std::ws, !ps.eof()) ||
                !detail::parse_double(lo_tok, p.lower) || !detail::parse_double(hi_tok, p.upper))
                throw ConfigError("config line " + std::to_string(lineno) +
                                  ": param needs '<name> <lower> <upper>'");
            params.push_back(p);
        } else if (key == "model_env") {
            auto env_eq = value.find('=');
            if (env_eq == std::string::npos || env_eq == 0)
                throw ConfigError("config line " + std::to_string(lineno) +
                                  ": model_env needs KEY=VALUE");
            cfg.model_env.emplace_back(detail::trim(value.substr(0, env_eq)),
                                       detail::trim(value.substr(env_eq + 1)));
        } else if (key == "model") {
            require_fresh(key);
            cfg.model_selector = value;
        } else if (key == "output_dir") {
            require_fresh(key);
            cfg.output_dir = value;
        } else if (key == "cache_dir") {
            require_fresh(key);
            cfg.cache_dir = value;
        } else if (key == "model_workdir") {
            require_fresh(key);
            cfg.model_workdir = value;
        } else if (key == "model_output_column") {
            require_fresh(key);
            cfg.model_output_column = value;
        } else if (key == "model_timeout_s") {
            require_fresh(key);
            if (!detail::parse_double(value, cfg.model_timeout_s) || !(cfg.model_timeout_s > 0))
                throw ConfigError("config line " + std::to_string(lineno) +
                                  ": bad model_timeout_s");
        } else if (key == "model_batch_size") {
            require_fresh(key);
            cfg.model_batch_size = parse_count(key, value, 1);
        } else if (key == "n_train") {
            require_fresh(key);
            cfg.n_train = parse_count(key, value, 1);
        } else if (key == "n_valid") {
            require_fresh(key);
            cfg.n_valid = parse_count(key, value, 0);
        } else if (key == "m_mc") {
            require_fresh(key);
            cfg.m_mc = parse_count(key, value, 1);
        } else if (key == "n_realizations") {
            require_fresh(key);
            cfg.n_realizations = static_cast<int>(parse_count(key, value, 1));
        } else if (key == "n_bootstrap") {
            require_fresh(key);
            cfg.n_bootstrap = static_cast<int>(parse_count(key, value, 1));
        } else if (key == "seed") {
            require_fresh(key);
            std::uint64_t s = 0;
            if (!detail::parse_u64(value, s))
                throw ConfigError("config line " + std::to_string(lineno) + ": bad seed");
            cfg.seed = s;
        } else if (key == "kernel") {
            require_fresh(key);
            cfg.kernel = kernel_kind_from_string(value);
        } else if (key == "second_order") {
            require_fresh(key);
            cfg.second_order = parse_bool(key, value);
        } else if (key == "mean_only") {
            require_fresh(key);
            std::string v = detail::to_lower(value);
            if (v == "none")
                cfg.mean_only = MeanOnlyMode::None;
            else if (v == "second")
                cfg.mean_only = MeanOnlyMode::Second;
            else if (v == "all")
                cfg.mean_only = MeanOnlyMode::All;
            else
                throw ConfigError("config line " + std::to_string(lineno) +
                                  ": mean_only must be none, second or all");
        } else if (key == "block") {
            require_fresh(key);
            cfg.block = parse_count(key, value, 1);
        } else if (key == "threads") {
            require_fresh(key);
            cfg.threads = static_cast<unsigned>(parse_count(key, value, 0));
        } else if (key == "restarts") {
            require_fresh(key);
            cfg.restarts = static_cast<int>(parse_count(key, value, 1));
        } else if (key == "grid") {
            require_fresh(key);
            cfg.grid = static_cast<int>(parse_count(key, value, 2));
        } else if (key == "convergence_n") {
            require_fresh(key);
            std::istringstream ns(value);
            std::string tok;
            while (ns >> tok) cfg.convergence_n.push_back(parse_count(key, tok, 1));
        } else if (key == "probes") {
            require_fresh(key);
            cfg.probes = parse_count(key, value, 1);
        } else {
            throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key +
                              "'");
        }
    }
    if (params.empty()) throw ConfigError("config: no param lines");
    cfg.space = ParameterSpace(params);
    cfg.validate();
    return cfg;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

namespace detail {

inline std::string safe_filename(const std::string& name) {
    std::string out = name;
    for (char& c : out)
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '.') c = '_';
    return out;
}

/// First comment line of the form `# config_hash=<hex>`.
inline std::string csv_config_hash(const CsvTable& table) {
    for (const auto& c : table.comments) {
        auto pos = c.find("config_hash=");
        if (pos != std::string::npos) return trim(c.substr(pos + 12));
    }
    return {};
}

inline void require_hash(const std::string& artifact, const std::string& found,
                         const std::string& expected) {
    if (found != expected)
        throw ConfigError(artifact + " was produced by a different configuration (its hash " +
                          (found.empty() ? std::string("is missing") : "is " + found) +
                          ", expected " + expected + "); re-run the earlier stages");
}

}  // namespace detail

/// Builds the pick-freeze design for the configuration and writes
/// design.csv. Returns the design; analyze rebuilds the same thing in
/// memory, the file is for inspection and external tooling.
inline PickFreezeDesign stage_design(const RunConfig& cfg) {
    cfg.validate();
    std::filesystem::create_directories(cfg.output_dir);
    PickFreezeDesign design =
        build_design(cfg.space, cfg.m_mc, cfg.second_order, cfg.design_skip());
    write_design_csv(cfg.path("design.csv"), design, cfg.space, cfg.hash());
    return design;
}

/// Evaluates the model on the training points (Sobol indices [0, n_train))
/// and writes training.csv. Builtin models also get a held-out validation
/// table from the next n_valid points. External models run through the
/// evaluation cache; any failed row aborts the stage, since a truncated
/// training set would silently change every later stage.
inline TrainingData stage_evaluate(const RunConfig& cfg) {
    cfg.validate();
    std::filesystem::create_directories(cfg.output_dir);

    Eigen::MatrixXd unit_train = sobol_points(cfg.space.dimension(), cfg.n_train, 0);
    Eigen::MatrixXd x_train = cfg.space.to_physical(unit_train);

    TrainingData data;
    data.x = x_train;
    if (cfg.is_builtin()) {
        BenchmarkFn fn = cfg.builtin_model();
        ParameterSpace native = fn.space();
        data.y = fn.evaluate_rows(native.to_physical(unit_train));

        Eigen::MatrixXd unit_valid =
            sobol_points(cfg.space.dimension(), cfg.n_valid, static_cast<std::uint64_t>(cfg.n_train));
        Eigen::VectorXd y_valid = fn.evaluate_rows(native.to_physical(unit_valid));
        write_training_csv(cfg.path("validation.csv"), cfg.space,
                           cfg.space.to_physical(unit_valid), y_valid, cfg.hash());
    } else {
        EvalCache cache(cfg.effective_cache_dir());
        BatchResult batch = evaluate_batch(cfg.model_spec(), x_train, &cache, cfg.threads);
        if (!batch.failures.empty()) {
            std::string msg = "model evaluation failed for " +
                              std::to_string(batch.failures.size()) + " of " +
                              std::to_string(cfg.n_train) + " training rows; first: row " +
                              std::to_string(batch.failures.front().row) + ": " +
                              batch.failures.front().detail;
            throw ModelExecutionError(msg);
        }
        data.y = batch.values;
    }
    write_training_csv(cfg.path("training.csv"), cfg.space, data.x, data.y, cfg.hash());
    return data;
}

/// Fits the GP on training.csv and writes gp.json.
inline TrainedGP stage_fit(const RunConfig& cfg) {
    cfg.validate();
    CsvTable table = read_csv(cfg.path("training.csv"));
    detail::require_hash("training.csv", detail::csv_config_hash(table), cfg.hash());
    TrainingData data = read_training_csv(cfg.path("training.csv"), cfg.space);

    FitOptions fopts;
    fopts.restarts = cfg.restarts;
    fopts.seed = derive_seed(cfg.seed, 0xf17);
    TrainedGP gp = fit_gp(
        TrainingSet::standardized(cfg.space.to_unit(data.x), data.y), cfg.kernel, fopts);
    save_gp(gp, cfg.path("gp.json"), cfg.hash());
    return gp;
}

/// Scores the surrogate and writes validation.json. Builtin models are
/// scored on the held-out table; external models fall back to closed-form
/// leave-one-out residuals on the training data, which costs nothing beyond
/// the factorization already in hand.
inline double stage_validate(const RunConfig& cfg) {
    cfg.validate();
    std::string gp_hash;
    TrainedGP gp = load_gp(cfg.path("gp.json"), &gp_hash);
    detail::require_hash("gp.json", gp_hash, cfg.hash());

    double q2 = 0.0;
    std::string method;
    Eigen::Index n_points = 0;
    if (cfg.is_builtin()) {
        CsvTable table = read_csv(cfg.path("validation.csv"));
        detail::require_hash("validation.csv", detail::csv_config_hash(table), cfg.hash());
        TrainingData valid = read_training_csv(cfg.path("validation.csv"), cfg.space);
        Eigen::VectorXd pred = gp.predict_mean(cfg.space.to_unit(valid.x));
        q2 = predictivity(pred, valid.y);
        method = "holdout";
        n_points = valid.y.size();
    } else {
        const Eigen::VectorXd& y = gp.training().y;
        Eigen::VectorXd pred = y - gp.loo_residuals();
        q2 = predictivity(pred, y);
        method = "loo";
        n_points = y.size();
    }

    nlohmann::json j;
    j["format_version"] = 1;
    j["config_hash"] = cfg.hash();
    j["q2"] = q2;
    j["method"] = method;
    j["n_points"] = n_points;
    std::ofstream out(cfg.path("validation.json"));
    if (!out) throw SchemaError("cannot write validation.json");
    out << j.dump(2) << "\n";
    return q2;
}

namespace detail {

inline nlohmann::json estimate_to_json(const SobolEstimate& e) {
    nlohmann::json j;
    j["mean"] = e.mean;
    j["var_metamodel"] = e.var_metamodel;
    j["var_sampling"] = e.var_sampling;
    j["var_total"] = e.var_total;
    j["var_pooled"] = e.var_pooled;
    j["ci95_metamodel"] = e.ci95_metamodel;
    j["ci95_total"] = e.ci95_total;
    j["percentile_lo"] = e.percentile_lo;
    j["percentile_hi"] = e.percentile_hi;
    j["missing_cells"] = e.missing_cells;
    j["mean_only"] = e.mean_only;
    j["outside_unit_range"] = e.outside_unit_range;
    return j;
}

inline SobolEstimate estimate_from_json(const nlohmann::json& j, IndexTarget target) {
    SobolEstimate e;
    e.target = target;
    e.mean = j.at("mean").get<double>();
    e.var_metamodel = j.at("var_metamodel").get<double>();
    e.var_sampling = j.at("var_sampling").get<double>();
    e.var_total = j.at("var_total").get<double>();
    e.var_pooled = j.at("var_pooled").get<double>();
    e.ci95_metamodel = j.at("ci95_metamodel").get<double>();
    e.ci95_total = j.at("ci95_total").get<double>();
    e.percentile_lo = j.at("percentile_lo").get<double>();
    e.percentile_hi = j.at("percentile_hi").get<double>();
    e.missing_cells = j.at("missing_cells").get<Eigen::Index>();
    e.mean_only = j.at("mean_only").get<bool>();
    e.outside_unit_range = j.at("outside_unit_range").get<bool>();
    return e;
}

}  // namespace detail

/// Everything stage_analyze computed, for callers that want the numbers
/// without re-reading the JSON.
struct AnalysisResult {
    std::vector<SobolEstimate> estimates;  // canonical order: S_i, ST_i, S_ij
    AnalysisDiagnostics diagnostics;
};

namespace detail {

/// Runs the configured index estimation for one trained GP over one design:
/// splits targets between the realization path and the mean-only path,
/// computes the index matrices, and returns the decomposed estimates in
/// canonical order (all S_i, all ST_i, then S_ij pairs).
inline std::vector<SobolEstimate> analyze_with_gp(const RunConfig& cfg, const TrainedGP& gp,
                                                  const PickFreezeDesign& design,
                                                  AnalysisDiagnostics* diag) {
    std::vector<IndexTarget> full_targets, mean_targets;
    for (const auto& t : default_targets(cfg.space.dimension(), cfg.second_order)) {
        bool use_mean = cfg.mean_only == MeanOnlyMode::All ||
                        (cfg.mean_only == MeanOnlyMode::Second && t.order == IndexOrder::Second);
        (use_mean ? mean_targets : full_targets).push_back(t);
    }

    std::vector<IndexMatrix> matrices;
    if (!full_targets.empty()) {
        PickFreezeDesign reduced = design;
        bool full_needs_ba = false;
        for (const auto& t : full_targets)
            if (t.order == IndexOrder::Second) full_needs_ba = true;
        if (!full_needs_ba) reduced.ba.reset();

        AnalyzeOptions opts;
        opts.n_realizations = cfg.n_realizations;
        opts.n_bootstrap = cfg.n_bootstrap;
        opts.seed = cfg.seed;
        opts.block = cfg.block;
        opts.threads = cfg.threads;
        opts.targets = full_targets;
        auto full = compute_index_matrices(gp, reduced, cfg.space, opts, diag);
        matrices.insert(matrices.end(), std::make_move_iterator(full.begin()),
                        std::make_move_iterator(full.end()));
    }
    if (!mean_targets.empty()) {
        auto mean = mean_only_index_matrices(gp, design, cfg.space, mean_targets,
                                             cfg.n_bootstrap, cfg.seed, cfg.threads);
        matrices.insert(matrices.end(), std::make_move_iterator(mean.begin()),
                        std::make_move_iterator(mean.end()));
        if (diag && diag->evaluation_rows == 0) diag->evaluation_rows = design.total_rows();
    }

    std::vector<SobolEstimate> estimates;
    for (const auto& want : default_targets(cfg.space.dimension(), cfg.second_order))
        for (const auto& m : matrices)
            if (m.target == want) {
                estimates.push_back(decompose(m));
                break;
            }
    return estimates;
}

}  // namespace detail

/// Estimates the configured indices with the trained metamodel and writes
/// sobol_report.json, report_flat.csv and one projection CSV per input.
/// The model itself is never called: every estimate comes from GP
/// realizations (or the predictive mean, for mean-only targets) over the
/// pick-freeze design.
inline AnalysisResult stage_analyze(const RunConfig& cfg) {
    cfg.validate();
    std::filesystem::create_directories(cfg.output_dir);
    std::string gp_hash;
    TrainedGP gp = load_gp(cfg.path("gp.json"), &gp_hash);
    detail::require_hash("gp.json", gp_hash, cfg.hash());

    PickFreezeDesign design =
        build_design(cfg.space, cfg.m_mc, cfg.second_order, cfg.design_skip());

    AnalysisResult result;
    result.estimates = detail::analyze_with_gp(cfg, gp, design, &result.diagnostics);

    // Pull the predictivity score in when the validate stage already ran.
    nlohmann::json q2 = nullptr;
    std::string q2_method;
    {
        std::ifstream in(cfg.path("validation.json"));
        if (in) {
            nlohmann::json vj;
            try {
                in >> vj;
                if (vj.value("config_hash", std::string()) == cfg.hash()) {
                    q2 = vj.at("q2");
                    q2_method = vj.value("method", std::string());
                }
            } catch (const nlohmann::json::exception&) {
            }
        }
    }

    auto names = cfg.space.names();
    nlohmann::json report;
    report["format_version"] = 1;
    report["config_hash"] = cfg.hash();
    nlohmann::json meta;
    meta["model"] = cfg.model_selector;
    meta["kernel"] = to_string(cfg.kernel);
    meta["n_train"] = cfg.n_train;
    meta["n_valid"] = cfg.n_valid;
    meta["m_mc"] = cfg.m_mc;
    meta["n_realizations"] = cfg.n_realizations;
    meta["n_bootstrap"] = cfg.n_bootstrap;
    meta["seed"] = cfg.seed;
    meta["second_order"] = cfg.second_order;
    meta["mean_only"] = to_string(cfg.mean_only);
    meta["block"] = cfg.block;
    meta["design_skip"] = cfg.design_skip();
    meta["evaluation_rows"] = result.diagnostics.evaluation_rows;
    meta["jitter_used"] = result.diagnostics.jitter_used;
    meta["q2"] = q2;
    meta["q2_method"] = q2_method;
    report["metadata"] = std::move(meta);

    nlohmann::json parameters = nlohmann::json::array();
    for (int i = 0; i < cfg.space.dimension(); ++i) {
        nlohmann::json p;
        p["name"] = names[static_cast<std::size_t>(i)];
        for (const auto& e : result.estimates) {
            if (e.target.order == IndexOrder::First && e.target.i == i)
                p["first"] = detail::estimate_to_json(e);
            if (e.target.order == IndexOrder::Total && e.target.i == i)
                p["total"] = detail::estimate_to_json(e);
        }
        parameters.push_back(std::move(p));
    }
    report["parameters"] = std::move(parameters);

    nlohmann::json pairs = nlohmann::json::array();
    for (const auto& e : result.estimates) {
        if (e.target.order != IndexOrder::Second) continue;
        nlohmann::json p = detail::estimate_to_json(e);
        p["i"] = names[static_cast<std::size_t>(e.target.i)];
        p["j"] = names[static_cast<std::size_t>(e.target.j)];
        pairs.push_back(std::move(p));
    }
    report["second_order"] = std::move(pairs);

    {
        std::ofstream out(cfg.path("sobol_report.json"));
        if (!out) throw SchemaError("cannot write sobol_report.json");
        out << report.dump(2) << "\n";
    }

    {
        CsvWriter flat(cfg.path("report_flat.csv"));
        flat.comment("config_hash=" + cfg.hash());
        flat.header({"order", "i", "j", "mean", "var_metamodel", "var_sampling", "var_total",
                     "var_pooled", "ci95_metamodel", "ci95_total", "percentile_lo",
                     "percentile_hi", "missing_cells", "mean_only", "outside_unit_range"});
        for (const auto& e : result.estimates) {
            std::string order = e.target.order == IndexOrder::First
                                    ? "first"
                                    : (e.target.order == IndexOrder::Total ? "total" : "second");
            flat.row({order, names[static_cast<std::size_t>(e.target.i)],
                      e.target.j >= 0 ? names[static_cast<std::size_t>(e.target.j)] : "",
                      detail::format_double(e.mean), detail::format_double(e.var_metamodel),
                      detail::format_double(e.var_sampling), detail::format_double(e.var_total),
                      detail::format_double(e.var_pooled),
                      detail::format_double(e.ci95_metamodel),
                      detail::format_double(e.ci95_total),
                      detail::format_double(e.percentile_lo),
                      detail::format_double(e.percentile_hi), std::to_string(e.missing_cells),
                      e.mean_only ? "true" : "false",
                      e.outside_unit_range ? "true" : "false"});
        }
    }

    for (int i = 0; i < cfg.space.dimension(); ++i) {
        auto bins = gp.project_mean(i, cfg.grid, cfg.probes, 0);
        const auto& p = cfg.space.parameter(i);
        CsvWriter w(cfg.path("projection_" + detail::safe_filename(p.name) + ".csv"));
        w.comment("config_hash=" + cfg.hash());
        w.header({"center_unit", p.name, "mean", "lo95", "hi95", "count", "empty"});
        for (const auto& bin : bins)
            w.row({detail::format_double(bin.center),
                   detail::format_double(p.lower + bin.center * (p.upper - p.lower)),
                   detail::format_double(bin.mean), detail::format_double(bin.lo95),
                   detail::format_double(bin.hi95), std::to_string(bin.count),
                   bin.empty ? "true" : "false"});
    }

    // Index-vs-N convergence table: refit on nested prefixes of the training
    // set (Sobol point sets nest, so no new model evaluations) and re-run the
    // same analysis against the same design and seeds.
    if (!cfg.convergence_n.empty()) {
        CsvTable ttable = read_csv(cfg.path("training.csv"));
        detail::require_hash("training.csv", detail::csv_config_hash(ttable), cfg.hash());
        TrainingData data = read_training_csv(cfg.path("training.csv"), cfg.space);
        Eigen::MatrixXd unit_x = cfg.space.to_unit(data.x);

        FitOptions fopts;
        fopts.restarts = cfg.restarts;
        fopts.seed = derive_seed(cfg.seed, 0xf17);

        CsvWriter w(cfg.path("convergence.csv"));
        w.comment("config_hash=" + cfg.hash());
        w.header({"n_train", "order", "i", "j", "mean", "var_metamodel", "var_sampling",
                  "var_total", "percentile_lo", "percentile_hi", "mean_only"});
        auto emit = [&](Eigen::Index n, const std::vector<SobolEstimate>& estimates) {
            for (const auto& e : estimates) {
                std::string order = e.target.order == IndexOrder::First
                                        ? "first"
                                        : (e.target.order == IndexOrder::Total ? "total"
                                                                               : "second");
                w.row({std::to_string(n), order, names[static_cast<std::size_t>(e.target.i)],
                       e.target.j >= 0 ? names[static_cast<std::size_t>(e.target.j)] : "",
                       detail::format_double(e.mean), detail::format_double(e.var_metamodel),
                       detail::format_double(e.var_sampling),
                       detail::format_double(e.var_total),
                       detail::format_double(e.percentile_lo),
                       detail::format_double(e.percentile_hi),
                       e.mean_only ? "true" : "false"});
            }
        };
        for (Eigen::Index n : cfg.convergence_n) {
            if (n == cfg.n_train) continue;  // the main fit supplies that row set
            TrainedGP prefix_gp = fit_gp(
                TrainingSet::standardized(unit_x.topRows(n), data.y.head(n)), cfg.kernel, fopts);
            emit(n, detail::analyze_with_gp(cfg, prefix_gp, design, nullptr));
        }
        emit(cfg.n_train, result.estimates);
    }
    return result;
}

/// Loads sobol_report.json and renders a human-readable summary.
inline std::string stage_report(const RunConfig& cfg) {
    cfg.validate();
    std::ifstream in(cfg.path("sobol_report.json"));
    if (!in) throw SchemaError("cannot open sobol_report.json; run analyze first");
    nlohmann::json report;
    try {
        in >> report;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("sobol_report.json is not valid JSON: ") + e.what());
    }
    detail::require_hash("sobol_report.json", report.value("config_hash", std::string()),
                         cfg.hash());

    const auto& meta = report.at("metadata");
    std::ostringstream out;
    out << "model:  " << meta.at("model").get<std::string>() << "\n";
    out << "config: " << report.at("config_hash").get<std::string>() << "\n";
    out << "gp:     " << meta.at("kernel").get<std::string>() << ", n_train="
        << meta.at("n_train").get<std::int64_t>();
    if (!meta.at("q2").is_null())
        out << ", q2(" << meta.at("q2_method").get<std::string>()
            << ")=" << detail::format_double(meta.at("q2").get<double>());
    out << "\n";
    out << "design: m=" << meta.at("m_mc").get<std::int64_t>() << ", rows="
        << meta.at("evaluation_rows").get<std::int64_t>()
        << ", realizations=" << meta.at("n_realizations").get<std::int64_t>()
        << ", bootstrap=" << meta.at("n_bootstrap").get<std::int64_t>()
        << ", seed=" << meta.at("seed").get<std::uint64_t>() << "\n\n";

    auto line = [&](const std::string& label, const nlohmann::json& e) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%-14s %9.4f  +-%7.4f   %10.3e  %10.3e%s%s\n",
                      label.c_str(), e.at("mean").get<double>(),
                      e.at("ci95_total").get<double>(), e.at("var_metamodel").get<double>(),
                      e.at("var_sampling").get<double>(),
                      e.at("mean_only").get<bool>() ? "  [mean-only]" : "",
                      e.at("outside_unit_range").get<bool>() ? "  [outside 0..1]" : "");
        out << buf;
    };
    out << "index             mean   ci95(total)  var[metamodel]  var[sampling]\n";
    for (const auto& p : report.at("parameters"))
        if (p.contains("first")) line("S(" + p.at("name").get<std::string>() + ")", p.at("first"));
    for (const auto& p : report.at("parameters"))
        if (p.contains("total")) line("ST(" + p.at("name").get<std::string>() + ")", p.at("total"));
    for (const auto& e : report.at("second_order"))
        line("S(" + e.at("i").get<std::string>() + "," + e.at("j").get<std::string>() + ")", e);
    return out.str();
}

/// Runs every stage in order and returns the analysis result.
inline AnalysisResult run_pipeline(const RunConfig& cfg) {
    stage_design(cfg);
    stage_evaluate(cfg);
    stage_fit(cfg);
    stage_validate(cfg);
    return stage_analyze(cfg);
}

}  // namespace gpsens
