#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "gpsens/gp.hpp"
#include "json.hpp"

namespace gpsens {

/// Serializes a trained GP. Stores the raw training data and the fitted
/// hyperparameters; the factorization is rebuilt on load from the same
/// numbers, so a save/load cycle reproduces predictions.
inline nlohmann::json gp_to_json(const TrainedGP& gp, const std::string& config_hash = {}) {
    nlohmann::json j;
    j["format_version"] = 1;
    j["kernel"] = to_string(gp.kind());
    j["signal_variance"] = std::vector<double>(
        gp.theta().signal_variance.data(),
        gp.theta().signal_variance.data() + gp.theta().signal_variance.size());
    j["length_scale"] = std::vector<double>(
        gp.theta().length_scale.data(),
        gp.theta().length_scale.data() + gp.theta().length_scale.size());
    j["nugget"] = gp.theta().nugget;

    const TrainingSet& t = gp.training();
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < t.size(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index d = 0; d < t.x.cols(); ++d) row.push_back(t.x(i, d));
        rows.push_back(std::move(row));
    }
    j["inputs"] = std::move(rows);
    j["outputs"] = std::vector<double>(t.y.data(), t.y.data() + t.y.size());
    j["log_marginal"] = gp.log_marginal();
    j["jitter"] = gp.jitter();
    if (!config_hash.empty()) j["config_hash"] = config_hash;
    return j;
}

inline TrainedGP gp_from_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("format_version"))
        throw SchemaError("gp_from_json: missing format_version");
    if (!j["format_version"].is_number_integer() || j["format_version"].get<int>() != 1)
        throw SchemaError("gp_from_json: unsupported format_version");
    for (const char* key : {"kernel", "signal_variance", "length_scale", "nugget", "inputs",
                            "outputs"})
        if (!j.contains(key)) throw SchemaError(std::string("gp_from_json: missing '") + key + "'");

    KernelKind kind = kernel_kind_from_string(j["kernel"].get<std::string>());
    Hyperparameters theta;
    {
        auto sv = j["signal_variance"].get<std::vector<double>>();
        auto ls = j["length_scale"].get<std::vector<double>>();
        theta.signal_variance = Eigen::Map<Eigen::VectorXd>(sv.data(),
                                                            static_cast<Eigen::Index>(sv.size()));
        theta.length_scale = Eigen::Map<Eigen::VectorXd>(ls.data(),
                                                         static_cast<Eigen::Index>(ls.size()));
        theta.nugget = j["nugget"].get<double>();
    }

    const auto& inputs = j["inputs"];
    if (!inputs.is_array() || inputs.empty() || !inputs[0].is_array())
        throw SchemaError("gp_from_json: inputs must be a non-empty array of rows");
    Eigen::Index n = static_cast<Eigen::Index>(inputs.size());
    Eigen::Index d = static_cast<Eigen::Index>(inputs[0].size());
    Eigen::MatrixXd x(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& row = inputs[static_cast<std::size_t>(i)];
        if (static_cast<Eigen::Index>(row.size()) != d)
            throw SchemaError("gp_from_json: ragged input rows");
        for (Eigen::Index c = 0; c < d; ++c) x(i, c) = row[static_cast<std::size_t>(c)].get<double>();
    }
    auto yv = j["outputs"].get<std::vector<double>>();
    if (static_cast<Eigen::Index>(yv.size()) != n)
        throw SchemaError("gp_from_json: outputs length mismatch");
    Eigen::VectorXd y = Eigen::Map<Eigen::VectorXd>(yv.data(), n);

    return make_gp(TrainingSet::standardized(std::move(x), std::move(y)), kind, std::move(theta));
}

inline void save_gp(const TrainedGP& gp, const std::string& path,
                    const std::string& config_hash = {}) {
    std::ofstream out(path);
    if (!out) throw SchemaError("save_gp: cannot open '" + path + "'");
    out << gp_to_json(gp, config_hash).dump(2) << "\n";
}

inline TrainedGP load_gp(const std::string& path, std::string* config_hash = nullptr) {
    std::ifstream in(path);
    if (!in) throw SchemaError("load_gp: cannot open '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError("load_gp: invalid JSON in '" + path + "': " + e.what());
    }
    if (config_hash)
        *config_hash = j.contains("config_hash") ? j["config_hash"].get<std::string>() : "";
    return gp_from_json(j);
}

}  // namespace gpsens
