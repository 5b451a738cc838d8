#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "canalseg/nets.hpp"
#include "canalseg/pipeline.hpp"

namespace canalseg {

struct ConfigParseError : std::runtime_error {
    explicit ConfigParseError(const std::string& what) : std::runtime_error(what) {}
};
struct UnknownKey : std::runtime_error {
    explicit UnknownKey(const std::string& what) : std::runtime_error(what) {}
};
struct InvariantViolation : std::runtime_error {
    explicit InvariantViolation(const std::string& what) : std::runtime_error(what) {}
};

struct TrainingConfig {
    double lr = 1e-3;  // desk-scale default; the full-scale value is 1e-5
    int batch_size = 2;
    int epochs_coarse = 20;
    int epochs_fine = 30;
    std::uint64_t seed = 1;
};

struct RunConfig {
    PipelineConfig pipeline;
    NetConfig coarse_net;  // input_dims mirror pipeline.coarse_input_dims
    NetConfig fine_net;    // input_dims mirror pipeline.fine_dims[0]
    FineOptions fine_options;
    TrainingConfig training;

    bool operator==(const RunConfig& o) const {
        return dump().dump() == o.dump().dump();
    }

    void validate() const {
        pipeline.validate();
        if (!(training.lr > 0.0)) throw InvariantViolation("training.lr must be > 0");
        if (training.batch_size < 1) throw InvariantViolation("training.batch_size must be >= 1");
        if (training.epochs_coarse < 1 || training.epochs_fine < 1)
            throw InvariantViolation("training epochs must be >= 1");
        try {
            coarse_net.validate(/*supervised=*/true);
            fine_net.validate(/*supervised=*/false);
        } catch (const std::invalid_argument& e) {
            throw InvariantViolation(e.what());
        }
    }

    nlohmann::json dump() const {
        nlohmann::json j;
        j["pipeline"] = {
            {"coarse_input_dims",
             {pipeline.coarse_input_dims.nx, pipeline.coarse_input_dims.ny,
              pipeline.coarse_input_dims.nz}},
            {"voi_margin", pipeline.voi_margin},
            {"fine_dims",
             {{pipeline.fine_dims[0].nx, pipeline.fine_dims[0].ny, pipeline.fine_dims[0].nz},
              {pipeline.fine_dims[1].nx, pipeline.fine_dims[1].ny, pipeline.fine_dims[1].nz},
              {pipeline.fine_dims[2].nx, pipeline.fine_dims[2].ny, pipeline.fine_dims[2].nz}}},
            {"threshold", pipeline.threshold}};
        j["coarse_net"] = {{"levels", coarse_net.levels},
                           {"base_channels", coarse_net.base_channels},
                           {"supervision_weights", coarse_net.supervision_weights},
                           {"se_reduction", coarse_net.se_reduction}};
        j["fine_net"] = {{"levels", fine_net.levels},
                         {"base_channels", fine_net.base_channels},
                         {"se_reduction", fine_net.se_reduction},
                         {"multiscale", fine_options.multiscale},
                         {"residual", fine_options.residual}};
        j["training"] = {{"lr", training.lr},
                         {"batch_size", training.batch_size},
                         {"epochs_coarse", training.epochs_coarse},
                         {"epochs_fine", training.epochs_fine},
                         {"seed", training.seed}};
        return j;
    }
};

namespace detail {

inline void reject_unknown(const nlohmann::json& obj, const std::vector<std::string>& known,
                           const std::string& where) {
    for (const auto& [key, _] : obj.items()) {
        if (std::find(known.begin(), known.end(), key) == known.end())
            throw UnknownKey("unknown key '" + key + "' in " + where);
    }
}

inline Dims3 dims_from_json(const nlohmann::json& j, const std::string& where) {
    if (!j.is_array() || j.size() != 3)
        throw ConfigParseError(where + " must be a 3-element array");
    return {j[0].get<int>(), j[1].get<int>(), j[2].get<int>()};
}

}  // namespace detail

inline RunConfig parse_config_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigParseError("config root must be a JSON object");
    detail::reject_unknown(j, {"pipeline", "coarse_net", "fine_net", "training"}, "config root");

    RunConfig cfg;
    if (j.contains("pipeline")) {
        const auto& p = j["pipeline"];
        detail::reject_unknown(p, {"coarse_input_dims", "voi_margin", "fine_dims", "threshold"},
                               "pipeline");
        if (p.contains("coarse_input_dims"))
            cfg.pipeline.coarse_input_dims =
                detail::dims_from_json(p["coarse_input_dims"], "pipeline.coarse_input_dims");
        if (p.contains("voi_margin")) cfg.pipeline.voi_margin = p["voi_margin"].get<int>();
        if (p.contains("fine_dims")) {
            const auto& fd = p["fine_dims"];
            if (!fd.is_array() || fd.size() != 3)
                throw ConfigParseError("pipeline.fine_dims must list three dim triplets");
            for (int i = 0; i < 3; ++i)
                cfg.pipeline.fine_dims[i] = detail::dims_from_json(fd[i], "pipeline.fine_dims");
        }
        if (p.contains("threshold")) cfg.pipeline.threshold = p["threshold"].get<double>();
    }
    if (j.contains("coarse_net")) {
        const auto& n = j["coarse_net"];
        detail::reject_unknown(
            n, {"levels", "base_channels", "supervision_weights", "se_reduction"}, "coarse_net");
        if (n.contains("levels")) cfg.coarse_net.levels = n["levels"].get<int>();
        if (n.contains("base_channels"))
            cfg.coarse_net.base_channels = n["base_channels"].get<int>();
        if (n.contains("supervision_weights"))
            cfg.coarse_net.supervision_weights =
                n["supervision_weights"].get<std::vector<double>>();
        if (n.contains("se_reduction")) cfg.coarse_net.se_reduction = n["se_reduction"].get<int>();
    }
    if (j.contains("fine_net")) {
        const auto& n = j["fine_net"];
        detail::reject_unknown(
            n, {"levels", "base_channels", "se_reduction", "multiscale", "residual"}, "fine_net");
        if (n.contains("levels")) cfg.fine_net.levels = n["levels"].get<int>();
        if (n.contains("base_channels")) cfg.fine_net.base_channels = n["base_channels"].get<int>();
        if (n.contains("se_reduction")) cfg.fine_net.se_reduction = n["se_reduction"].get<int>();
        if (n.contains("multiscale")) cfg.fine_options.multiscale = n["multiscale"].get<bool>();
        if (n.contains("residual")) cfg.fine_options.residual = n["residual"].get<bool>();
    }
    if (j.contains("training")) {
        const auto& t = j["training"];
        detail::reject_unknown(t, {"lr", "batch_size", "epochs_coarse", "epochs_fine", "seed"},
                               "training");
        if (t.contains("lr")) cfg.training.lr = t["lr"].get<double>();
        if (t.contains("batch_size")) cfg.training.batch_size = t["batch_size"].get<int>();
        if (t.contains("epochs_coarse")) cfg.training.epochs_coarse = t["epochs_coarse"].get<int>();
        if (t.contains("epochs_fine")) cfg.training.epochs_fine = t["epochs_fine"].get<int>();
        if (t.contains("seed")) cfg.training.seed = t["seed"].get<std::uint64_t>();
    }

    // The nets see the pipeline's working resolutions.
    const Dims3 cd = cfg.pipeline.coarse_input_dims;
    cfg.coarse_net.input_dims = {cd.nz, cd.ny, cd.nx};
    const Dims3 fd = cfg.pipeline.fine_dims[0];
    cfg.fine_net.input_dims = {fd.nz, fd.ny, fd.nx};
    cfg.fine_net.supervision_weights.clear();

    try {
        cfg.validate();
    } catch (const std::invalid_argument& e) {
        throw InvariantViolation(e.what());
    }
    return cfg;
}

// Defaults with the net input dims wired to the pipeline resolutions.
inline RunConfig default_run_config() { return parse_config_json(nlohmann::json::object()); }

inline RunConfig parse_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigParseError("cannot open config: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigParseError(std::string("config is not valid JSON: ") + e.what());
    }
    return parse_config_json(j);
}

inline void write_config(const RunConfig& cfg, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoFailure("cannot write config: " + path);
    out << cfg.dump().dump(2) << '\n';
}

}  // namespace canalseg
