#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "canalseg/nets.hpp"

namespace canalseg {

struct CheckpointError : std::runtime_error {
    explicit CheckpointError(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {

inline nlohmann::json net_config_to_json(const NetConfig& c) {
    nlohmann::json j;
    j["levels"] = c.levels;
    j["base_channels"] = c.base_channels;
    j["input_dims"] = {c.input_dims[0], c.input_dims[1], c.input_dims[2]};
    j["supervision_weights"] = c.supervision_weights;
    j["se_reduction"] = c.se_reduction;
    return j;
}

inline NetConfig net_config_from_json(const nlohmann::json& j) {
    NetConfig c;
    c.levels = j.at("levels").get<int>();
    c.base_channels = j.at("base_channels").get<int>();
    const auto& d = j.at("input_dims");
    c.input_dims = {d[0].get<int>(), d[1].get<int>(), d[2].get<int>()};
    c.supervision_weights = j.at("supervision_weights").get<std::vector<double>>();
    c.se_reduction = j.at("se_reduction").get<int>();
    return c;
}

inline nlohmann::json layers_to_json(const std::vector<LayerSpec>& layers) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& l : layers) {
        nlohmann::json jl;
        jl["kind"] = l.kind;
        jl["in"] = l.in_channels;
        jl["out"] = l.out_channels;
        jl["k"] = l.kernel;
        arr.push_back(std::move(jl));
    }
    return arr;
}

template <class Net>
void write_checkpoint(Net& net, const nlohmann::json& extra, const std::string& kind,
                      const std::string& path) {
    nlohmann::json manifest;
    manifest["kind"] = kind;
    manifest["net_config"] = net_config_to_json(net.config());
    for (const auto& [k, v] : extra.items()) manifest[k] = v;
    manifest["layers"] = layers_to_json(net.layout());

    std::int64_t step_count = 0;
    nlohmann::json tensors = nlohmann::json::array();
    std::vector<const Tensor5D*> payload;
    net.visit_params([&](const std::string& name, Parameter& p) {
        nlohmann::json jt;
        jt["name"] = name;
        jt["shape"] = {p.value.shape.n, p.value.shape.c, p.value.shape.d, p.value.shape.h,
                       p.value.shape.w};
        tensors.push_back(std::move(jt));
        payload.push_back(&p.value);
        step_count = std::max(step_count, p.step_count);
    });
    manifest["tensors"] = std::move(tensors);
    manifest["step_count"] = step_count;

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open for writing: " + path);
    out << manifest.dump() << '\n';
    for (const Tensor5D* t : payload)
        out.write(reinterpret_cast<const char*>(t->data.data()),
                  static_cast<std::streamsize>(t->data.size() * sizeof(float)));
    if (!out) throw CheckpointError("write failed: " + path);
}

template <class Net>
void read_checkpoint_payload(Net& net, std::istream& in, const nlohmann::json& manifest) {
    const auto& tensors = manifest.at("tensors");
    const std::int64_t step_count = manifest.at("step_count").get<std::int64_t>();
    std::size_t idx = 0;
    net.visit_params([&](const std::string& name, Parameter& p) {
        if (idx >= tensors.size()) throw CheckpointError("manifest lists too few tensors");
        const auto& jt = tensors[idx++];
        if (jt.at("name").get<std::string>() != name)
            throw CheckpointError("tensor order mismatch at " + name);
        const auto& js = jt.at("shape");
        const Shape5 s{js[0].get<int>(), js[1].get<int>(), js[2].get<int>(), js[3].get<int>(),
                       js[4].get<int>()};
        if (!(s == p.value.shape))
            throw CheckpointError("shape mismatch for " + name + ": file " + s.str() +
                                  ", net " + p.value.shape.str());
        in.read(reinterpret_cast<char*>(p.value.data.data()),
                static_cast<std::streamsize>(p.value.data.size() * sizeof(float)));
        if (in.gcount() != static_cast<std::streamsize>(p.value.data.size() * sizeof(float)))
            throw CheckpointError("checkpoint payload truncated at " + name);
        p.step_count = step_count;
    });
    if (idx != tensors.size()) throw CheckpointError("manifest lists too many tensors");
}

inline nlohmann::json open_checkpoint(std::ifstream& in, const std::string& path,
                                      const std::string& expected_kind) {
    if (!in) throw CheckpointError("cannot open checkpoint: " + path);
    std::string line;
    if (!std::getline(in, line)) throw CheckpointError("missing checkpoint manifest: " + path);
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("manifest is not valid JSON: ") + e.what());
    }
    if (manifest.at("kind").get<std::string>() != expected_kind)
        throw CheckpointError("checkpoint kind is '" + manifest["kind"].get<std::string>() +
                              "', expected '" + expected_kind + "'");
    return manifest;
}

}  // namespace detail

inline void save_checkpoint(CoarseNet& net, const std::string& path) {
    detail::write_checkpoint(net, nlohmann::json::object(), "coarse", path);
}

inline void save_checkpoint(FineNet& net, const std::string& path) {
    nlohmann::json extra;
    extra["fine_options"] = {{"multiscale", net.options().multiscale},
                             {"residual", net.options().residual}};
    detail::write_checkpoint(net, extra, "fine", path);
}

inline CoarseNet load_coarse_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    const nlohmann::json manifest = detail::open_checkpoint(in, path, "coarse");
    CoarseNet net(detail::net_config_from_json(manifest.at("net_config")));
    detail::read_checkpoint_payload(net, in, manifest);
    return net;
}

inline FineNet load_fine_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    const nlohmann::json manifest = detail::open_checkpoint(in, path, "fine");
    FineOptions opts;
    opts.multiscale = manifest.at("fine_options").at("multiscale").get<bool>();
    opts.residual = manifest.at("fine_options").at("residual").get<bool>();
    FineNet net(detail::net_config_from_json(manifest.at("net_config")), opts);
    detail::read_checkpoint_payload(net, in, manifest);
    return net;
}

}  // namespace canalseg
