#pragma once

#include <string>
#include <utility>

#include <json.hpp>

#include "photondfa/checkpoint.hpp"
#include "photondfa/mlp.hpp"
#include "photondfa/opu.hpp"

namespace photondfa {

// Session checkpoint: real part then imaginary part as raw f64 blobs, all
// session state (seeds, noise, threshold, counters) in the JSON trailer.
inline void save_opu_session(const std::string& path, const OpuSession& session,
                             const nlohmann::json& extra = nlohmann::json::object()) {
    Checkpoint ckpt;
    ckpt.tensors.push_back({"real", session.tm().real_part});
    ckpt.tensors.push_back({"imag", session.tm().imag_part});
    nlohmann::json meta;
    meta["kind"] = "opu_session";
    meta["rows"] = session.rows();
    meta["cols"] = session.cols();
    meta["tm_seed"] = session.tm().seed;
    meta["anchor_seed"] = session.anchor().seed;
    meta["noise"] = {{"kind", to_string(session.noise().kind)},
                     {"sigma", session.noise().sigma},
                     {"seed", session.noise().seed}};
    meta["latency"] = {{"seconds_per_projection", session.latency().seconds_per_projection},
                       {"projections_per_signal", session.latency().projections_per_signal}};
    meta["threshold"] = session.threshold();
    meta["step_counter"] = session.step_counter();
    meta["drift_counter"] = OpuSessionAccess::drift_counter(session);
    meta["frame_counter"] = OpuSessionAccess::frame_counter(session);
    meta["extra"] = extra;
    ckpt.metadata = meta;
    save_checkpoint(path, ckpt);
}

inline OpuSession load_opu_session(const std::string& path) {
    const Checkpoint ckpt = load_checkpoint(path);
    const auto& meta = ckpt.metadata;
    if (meta.value("kind", "") != "opu_session") {
        throw checkpoint_error("not an OPU session checkpoint: " + path);
    }
    NoiseSpec noise;
    noise.kind = noise_kind_from_string(meta.at("noise").at("kind").get<std::string>());
    noise.sigma = meta.at("noise").at("sigma").get<double>();
    noise.seed = meta.at("noise").at("seed").get<std::uint64_t>();
    LatencyModel latency;
    latency.seconds_per_projection = meta.at("latency").at("seconds_per_projection").get<double>();
    latency.projections_per_signal =
        meta.at("latency").at("projections_per_signal").get<std::uint32_t>();

    OpuSession session(meta.at("rows").get<std::size_t>(), meta.at("cols").get<std::size_t>(),
                       meta.at("tm_seed").get<std::uint64_t>(),
                       meta.at("anchor_seed").get<std::uint64_t>(), noise, latency);

    TransmissionMatrix tm;
    tm.rows = session.rows();
    tm.cols = session.cols();
    tm.seed = meta.at("tm_seed").get<std::uint64_t>();
    tm.real_part = ckpt.require("real");
    tm.imag_part = ckpt.require("imag");
    OpuSessionAccess::restore(session, std::move(tm), meta.at("threshold").get<double>(),
                              meta.at("step_counter").get<std::uint64_t>(),
                              meta.at("drift_counter").get<std::uint64_t>(),
                              meta.at("frame_counter").get<std::uint64_t>());
    return session;
}

inline void save_mlp(const std::string& path, const MlpModel& model,
                     const nlohmann::json& extra = nlohmann::json::object(),
                     bool float32_storage = false) {
    Checkpoint ckpt;
    for (std::size_t l = 0; l < model.layer_count(); ++l) {
        ckpt.tensors.push_back({"layer" + std::to_string(l) + ".weight", model.weights[l]});
        ckpt.tensors.push_back({"layer" + std::to_string(l) + ".bias", model.biases[l]});
    }
    nlohmann::json meta;
    meta["kind"] = "mlp";
    meta["dims"] = model.dims;
    meta["hidden_activation"] = to_string(model.hidden_activation);
    meta["extra"] = extra;
    ckpt.metadata = meta;
    save_checkpoint(path, ckpt, float32_storage);
}

inline std::pair<MlpModel, nlohmann::json> load_mlp(const std::string& path) {
    const Checkpoint ckpt = load_checkpoint(path);
    const auto& meta = ckpt.metadata;
    if (meta.value("kind", "") != "mlp") {
        throw checkpoint_error("not an MLP checkpoint: " + path);
    }
    MlpModel model;
    model.dims = meta.at("dims").get<std::vector<std::size_t>>();
    model.hidden_activation =
        activation_from_string(meta.at("hidden_activation").get<std::string>());
    for (std::size_t l = 0; l + 1 < model.dims.size(); ++l) {
        model.weights.push_back(ckpt.require("layer" + std::to_string(l) + ".weight"));
        model.biases.push_back(ckpt.require("layer" + std::to_string(l) + ".bias"));
    }
    return {std::move(model), meta.value("extra", nlohmann::json::object())};
}

}  // namespace photondfa
