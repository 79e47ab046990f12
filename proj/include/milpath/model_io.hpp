#pragma once

// Model checkpoints: MILC parameter file plus a JSON sidecar at "<path>.json"
// holding {kind, D, E, H, C, heads, nystrom, landmarks, pinv_iterations,
// seed, epoch, val_loss}.

#include <cmath>
#include <filesystem>
#include <limits>
#include <string>

#include <json.hpp>

#include "milpath/checkpoint.hpp"
#include "milpath/models.hpp"

namespace milpath {

inline std::filesystem::path sidecar_path(const std::filesystem::path& checkpoint) {
    auto p = checkpoint;
    p += ".json";
    return p;
}

inline nlohmann::json model_sidecar(const ModelConfig& c, long long epoch, double val_loss) {
    nlohmann::json j;
    j["kind"] = std::string(model_kind_name(c.kind));
    j["D"] = c.input_dim;
    j["E"] = c.embed_dim;
    j["H"] = c.hidden_dim;
    j["C"] = c.n_classes;
    j["heads"] = c.n_heads;
    j["nystrom"] = c.nystrom;
    j["landmarks"] = c.landmarks;
    j["pinv_iterations"] = c.pinv_iterations;
    j["seed"] = c.seed;
    j["epoch"] = epoch;
    j["val_loss"] = std::isfinite(val_loss) ? nlohmann::json(val_loss) : nlohmann::json(nullptr);
    return j;
}

inline ModelConfig model_config_from_sidecar(const nlohmann::json& j) {
    try {
        ModelConfig c;
        c.kind = parse_model_kind(j.at("kind").get<std::string>());
        c.input_dim = j.at("D").get<std::size_t>();
        c.embed_dim = j.at("E").get<std::size_t>();
        c.hidden_dim = j.at("H").get<std::size_t>();
        c.n_classes = j.at("C").get<std::size_t>();
        c.n_heads = j.value("heads", c.n_heads);
        c.nystrom = j.value("nystrom", false);
        c.landmarks = j.value("landmarks", c.landmarks);
        c.pinv_iterations = j.value("pinv_iterations", c.pinv_iterations);
        c.seed = j.value("seed", c.seed);
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint sidecar: ") + e.what());
    }
}

inline void save_model(const std::filesystem::path& path, const MilModel& model, long long epoch = -1,
                       double val_loss = std::numeric_limits<double>::quiet_NaN()) {
    save_checkpoint_file(path, model.params().entries());
    write_file_atomic(sidecar_path(path), model_sidecar(model.config(), epoch, val_loss).dump(2) + "\n");
}

struct LoadedModel {
    MilModel model;
    long long epoch = -1;
    double val_loss = std::numeric_limits<double>::quiet_NaN();
};

inline LoadedModel load_model(const std::filesystem::path& path) {
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(read_file(sidecar_path(path)));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("checkpoint sidecar " + sidecar_path(path).string() + ": " + e.what());
    }
    LoadedModel out{MilModel(model_config_from_sidecar(meta))};
    out.model.params().assign(load_checkpoint_file(path));
    out.epoch = meta.value("epoch", -1LL);
    if (meta.contains("val_loss") && meta["val_loss"].is_number()) out.val_loss = meta["val_loss"].get<double>();
    return out;
}

}  // namespace milpath
