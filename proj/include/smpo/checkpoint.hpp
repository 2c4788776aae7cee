#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>

#include <json.hpp>

#include "smpo/denoiser.hpp"
#include "smpo/errors.hpp"
#include "smpo/numerics.hpp"
#include "smpo/optim.hpp"

namespace smpo {

inline constexpr int kCheckpointVersion = 1;

/// Hash of everything that must agree between two models before they can be
/// compared or trained against each other: architecture and noise schedule.
inline std::string config_hash(const DenoiserArch& arch, const NoiseSchedule& sched) {
    const std::string canon = arch.canonical() + "|kind=" + to_string(sched.kind) + ";T=" + std::to_string(sched.T) +
                              ";beta_min=" + format_real(sched.beta_min) + ";beta_max=" + format_real(sched.beta_max);
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(canon)));
    return buf;
}

struct Checkpoint {
    DenoiserModel model;
    NoiseSchedule schedule;
    std::optional<AdamState> optimizer;
    std::int64_t step = 0;

    std::string hash() const { return config_hash(model.arch(), schedule); }
};

inline nlohmann::json checkpoint_to_json(const Checkpoint& ck) {
    using nlohmann::json;
    const auto& a = ck.model.arch();
    json j;
    j["format"] = "smpo-checkpoint";
    j["version"] = kCheckpointVersion;
    j["config_hash"] = ck.hash();
    j["step"] = ck.step;
    j["architecture"] = {{"data_dim", a.data_dim},       {"cond_dim", a.cond_dim},
                         {"hidden_dim", a.hidden_dim},   {"depth", a.depth},
                         {"t_embed_dim", a.t_embed_dim}, {"max_timestep", a.max_timestep},
                         {"activation", to_string(a.activation)}};
    j["schedule"] = {{"kind", to_string(ck.schedule.kind)},
                     {"T", ck.schedule.T},
                     {"beta_min", ck.schedule.beta_min},
                     {"beta_max", ck.schedule.beta_max}};
    json layers = json::array();
    for (const auto& l : ck.model.layers()) layers.push_back({{"rows", l.rows}, {"cols", l.cols}});
    j["layers"] = layers;
    j["null_condition"] = ck.model.null_condition().raw();
    j["params"] = std::vector<double>(ck.model.params().begin(), ck.model.params().end());
    if (ck.optimizer) {
        j["optimizer"] = {{"step", ck.optimizer->step}, {"m", ck.optimizer->m}, {"v", ck.optimizer->v}};
    } else {
        j["optimizer"] = nullptr;
    }
    return j;
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
    try {
        if (j.at("format").get<std::string>() != "smpo-checkpoint") throw ConfigError("checkpoint: wrong format tag");
        if (j.at("version").get<int>() != kCheckpointVersion) throw ConfigError("checkpoint: unsupported version");
        const auto& ja = j.at("architecture");
        DenoiserArch arch;
        arch.data_dim = ja.at("data_dim").get<std::size_t>();
        arch.cond_dim = ja.at("cond_dim").get<std::size_t>();
        arch.hidden_dim = ja.at("hidden_dim").get<std::size_t>();
        arch.depth = ja.at("depth").get<std::size_t>();
        arch.t_embed_dim = ja.at("t_embed_dim").get<std::size_t>();
        arch.max_timestep = ja.at("max_timestep").get<int>();
        arch.activation = activation_from_string(ja.at("activation").get<std::string>());
        const auto& js = j.at("schedule");
        Checkpoint ck;
        ck.schedule = make_schedule(js.at("T").get<int>(), schedule_kind_from_string(js.at("kind").get<std::string>()),
                                    js.at("beta_min").get<double>(), js.at("beta_max").get<double>());
        ck.model = DenoiserModel::zeros(arch);
        ck.step = j.value("step", std::int64_t{0});

        const auto& jl = j.at("layers");
        const auto& expected = ck.model.layers();
        if (jl.size() != expected.size()) throw ConfigError("checkpoint: layer count does not match architecture");
        for (std::size_t i = 0; i < expected.size(); ++i) {
            if (jl[i].at("rows").get<std::size_t>() != expected[i].rows ||
                jl[i].at("cols").get<std::size_t>() != expected[i].cols) {
                throw ConfigError("checkpoint: layer " + std::to_string(i) + " shape does not match architecture");
            }
        }
        const auto params = j.at("params").get<std::vector<double>>();
        if (params.size() != ck.model.num_params()) throw ConfigError("checkpoint: parameter count mismatch");
        std::copy(params.begin(), params.end(), ck.model.params().begin());
        ck.model.set_null_condition(Vector(j.at("null_condition").get<std::vector<double>>()));

        if (j.contains("optimizer") && !j["optimizer"].is_null()) {
            AdamState st;
            st.step = j["optimizer"].at("step").get<std::int64_t>();
            st.m = j["optimizer"].at("m").get<std::vector<double>>();
            st.v = j["optimizer"].at("v").get<std::vector<double>>();
            if (st.m.size() != params.size() || st.v.size() != params.size()) {
                throw ConfigError("checkpoint: optimizer state size mismatch");
            }
            ck.optimizer = std::move(st);
        }
        if (j.contains("config_hash") && j["config_hash"].get<std::string>() != ck.hash()) {
            throw ConfigError("checkpoint: config hash does not match its contents");
        }
        return ck;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("checkpoint: malformed: ") + e.what());
    } catch (const InvalidRangeError& e) {
        throw ConfigError(std::string("checkpoint: invalid values: ") + e.what());
    } catch (const DimensionMismatchError& e) {
        throw ConfigError(std::string("checkpoint: invalid values: ") + e.what());
    }
}

inline std::string checkpoint_to_string(const Checkpoint& ck) { return checkpoint_to_json(ck).dump() + "\n"; }

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot write checkpoint " + path);
    f << checkpoint_to_string(ck);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open checkpoint " + path);
    try {
        return checkpoint_from_json(nlohmann::json::parse(f));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("checkpoint: malformed JSON in " + path + ": " + e.what());
    }
}

}  // namespace smpo
