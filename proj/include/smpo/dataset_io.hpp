#pragma once

#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "smpo/errors.hpp"
#include "smpo/numerics.hpp"
#include "smpo/preference.hpp"

namespace smpo {

// JSONL preference dataset. Line 1 is the header
//   {"schema_version", "reward_stats": {"max","min","count"} | null, "reward_kind", "seed"}
// and every following line one pair
//   {"id","condition","x_w","x_l","reward_w","reward_l","label": {"ratio","gamma"} | null}.
// Reals are written with 17 significant digits so files round-trip exactly.

inline constexpr int kDatasetSchemaVersion = 1;

namespace detail {

inline std::string json_string(const std::string& s) { return nlohmann::json(s).dump(); }

inline std::string json_array(const Vector& v) {
    std::string out = "[";
    for (std::size_t i = 0; i < v.dim(); ++i) {
        if (i) out += ',';
        out += format_real(v[i]);
    }
    return out + ']';
}

inline std::string json_optional(const std::optional<double>& v) { return v ? format_real(*v) : "null"; }

inline Vector vector_from_json(const nlohmann::json& j, const char* key) {
    if (!j.contains(key) || !j[key].is_array()) throw ConfigError(std::string("dataset: missing array '") + key + "'");
    std::vector<double> out;
    for (const auto& e : j[key]) out.push_back(e.get<double>());
    return Vector(std::move(out));
}

inline std::optional<double> optional_from_json(const nlohmann::json& j, const char* key) {
    if (!j.contains(key) || j[key].is_null()) return std::nullopt;
    return j[key].get<double>();
}

}  // namespace detail

inline std::string header_to_jsonl(const DatasetHeader& h) {
    std::string stats = "null";
    if (h.reward_stats) {
        stats = "{\"max\":" + format_real(h.reward_stats->max) + ",\"min\":" + format_real(h.reward_stats->min) +
                ",\"count\":" + std::to_string(h.reward_stats->count) + "}";
    }
    return "{\"schema_version\":" + std::to_string(h.schema_version) + ",\"reward_stats\":" + stats +
           ",\"reward_kind\":" + detail::json_string(h.reward_kind) + ",\"seed\":" + std::to_string(h.seed) + "}";
}

inline std::string pair_to_jsonl(const PreferencePair& p) {
    std::string label = "null";
    if (p.label) label = "{\"ratio\":" + format_real(p.label->ratio) + ",\"gamma\":" + format_real(p.label->gamma) + "}";
    return "{\"id\":" + detail::json_string(p.id) + ",\"condition\":" + detail::json_array(p.condition) +
           ",\"x_w\":" + detail::json_array(p.x_w) + ",\"x_l\":" + detail::json_array(p.x_l) +
           ",\"reward_w\":" + detail::json_optional(p.reward_w) + ",\"reward_l\":" + detail::json_optional(p.reward_l) +
           ",\"label\":" + label + "}";
}

inline void write_dataset(std::ostream& os, const Dataset& d) {
    os << header_to_jsonl(d.header) << '\n';
    for (const auto& p : d.pairs) os << pair_to_jsonl(p) << '\n';
}

inline std::string dataset_to_string(const Dataset& d) {
    std::ostringstream os;
    write_dataset(os, d);
    return os.str();
}

inline Dataset read_dataset(std::istream& is) {
    Dataset d;
    std::string line;
    if (!std::getline(is, line)) throw ConfigError("dataset: empty input");
    try {
        const auto h = nlohmann::json::parse(line);
        d.header.schema_version = h.at("schema_version").get<int>();
        if (d.header.schema_version != kDatasetSchemaVersion) {
            throw ConfigError("dataset: unsupported schema_version " + std::to_string(d.header.schema_version));
        }
        if (h.contains("reward_stats") && !h["reward_stats"].is_null()) {
            const auto& s = h["reward_stats"];
            d.header.reward_stats = RewardStats{s.at("max").get<double>(), s.at("min").get<double>(),
                                                s.at("count").get<std::int64_t>()};
        }
        d.header.reward_kind = h.value("reward_kind", "");
        d.header.seed = h.value("seed", std::uint64_t{0});
        std::size_t lineno = 1;
        while (std::getline(is, line)) {
            ++lineno;
            if (line.empty()) continue;
            const auto j = nlohmann::json::parse(line);
            PreferencePair p;
            p.id = j.at("id").get<std::string>();
            p.condition = detail::vector_from_json(j, "condition");
            p.x_w = detail::vector_from_json(j, "x_w");
            p.x_l = detail::vector_from_json(j, "x_l");
            if (p.x_w.dim() != p.x_l.dim()) throw ConfigError("dataset: x_w/x_l dimension mismatch on line " + std::to_string(lineno));
            p.reward_w = detail::optional_from_json(j, "reward_w");
            p.reward_l = detail::optional_from_json(j, "reward_l");
            if (j.contains("label") && !j["label"].is_null()) {
                p.label = SmoothedLabel::make(j["label"].at("ratio").get<double>(), j["label"].at("gamma").get<double>());
            }
            d.pairs.push_back(std::move(p));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("dataset: malformed JSON: ") + e.what());
    } catch (const InvalidRangeError& e) {
        throw ConfigError(std::string("dataset: invalid label: ") + e.what());
    }
    return d;
}

inline Dataset load_dataset(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open dataset " + path);
    return read_dataset(f);
}

inline void save_dataset(const std::string& path, const Dataset& d) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot write dataset " + path);
    write_dataset(f, d);
}

}  // namespace smpo
