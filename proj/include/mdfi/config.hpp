#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdfi/errors.hpp"
#include "mdfi/version.hpp"

namespace mdfi {

// Plain key=value configuration. '#' starts a comment, whitespace around
// keys and values is trimmed. Keys are written back sorted so the
// serialized effective config is stable.
class KvConfig {
public:
    KvConfig() = default;

    static KvConfig from_file(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw ConfigError("cannot open config file: " + path);
        KvConfig cfg;
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.resize(hash);
            const std::string trimmed = trim(line);
            if (trimmed.empty()) continue;
            const auto eq = trimmed.find('=');
            if (eq == std::string::npos)
                throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key=value");
            const std::string key = trim(trimmed.substr(0, eq));
            const std::string val = trim(trimmed.substr(eq + 1));
            if (key.empty())
                throw ConfigError(path + ":" + std::to_string(lineno) + ": empty key");
            cfg.values_[key] = val;
        }
        return cfg;
    }

    void set(const std::string& key, const std::string& val) { values_[key] = val; }
    void set_double(const std::string& key, double v) {
        char buf[40];
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        values_[key] = buf;
    }
    void set_int(const std::string& key, long long v) { values_[key] = std::to_string(v); }
    void set_bool(const std::string& key, bool v) { values_[key] = v ? "true" : "false"; }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    std::string get(const std::string& key, const std::string& fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    double get_double(const std::string& key, double fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            std::size_t pos = 0;
            const double v = std::stod(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "': not a number: " + it->second);
        }
    }

    long long get_int(const std::string& key, long long fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            std::size_t pos = 0;
            const long long v = std::stoll(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "': not an integer: " + it->second);
        }
    }

    bool get_bool(const std::string& key, bool fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        if (it->second == "true" || it->second == "1") return true;
        if (it->second == "false" || it->second == "0") return false;
        throw ConfigError("config key '" + key + "': expected true/false: " + it->second);
    }

    std::vector<int> get_int_list(const std::string& key, std::vector<int> fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        std::vector<int> out;
        std::stringstream ss(it->second);
        std::string part;
        while (std::getline(ss, part, ',')) {
            part = trim(part);
            if (part.empty()) continue;
            try {
                out.push_back(std::stoi(part));
            } catch (const std::exception&) {
                throw ConfigError("config key '" + key + "': bad list element: " + part);
            }
        }
        if (out.empty()) throw ConfigError("config key '" + key + "': empty list");
        return out;
    }

    void save(const std::string& path) const {
        std::ofstream os(path, std::ios::trunc);
        if (!os) throw DataError("cannot write config: " + path);
        for (const auto& [k, v] : values_) os << k << " = " << v << "\n";
    }

    const std::map<std::string, std::string>& values() const { return values_; }

private:
    static std::string trim(const std::string& s) {
        std::size_t a = 0, b = s.size();
        while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
        while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
        return s.substr(a, b - a);
    }

    std::map<std::string, std::string> values_;
};

inline std::uint64_t fnv1a64_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot hash missing file: " + path);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[8192];
    while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
        const std::streamsize n = is.gcount();
        for (std::streamsize i = 0; i < n; ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ULL;
        }
        if (!is) break;
    }
    return h;
}

// Run record written next to every command's outputs: the effective
// configuration, input hashes and output paths are enough to replay the
// run bit-exactly (wall time and version are informational).
struct RunManifest {
    std::string command;
    KvConfig config;
    std::vector<std::pair<std::string, std::uint64_t>> inputs;   // path, fnv1a64
    std::vector<std::string> outputs;
    double wall_time_s = 0.0;

    void add_input(const std::string& path) { inputs.emplace_back(path, fnv1a64_file(path)); }

    void write(const std::string& path) const {
        nlohmann::json j;
        j["command"] = command;
        j["version"] = kVersion;
        nlohmann::json jc = nlohmann::json::object();
        for (const auto& [k, v] : config.values()) jc[k] = v;
        j["config"] = jc;
        nlohmann::json ji = nlohmann::json::array();
        for (const auto& [p, h] : inputs) {
            char hex[20];
            std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
            ji.push_back({{"path", p}, {"fnv1a64", hex}});
        }
        j["inputs"] = ji;
        j["outputs"] = outputs;
        j["wall_time_s"] = wall_time_s;
        std::ofstream os(path, std::ios::trunc);
        if (!os) throw DataError("cannot write manifest: " + path);
        os << j.dump(2) << "\n";
    }
};

} // namespace mdfi
