#pragma once

// Pipeline configuration: TOML-style sections read with CLI11's config
// parser, then environment overrides named MENTALMAD_<SECTION>_<KEY>
// (MENTALMAD_<KEY> for top-level keys). Command-line flags win over both.

#include "mentalmad/error.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace mentalmad {

inline constexpr std::uint64_t kDefaultSeed = 42;

using EnvLookup = std::function<std::optional<std::string>(const std::string&)>;

inline EnvLookup processEnv() {
    return [](const std::string& name) -> std::optional<std::string> {
        if (const char* v = std::getenv(name.c_str())) return std::string(v);
        return std::nullopt;
    };
}

/// Keys are "section.key", or "key" at top level.
class Config {
public:
    Config() = default;

    static Config parse(std::istream& in, const std::string& origin = "<config>") {
        Config c;
        std::vector<CLI::ConfigItem> items;
        try {
            items = CLI::ConfigTOML().from_config(in);
        } catch (const CLI::Error& e) {
            throw ConfigError(origin + ": " + e.what());
        }
        for (const auto& it : items) {
            if (it.name == "++" || it.name == "--") continue;
            c.values_[it.fullname()] = it.inputs;
        }
        return c;
    }

    static Config load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot read config file '" + path + "'");
        return parse(in, path);
    }

    static std::string envName(const std::string& key) {
        std::string out = "MENTALMAD_";
        for (char c : key) out += (c == '.' || c == '-') ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
        return out;
    }

    /// Overlays every known key that has an environment variable set, and
    /// also env-only keys listed in `extra_keys`.
    void applyEnv(const EnvLookup& env, const std::vector<std::string>& extra_keys = {}) {
        std::vector<std::string> keys;
        for (const auto& [k, _] : values_) keys.push_back(k);
        keys.insert(keys.end(), extra_keys.begin(), extra_keys.end());
        for (const auto& k : keys) {
            if (auto v = env(envName(k))) values_[k] = {*v};
        }
    }

    void set(const std::string& key, std::string value) { values_[key] = {std::move(value)}; }

    [[nodiscard]] bool has(const std::string& key) const { return values_.count(key) > 0; }

    [[nodiscard]] std::optional<std::string> getString(const std::string& key) const {
        auto f = values_.find(key);
        if (f == values_.end() || f->second.empty()) return std::nullopt;
        return f->second.front();
    }

    [[nodiscard]] std::vector<std::string> getList(const std::string& key) const {
        auto f = values_.find(key);
        return f == values_.end() ? std::vector<std::string>{} : f->second;
    }

    [[nodiscard]] std::optional<long long> getInt(const std::string& key) const {
        auto s = getString(key);
        if (!s) return std::nullopt;
        try {
            std::size_t used = 0;
            const auto v = std::stoll(*s, &used);
            if (used != s->size()) throw std::invalid_argument(*s);
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "' is not an integer: " + *s);
        }
    }

    [[nodiscard]] std::optional<double> getDouble(const std::string& key) const {
        auto s = getString(key);
        if (!s) return std::nullopt;
        try {
            std::size_t used = 0;
            const auto v = std::stod(*s, &used);
            if (used != s->size()) throw std::invalid_argument(*s);
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "' is not a number: " + *s);
        }
    }

    [[nodiscard]] std::optional<bool> getBool(const std::string& key) const {
        auto s = getString(key);
        if (!s) return std::nullopt;
        if (*s == "true" || *s == "1") return true;
        if (*s == "false" || *s == "0") return false;
        throw ConfigError("config key '" + key + "' is not a boolean: " + *s);
    }

    [[nodiscard]] const std::map<std::string, std::vector<std::string>>& values() const { return values_; }

private:
    std::map<std::string, std::vector<std::string>> values_;
};

} // namespace mentalmad
