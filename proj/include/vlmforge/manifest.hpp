#pragma once

// Provenance record written next to every artifact.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "vlmforge/common.hpp"

#ifndef VLMFORGE_GIT_DESCRIBE
#define VLMFORGE_GIT_DESCRIBE "unknown"
#endif

namespace vlmforge {

inline std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

struct RunManifest {
    std::string command;
    nlohmann::json config = nlohmann::json::object();
    std::uint64_t seed = 0;
    std::string started_at;
    std::string finished_at;
    std::vector<std::pair<std::string, std::string>> inputs;   // path, sha256
    std::vector<std::pair<std::string, std::string>> outputs;  // path, sha256

    std::string config_hash() const { return to_hex(sha256(config.dump())); }

    void add_input(const std::filesystem::path& p) { inputs.emplace_back(p.string(), to_hex(sha256_file(p))); }
    void add_output(const std::filesystem::path& p) { outputs.emplace_back(p.string(), to_hex(sha256_file(p))); }

    nlohmann::json to_json() const {
        nlohmann::json in = nlohmann::json::array(), out = nlohmann::json::array();
        for (const auto& [p, h] : inputs) in.push_back({{"path", p}, {"sha256", h}});
        for (const auto& [p, h] : outputs) out.push_back({{"path", p}, {"sha256", h}});
        return {{"command", command},     {"config", config},        {"config_hash", config_hash()},
                {"git_describe", VLMFORGE_GIT_DESCRIBE}, {"seed", seed}, {"started_at", started_at},
                {"finished_at", finished_at}, {"inputs", in},          {"outputs", out}};
    }

    // `<artifact>.manifest.json`, or `<dir>/manifest.json` for directories.
    static std::filesystem::path path_for(const std::filesystem::path& artifact) {
        if (std::filesystem::is_directory(artifact)) return artifact / "manifest.json";
        return artifact.string() + ".manifest.json";
    }

    void write(const std::filesystem::path& artifact) {
        if (finished_at.empty()) finished_at = utc_timestamp();
        write_file_atomic(path_for(artifact), to_json().dump(2) + "\n");
    }
};

}  // namespace vlmforge
