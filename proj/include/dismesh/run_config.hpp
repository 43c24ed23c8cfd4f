#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "binary_io.hpp"
#include "json_util.hpp"
#include "trainer.hpp"
#include "vae.hpp"

namespace dismesh {

/// Everything a pipeline run needs, as one versioned JSON document. Every
/// section and key is optional; absent values keep the defaults below.
struct RunConfig {
    static constexpr int kVersion = 1;

    std::uint64_t seed = 0;
    std::size_t subjects = 20;
    std::size_t poses = 30;
    std::string data_dir = "data";
    std::string run_dir = "run";
    ModelConfig model;
    TrainConfig trainer;

    nlohmann::json to_json() const {
        return {{"version", kVersion},
                {"seed", seed},
                {"dataset", {{"subjects", subjects}, {"poses", poses}}},
                {"paths", {{"data", data_dir}, {"run", run_dir}}},
                {"model", model.to_json()},
                {"trainer", trainer.to_json()}};
    }

    static RunConfig from_json(const nlohmann::json& j) {
        reject_unknown_keys(j, {"version", "seed", "dataset", "paths", "model", "trainer"}, "config");
        if (!j.contains("version")) throw ValidationError("config: missing 'version'");
        if (j.at("version") != kVersion)
            throw ValidationError("config: unsupported version " + j.at("version").dump() + " (expected " +
                                  std::to_string(kVersion) + ")");
        RunConfig c;
        read_optional(j, "seed", c.seed, "config");
        if (j.contains("dataset")) {
            const auto& d = j.at("dataset");
            reject_unknown_keys(d, {"subjects", "poses"}, "dataset");
            read_optional(d, "subjects", c.subjects, "dataset");
            read_optional(d, "poses", c.poses, "dataset");
        }
        if (j.contains("paths")) {
            const auto& p = j.at("paths");
            reject_unknown_keys(p, {"data", "run"}, "paths");
            read_optional(p, "data", c.data_dir, "paths");
            read_optional(p, "run", c.run_dir, "paths");
        }
        if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
        if (j.contains("trainer")) c.trainer = TrainConfig::from_json(j.at("trainer"));
        return c;
    }

    static RunConfig load(const std::filesystem::path& path) {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(io::read_file(path));
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError(path.string() + ": " + e.what());
        }
        return from_json(j);
    }
};

}  // namespace dismesh
