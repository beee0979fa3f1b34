// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: nested JSON over built-in defaults. Unknown keys and
// type mismatches are rejected; the effective config is what gets echoed into
// run directories.

#pragma once

#include "reportgen/data.hpp"
#include "reportgen/model.hpp"
#include "reportgen/trainer.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>

namespace reportgen {

struct DecodeConfig {
    std::size_t beam_size = 3;
    std::size_t max_len = 60;
    double length_penalty = 1.0;
};

struct RunConfig {
    /// Drives corpus generation, splitting, initialisation and shuffling.
    std::uint64_t seed = 1;
    CorpusOptions data;
    SplitRatios split;
    ModelConfig model;
    PretrainConfig pretrain;
    TrainConfig train;
    DecodeConfig decode;

    nlohmann::json to_json() const;
    /// Defaults overlaid with `overrides`.
    static RunConfig from_json(const nlohmann::json& overrides);
    static RunConfig load(const std::filesystem::path& path);

    /// Pushes the top-level seed into every component that takes one.
    void apply_seed();
    void validate() const;
};

/// Recursively replaces values of `base` with those of `overrides`. Every
/// override key must already exist in `base` with a compatible type.
nlohmann::json overlay(nlohmann::json base, const nlohmann::json& overrides, const std::string& path = "");

void write_config_echo(const std::filesystem::path& dir, const RunConfig& config);

}  // namespace reportgen
