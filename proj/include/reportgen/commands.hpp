// SPDX-License-Identifier: Apache-2.0
//
// Subcommand implementations behind the command-line tool. Each one is a
// plain function so tests can drive it without spawning a process.

#pragma once

#include "reportgen/config.hpp"
#include "reportgen/decode.hpp"
#include "reportgen/metrics.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>

namespace reportgen {

struct LoadedData {
    Corpus corpus;
    CorpusSplit split;
};

/// Corpus plus its split (split.json when present, otherwise seeded).
LoadedData load_data(const std::filesystem::path& dir, const RunConfig& config);

/// Writes the corpus and its split under `out`.
void cmd_gen_data(const RunConfig& config, const std::filesystem::path& out);

/// Fresh model with a language model trained on the training reports; saved
/// under `out` as a base for `train --base`.
ReportModel cmd_pretrain_lm(const RunConfig& config, const std::filesystem::path& data,
                            const std::filesystem::path& out, std::ostream& log, bool verbose = false);

struct TrainArgs {
    std::filesystem::path data;
    std::filesystem::path out;
    std::optional<std::filesystem::path> base;
    bool resume = false;
    bool verbose = false;
};

TrainingReport cmd_train(const RunConfig& config, const TrainArgs& args, std::ostream& log);

struct GenerateArgs {
    std::filesystem::path checkpoint;  // checkpoint dir or run dir
    std::filesystem::path data;
    std::string split = "test";        // train | val | test | all
    std::filesystem::path out;
    std::optional<std::string> mode;   // must match the checkpoint when given
};

/// Resolves a run directory to its best checkpoint.
std::filesystem::path resolve_checkpoint(const std::filesystem::path& path);
std::vector<Generation> cmd_generate(const RunConfig& config, const GenerateArgs& args);

struct EvaluateArgs {
    std::filesystem::path generations;
    std::filesystem::path data;
};

MetricReport cmd_evaluate(const EvaluateArgs& args);

/// Trainable counts per mode for the configured model (checked against a
/// brute-force enumeration) or for the full-scale geometry.
std::string cmd_count_params(const RunConfig& config, bool full_scale);

}  // namespace reportgen
