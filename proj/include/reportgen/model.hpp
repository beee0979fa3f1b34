// SPDX-License-Identifier: Apache-2.0
//
// The full report generator: visual encoder, visual mapper and frozen causal
// language model, wired through the prompt template.

#pragma once

#include "reportgen/archive.hpp"
#include "reportgen/encoder.hpp"
#include "reportgen/lm.hpp"
#include "reportgen/lora.hpp"
#include "reportgen/mapper.hpp"
#include "reportgen/tokenizer.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <string_view>

namespace reportgen {

struct ModelConfig {
    EncoderConfig encoder;
    std::size_t lm_dim = 64;
    std::size_t lm_layers = 2;
    std::size_t lm_heads = 4;
    std::size_t lm_mlp_ratio = 4;
    std::size_t max_seq_len = 192;
    bool mapper_bias = false;
    PromptTemplate prompt;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

class ReportModel {
public:
    /// Vocabulary: report templates plus the words of the prompt template.
    static Tokenizer build_tokenizer(const PromptTemplate& prompt);
    static ReportModel create(const ModelConfig& config, std::uint64_t seed);

    ModelConfig config;
    Tokenizer tokenizer;
    VisualEncoder encoder;
    VisualMapper mapper;
    LanguageModel lm;

    /// Every parameter, in a stable order. Entries alias the live tensors.
    NamedTensors parameters();
    NamedTensors parameters_with_prefix(std::string_view prefix);

    /// Attaches adapters to every encoder query and value projection.
    void apply_lora(const LoraOptions& options, std::mt19937_64& rng);
    bool has_lora();

    Tensor visual_tokens(const Tensor& image) const;
    PromptSequence sequence(const Tensor& image, std::optional<std::string_view> report) const;
    /// Report-token negative log-likelihood of one (image, report) pair.
    Tensor loss(const Tensor& image, std::string_view report) const;
};

/// Weights + config under `dir/weights.{json,bin}`. LoRA adapters are stored
/// factored unless `merged` is set, in which case they are folded into W0.
void save_model(const std::filesystem::path& dir, ReportModel& model, nlohmann::json attributes = {},
                bool merged = false);
/// Restores a model saved by save_model. Returns the stored attributes.
ReportModel load_model(const std::filesystem::path& dir, nlohmann::json* attributes = nullptr);

}  // namespace reportgen
