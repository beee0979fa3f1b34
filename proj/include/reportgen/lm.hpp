// SPDX-License-Identifier: Apache-2.0
//
// Decoder-only causal language model, prompt assembly and the report-only
// autoregressive loss.

#pragma once

#include "reportgen/layers.hpp"
#include "reportgen/tokenizer.hpp"

#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace reportgen {

class LengthError : public std::length_error {
public:
    using std::length_error::length_error;
};

struct LMConfig {
    std::size_t d_model = 64;
    std::size_t num_layers = 2;
    std::size_t num_heads = 4;
    std::size_t vocab_size = 0;
    std::size_t max_seq_len = 192;
    std::size_t mlp_ratio = 4;

    void validate() const;
};

/// Per-position decode state for incremental generation.
class LmCache {
public:
    std::size_t length() const { return length_; }

private:
    friend class LanguageModel;
    std::vector<std::vector<double>> keys_;    // per layer, length_ x d rows
    std::vector<std::vector<double>> values_;  // per layer
    std::size_t length_ = 0;
};

class LanguageModel {
public:
    static LanguageModel create(const LMConfig& config, std::mt19937_64& rng);

    const LMConfig& config() const { return config_; }

    Tensor embed_tokens(std::span<const TokenId> ids) const;
    /// embeddings [T x d_model] -> logits [T x vocab]. Position i only sees
    /// positions <= i.
    Tensor forward(const Tensor& embeddings) const;

    /// Incremental equivalent of forward(): feeds one embedding row and
    /// returns that position's logits. Never records gradients.
    std::vector<double> step(LmCache& cache, std::span<const double> embedding) const;
    /// Feeds every row; returns the logits of the last one.
    std::vector<double> prefill(LmCache& cache, const Tensor& embeddings) const;

    Tensor& token_embed() { return token_embed_; }
    Tensor& pos_embed() { return pos_embed_; }
    LayerNorm& final_norm() { return final_norm_; }
    std::vector<TransformerBlock>& layers() { return layers_; }
    void visit(const ParamVisitor& fn);

private:
    LMConfig config_;
    Tensor token_embed_;  // [vocab x d], tied with the output head
    Tensor pos_embed_;    // [max_seq_len x d]
    std::vector<TransformerBlock> layers_;
    LayerNorm final_norm_;
};

inline constexpr const char* kDefaultInstruction =
    "Generate a comprehensive and detailed diagnosis report for this chest xray image.";

/// "Human: <Img>{visual tokens}</Img>, {instruction} \n Assistant: {report} </s>"
struct PromptTemplate {
    std::string instruction = kDefaultInstruction;
    std::string before_image = "Human: <Img>";
    std::string after_image = "</Img>, {instruction} \n Assistant:";

    /// Token ids preceding the visual slot (beginning-of-sequence first).
    std::vector<TokenId> prefix_ids(const Tokenizer& tokenizer) const;
    /// Token ids between the visual slot and the report.
    std::vector<TokenId> suffix_ids(const Tokenizer& tokenizer) const;
};

enum class Segment : std::uint8_t { Prompt, Visual, Report };

struct PromptSequence {
    Tensor embeddings;                 // [T x d_model]
    std::vector<TokenId> target_ids;   // token at each position; pad under the visual slot
    std::vector<bool> loss_mask;       // true = included in the loss
    std::vector<Segment> segments;

    std::size_t length() const { return target_ids.size(); }
    std::size_t included() const;
    /// target_ids with -100 at every excluded position.
    std::vector<std::int64_t> serialized_labels() const;
};

inline constexpr std::int64_t kIgnoreLabel = -100;

/// Splices visual tokens verbatim between the prompt scaffold; report ids (when
/// given) get a trailing end-of-sequence token and are the only included
/// positions.
PromptSequence assemble_prompt(const LanguageModel& lm, const Tokenizer& tokenizer, const PromptTemplate& prompt,
                               const Tensor& visual_tokens, std::optional<std::vector<TokenId>> report_ids);
PromptSequence assemble_prompt(const LanguageModel& lm, const Tokenizer& tokenizer, const PromptTemplate& prompt,
                               const Tensor& visual_tokens, std::optional<std::string_view> report);

/// Next-token loss: logits at position t score target t+1; mean over the
/// included targets.
Tensor nll_loss(const Tensor& logits, const PromptSequence& seq);

}  // namespace reportgen
