// SPDX-License-Identifier: Apache-2.0
//
// Greedy and beam-search report generation.

#pragma once

#include "reportgen/data.hpp"
#include "reportgen/model.hpp"

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <vector>

namespace reportgen {

/// Next-token distribution given the tokens generated so far.
class Scorer {
public:
    virtual ~Scorer() = default;
    virtual std::size_t vocab_size() const = 0;
    virtual std::vector<double> logits(std::span<const TokenId> generated) = 0;
};

struct DecodeOptions {
    std::size_t beam_size = 3;
    std::size_t max_len = 60;       // generated tokens, end-of-sequence included
    double length_penalty = 1.0;    // final score = log_prob / length^penalty
    TokenId eos = 2;
    std::vector<TokenId> banned;    // never emitted

    void validate() const;
};

struct Hypothesis {
    std::vector<TokenId> tokens;  // without the end-of-sequence token
    double log_prob = 0.0;        // sum of per-step log-softmax values
    bool finished = false;
    double score = 0.0;           // length-normalised

    std::size_t length() const { return tokens.size() + (finished ? 1 : 0); }
};

double length_normalized(double log_prob, std::size_t length, double penalty);
std::vector<double> log_softmax(std::span<const double> logits);

/// Argmax each step; ties go to the lowest token id.
Hypothesis greedy(Scorer& scorer, const DecodeOptions& options);

/// Final beams ranked by score (best first). Each step pools finished beams
/// with every extension of the unfinished ones and keeps the beam_size best by
/// cumulative log-probability; ties prefer the lexicographically smaller
/// token sequence, so beam_size 1 reproduces greedy exactly.
std::vector<Hypothesis> beam_search(Scorer& scorer, const DecodeOptions& options);

/// Incremental scorer over a trained model for one image: the prompt is
/// prefilled once and every hypothesis extends a cached parent state.
class ModelScorer : public Scorer {
public:
    ModelScorer(const ReportModel& model, const Tensor& image);
    std::size_t vocab_size() const override;
    std::vector<double> logits(std::span<const TokenId> generated) override;
    /// Longest report the sequence budget leaves room for.
    std::size_t room() const;

private:
    struct State {
        LmCache cache;
        std::vector<double> logits;
    };
    const ReportModel& model_;
    std::map<std::vector<TokenId>, State> states_;
    std::size_t prompt_len_ = 0;
};

/// Options for model decoding: bans every special except end-of-sequence.
DecodeOptions model_decode_options(const ReportModel& model, std::size_t beam_size = 3, std::size_t max_len = 60);

struct Generation {
    std::string id;
    std::string text;
    double score = 0.0;
};

Generation generate(const ReportModel& model, const Sample& sample, const DecodeOptions& options);
std::vector<Generation> generate_all(const ReportModel& model, std::span<const Sample> samples,
                                     const DecodeOptions& options);

/// One JSON object per line: {"id", "text", "score"}.
void write_generations(const std::filesystem::path& path, std::span<const Generation> generations);
std::vector<Generation> read_generations(const std::filesystem::path& path);

}  // namespace reportgen
