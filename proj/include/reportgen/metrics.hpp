// SPDX-License-Identifier: Apache-2.0
//
// Caption-style text metrics (BLEU, ROUGE-L, METEOR without synonyms, CIDEr)
// and label-based clinical efficacy.

#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace reportgen {

using Words = std::vector<std::string>;

/// Lowercases, treats punctuation as whitespace and splits.
Words metric_tokens(std::string_view text);

struct EvalPair {
    Words candidate;
    std::vector<Words> references;  // at least one nonempty
};

EvalPair make_eval_pair(std::string_view candidate, std::string_view reference);

/// Corpus BLEU-n: clipped n-gram counts summed over the corpus, uniform
/// geometric mean of p_1..p_n, brevity penalty against the closest reference
/// length. No smoothing, so any zero precision gives 0.
double bleu(std::span<const EvalPair> pairs, int n);

/// LCS F-measure with beta 1.2, max precision and max recall over references,
/// averaged over pairs.
double rouge_l(std::span<const EvalPair> pairs);

/// Crude suffix stripper used for the second METEOR matching stage.
std::string stem(std::string_view word);

struct MeteorStats {
    std::size_t matches = 0;
    std::size_t chunks = 0;
    double score = 0.0;
};

/// Exact then stem matching; ties in the alignment prefer continuing a chunk.
MeteorStats meteor_pair(const Words& candidate, const Words& reference);
/// Mean over pairs of the best score against any reference.
double meteor_simplified(std::span<const EvalPair> pairs);

struct CiderOptions {
    bool d_variant = false;  // clipped term frequencies and a Gaussian length penalty
    double sigma = 6.0;
};

/// 10 x mean over n = 1..4 of the mean over references of the cosine between
/// tf-idf n-gram vectors; document frequencies come from the reference sets.
/// Warnings (e.g. a degenerate single-document corpus) are appended if given.
double cider(std::span<const EvalPair> pairs, const CiderOptions& options = {},
             std::vector<std::string>* warnings = nullptr);

// --- clinical efficacy -------------------------------------------------------------

enum class LabelState { Absent, Negative, Positive };

struct FindingLabel {
    std::string category;
    LabelState state = LabelState::Absent;
    bool operator==(const FindingLabel&) const = default;
};

struct Lexicon {
    std::vector<std::string> categories;  // phrases, matched on metric tokens
    std::vector<std::string> negation_cues = {"no", "without", "free of"};

    /// The synthetic corpus's finding categories.
    static Lexicon standard();
};

/// One label per lexicon category. Sentences split on . ! ? and newlines; a
/// mention preceded by a negation cue in its sentence is negative. Positive
/// anywhere wins over negative.
std::vector<FindingLabel> label_findings(std::string_view report, const Lexicon& lexicon = Lexicon::standard());

struct ClinicalScores {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::size_t tp = 0, fp = 0, fn = 0;
    std::vector<std::string> warnings;
};

/// Micro-averaged over (sample, category); positive is the positive class.
ClinicalScores clinical_efficacy(std::span<const std::vector<FindingLabel>> predicted,
                                 std::span<const std::vector<FindingLabel>> truth);
ClinicalScores clinical_counts(std::size_t tp, std::size_t fp, std::size_t fn);

// --- report -------------------------------------------------------------------------

struct MetricReport {
    std::array<double, 4> bleu{};
    double meteor = 0.0;
    double rouge_l = 0.0;
    double cider = 0.0;
    ClinicalScores clinical;
    std::size_t samples = 0;

    std::string table() const;
    /// key=value lines, fixed order.
    std::string key_values() const;
    nlohmann::json to_json() const;
};

/// Scores candidate texts against reference texts, aligned by index.
MetricReport evaluate_texts(std::span<const std::string> candidates, std::span<const std::string> references,
                            const Lexicon& lexicon = Lexicon::standard());

}  // namespace reportgen
