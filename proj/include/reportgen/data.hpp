// SPDX-License-Identifier: Apache-2.0
//
// Synthetic paired (chest image, report) corpus. Findings are rendered as
// bright elliptical patterns inside a lung field and stated in templated
// report sentences; the lexicon is shared with the rule-based labeler.

#pragma once

#include "reportgen/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace reportgen {

inline constexpr std::array<std::string_view, 8> kCategories = {
    "opacity", "effusion", "edema", "consolidation", "atelectasis", "pneumothorax", "nodule", "infiltrate"};
inline constexpr std::array<std::string_view, 3> kLocations = {"left", "right", "bilateral"};
inline constexpr std::array<std::string_view, 3> kSeverities = {"mild", "moderate", "severe"};

enum class Location : std::uint8_t { Left, Right, Bilateral };
enum class Severity : std::uint8_t { Mild, Moderate, Severe };

struct Finding {
    std::size_t category = 0;  // index into kCategories
    Location location = Location::Left;
    Severity severity = Severity::Mild;

    std::string_view category_name() const { return kCategories.at(category); }
    bool operator==(const Finding&) const = default;
};

struct Sample {
    std::string id;
    Tensor image;  // [1 x H x W], values in [0, 1]
    std::string report;
    std::vector<Finding> findings;      // ground truth, ascending category
    std::vector<std::size_t> negated;   // categories stated as absent
};

using Corpus = std::vector<Sample>;

struct CorpusOptions {
    std::size_t n = 200;
    double normal_fraction = 0.6;
    double negation_probability = 0.15;
    std::size_t image_size = 64;
    double noise_stddev = 0.04;
    std::uint64_t seed = 1;
};

inline constexpr const char* kNormalLungSentence = "the lungs are clear . no acute findings .";

/// Deterministic in (options). Exactly round(n * normal_fraction) samples are
/// finding-free; the rest carry 1-3 findings of distinct categories.
Corpus generate_corpus(const CorpusOptions& options);

/// Report text for a set of findings and explicitly negated categories.
std::string render_report(const std::vector<Finding>& findings, const std::vector<std::size_t>& negated);

/// Short structured description of a sample's report content, e.g.
/// "moderate effusion left no edema". "normal" for finding-free samples.
std::string content_keywords(const Sample& sample);

/// Pixels (row-major indices) covered by a finding's pattern.
std::vector<std::size_t> finding_region(const Finding& finding, std::size_t image_size);

/// Every word the report templates can produce.
std::vector<std::string> report_vocabulary();

struct SplitRatios {
    double train = 0.7;
    double test = 0.1;
    double val = 0.2;
};

struct CorpusSplit {
    Corpus train;
    Corpus val;
    Corpus test;
};

/// Seeded shuffle then partition: round(n*train), round(n*test), remainder val.
CorpusSplit split_corpus(const Corpus& corpus, const SplitRatios& ratios, std::uint64_t seed);

class CorpusFormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Directory layout: manifest.json, records.jsonl, images.json + images.bin.
void save_corpus(const std::filesystem::path& dir, const Corpus& corpus);
Corpus load_corpus(const std::filesystem::path& dir);

/// `split.json` in a corpus directory: sample ids per split.
void save_split(const std::filesystem::path& dir, const CorpusSplit& split);
bool has_saved_split(const std::filesystem::path& dir);
CorpusSplit load_split(const std::filesystem::path& dir, const Corpus& corpus);

}  // namespace reportgen
