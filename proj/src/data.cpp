// SPDX-License-Identifier: Apache-2.0

#include "reportgen/data.hpp"

#include "reportgen/archive.hpp"
#include "reportgen/tokenizer.hpp"

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>

namespace reportgen {

namespace {

constexpr const char* kOpening = "the heart size is normal . the mediastinum is unremarkable .";
constexpr std::size_t kMaxSentences = 6;

enum class Band { Upper, Middle, Lower };
enum class Shape2 { Blob, Wide, Tall };

struct Pattern {
    Band band;
    Shape2 shape;
};

// One (band, shape) pair per category; no two categories share one.
constexpr std::array<Pattern, kCategories.size()> kPatterns = {{
    {Band::Upper, Shape2::Blob},   // opacity
    {Band::Lower, Shape2::Wide},   // effusion
    {Band::Middle, Shape2::Tall},  // edema
    {Band::Middle, Shape2::Blob},  // consolidation
    {Band::Lower, Shape2::Blob},   // atelectasis
    {Band::Upper, Shape2::Wide},   // pneumothorax
    {Band::Upper, Shape2::Tall},   // nodule
    {Band::Lower, Shape2::Tall},   // infiltrate
}};

constexpr std::array<double, 3> kAmplitude = {0.25, 0.45, 0.65};

struct Ellipse {
    double cx, cy, rx, ry;

    double q(double x, double y) const {
        const double dx = (x - cx) / rx, dy = (y - cy) / ry;
        return dx * dx + dy * dy;
    }
};

// Radiographic convention: the patient's left lung is on the viewer's right.
std::vector<double> field_centres(Location loc, double s) {
    switch (loc) {
        case Location::Left:
            return {0.69 * s};
        case Location::Right:
            return {0.31 * s};
        case Location::Bilateral:
            return {0.31 * s, 0.69 * s};
    }
    return {};
}

std::vector<Ellipse> finding_ellipses(const Finding& f, std::size_t image_size) {
    const double s = static_cast<double>(image_size);
    const auto& p = kPatterns.at(f.category);
    const double cy = p.band == Band::Upper ? 0.30 * s : p.band == Band::Middle ? 0.50 * s : 0.70 * s;
    double rx = 0.07 * s, ry = 0.07 * s;
    if (p.shape == Shape2::Wide) {
        rx = 0.13 * s;
        ry = 0.05 * s;
    } else if (p.shape == Shape2::Tall) {
        rx = 0.05 * s;
        ry = 0.11 * s;
    }
    std::vector<Ellipse> out;
    for (double cx : field_centres(f.location, s)) {
        out.push_back({cx, cy, rx, ry});
    }
    return out;
}

Tensor render_image(const std::vector<Finding>& findings, const CorpusOptions& opt, std::mt19937_64& rng) {
    const auto s = opt.image_size;
    const double sd = static_cast<double>(s);
    const Ellipse lungs[2] = {{0.31 * sd, 0.5 * sd, 0.17 * sd, 0.36 * sd}, {0.69 * sd, 0.5 * sd, 0.17 * sd, 0.36 * sd}};
    std::normal_distribution<double> noise(0.0, opt.noise_stddev);
    std::vector<double> px(s * s);
    for (std::size_t y = 0; y < s; ++y) {
        for (std::size_t x = 0; x < s; ++x) {
            const double fx = static_cast<double>(x) + 0.5, fy = static_cast<double>(y) + 0.5;
            const bool in_lung = lungs[0].q(fx, fy) <= 1.0 || lungs[1].q(fx, fy) <= 1.0;
            px[y * s + x] = in_lung ? 0.2 : 0.55;
        }
    }
    for (const auto& f : findings) {
        const double amp = kAmplitude.at(static_cast<std::size_t>(f.severity));
        for (const auto& e : finding_ellipses(f, s)) {
            for (std::size_t y = 0; y < s; ++y) {
                for (std::size_t x = 0; x < s; ++x) {
                    const double q = e.q(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5);
                    if (q <= 1.0) {
                        px[y * s + x] += amp * (1.0 - 0.5 * q);
                    }
                }
            }
        }
    }
    for (auto& v : px) {
        v = std::clamp(v + noise(rng), 0.0, 1.0);
    }
    return Tensor::from({1, s, s}, std::move(px));
}

std::uint64_t sample_seed(std::uint64_t seed, std::size_t index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index), 0x5eedU};
    std::array<std::uint32_t, 2> out{};
    seq.generate(out.begin(), out.end());
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

template <class Names>
std::size_t index_of(const Names& names, std::string_view name, std::size_t line) {
    const auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) {
        throw CorpusFormatError(fmt::format("records line {}: unknown value '{}'", line, name));
    }
    return static_cast<std::size_t>(it - names.begin());
}

}  // namespace

std::string render_report(const std::vector<Finding>& findings, const std::vector<std::size_t>& negated) {
    std::string report = kOpening;
    if (findings.empty()) {
        return report + " " + kNormalLungSentence;
    }
    for (const auto& f : findings) {
        report += fmt::format(" there is {} {} in the {} lung .", kSeverities.at(static_cast<std::size_t>(f.severity)),
                              f.category_name(), kLocations.at(static_cast<std::size_t>(f.location)));
    }
    for (auto c : negated) {
        report += fmt::format(" no {} .", kCategories.at(c));
    }
    return report;
}

std::string content_keywords(const Sample& sample) {
    if (sample.findings.empty()) {
        return "normal";
    }
    std::vector<std::string> words;
    for (const auto& f : sample.findings) {
        words.push_back(fmt::format("{} {} {}", kSeverities.at(static_cast<std::size_t>(f.severity)),
                                    f.category_name(), kLocations.at(static_cast<std::size_t>(f.location))));
    }
    for (auto c : sample.negated) {
        words.push_back(fmt::format("no {}", kCategories.at(c)));
    }
    return fmt::format("{}", fmt::join(words, " "));
}

std::vector<std::size_t> finding_region(const Finding& finding, std::size_t image_size) {
    std::vector<std::size_t> region;
    for (const auto& e : finding_ellipses(finding, image_size)) {
        for (std::size_t y = 0; y < image_size; ++y) {
            for (std::size_t x = 0; x < image_size; ++x) {
                if (e.q(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5) <= 1.0) {
                    region.push_back(y * image_size + x);
                }
            }
        }
    }
    std::sort(region.begin(), region.end());
    region.erase(std::unique(region.begin(), region.end()), region.end());
    return region;
}

std::vector<std::string> report_vocabulary() {
    std::vector<std::string> words;
    std::set<std::string> seen;
    const auto add = [&](std::string_view text) {
        for (auto& w : Tokenizer::split(text)) {
            if (seen.insert(w).second) {
                words.push_back(w);
            }
        }
    };
    add(kOpening);
    add(kNormalLungSentence);
    add("there is in the lung");
    for (auto w : kSeverities) {
        add(w);
    }
    for (auto w : kCategories) {
        add(w);
    }
    for (auto w : kLocations) {
        add(w);
    }
    return words;
}

Corpus generate_corpus(const CorpusOptions& options) {
    if (options.n == 0) {
        throw std::invalid_argument("generate_corpus: n must be at least 1");
    }
    if (!(options.normal_fraction >= 0.0 && options.normal_fraction <= 1.0)) {
        throw std::invalid_argument(
            fmt::format("generate_corpus: normal fraction {} is outside [0, 1]", options.normal_fraction));
    }
    if (!(options.negation_probability >= 0.0 && options.negation_probability <= 1.0)) {
        throw std::invalid_argument("generate_corpus: negation probability is outside [0, 1]");
    }
    const auto n_normal =
        static_cast<std::size_t>(std::llround(static_cast<double>(options.n) * options.normal_fraction));
    std::vector<std::size_t> order(options.n);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuffle_rng(sample_seed(options.seed, options.n + 1));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    std::vector<bool> is_normal(options.n, false);
    for (std::size_t i = 0; i < n_normal; ++i) {
        is_normal[order[i]] = true;
    }

    Corpus corpus(options.n);
    for (std::size_t i = 0; i < options.n; ++i) {
        std::mt19937_64 rng(sample_seed(options.seed, i));
        Sample& s = corpus[i];
        s.id = fmt::format("s{:05d}", i);
        if (!is_normal[i]) {
            const auto count = std::uniform_int_distribution<std::size_t>(1, 3)(rng);
            std::vector<std::size_t> cats(kCategories.size());
            std::iota(cats.begin(), cats.end(), 0);
            std::shuffle(cats.begin(), cats.end(), rng);
            cats.resize(count);
            std::sort(cats.begin(), cats.end());
            for (auto c : cats) {
                Finding f;
                f.category = c;
                f.location = static_cast<Location>(std::uniform_int_distribution<int>(0, 2)(rng));
                f.severity = static_cast<Severity>(std::uniform_int_distribution<int>(0, 2)(rng));
                s.findings.push_back(f);
            }
            std::bernoulli_distribution negate(options.negation_probability);
            // Two opening sentences plus one per finding, capped in total.
            std::size_t budget = kMaxSentences - 2 - s.findings.size();
            for (std::size_t c = 0; c < kCategories.size(); ++c) {
                const bool present = std::binary_search(cats.begin(), cats.end(), c);
                if (!present && negate(rng) && budget > 0) {
                    s.negated.push_back(c);
                    --budget;
                }
            }
        }
        s.report = render_report(s.findings, s.negated);
        s.image = render_image(s.findings, options, rng);
    }
    return corpus;
}

CorpusSplit split_corpus(const Corpus& corpus, const SplitRatios& ratios, std::uint64_t seed) {
    const double total = ratios.train + ratios.test + ratios.val;
    if (ratios.train < 0 || ratios.test < 0 || ratios.val < 0 || std::abs(total - 1.0) > 1e-9) {
        throw std::invalid_argument(fmt::format("split: ratios {}/{}/{} must be non-negative and sum to 1",
                                                ratios.train, ratios.test, ratios.val));
    }
    const auto n = corpus.size();
    const auto n_train = static_cast<std::size_t>(std::llround(static_cast<double>(n) * ratios.train));
    const auto n_test = static_cast<std::size_t>(std::llround(static_cast<double>(n) * ratios.test));
    if (n_train == 0 || n_test == 0 || n_train + n_test >= n) {
        throw std::invalid_argument(
            fmt::format("split: ratios {}/{}/{} leave an empty split for {} samples", ratios.train, ratios.test,
                        ratios.val, n));
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    CorpusSplit out;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& s = corpus[order[i]];
        if (i < n_train) {
            out.train.push_back(s);
        } else if (i < n_train + n_test) {
            out.test.push_back(s);
        } else {
            out.val.push_back(s);
        }
    }
    return out;
}

void save_corpus(const std::filesystem::path& dir, const Corpus& corpus) {
    std::filesystem::create_directories(dir);
    NamedTensors images;
    std::ofstream records(dir / "records.jsonl", std::ios::trunc);
    for (const auto& s : corpus) {
        nlohmann::json findings = nlohmann::json::array();
        for (const auto& f : s.findings) {
            findings.push_back({{"category", f.category_name()},
                                {"location", kLocations.at(static_cast<std::size_t>(f.location))},
                                {"severity", kSeverities.at(static_cast<std::size_t>(f.severity))}});
        }
        nlohmann::json negated = nlohmann::json::array();
        for (auto c : s.negated) {
            negated.push_back(kCategories.at(c));
        }
        nlohmann::json rec = {{"id", s.id},
                              {"report", s.report},
                              {"findings", findings},
                              {"negated", negated},
                              {"image", s.id}};
        records << rec.dump() << '\n';
        images.emplace_back(s.id, s.image);
    }
    if (!records) {
        throw CorpusFormatError(fmt::format("failed writing {}", (dir / "records.jsonl").string()));
    }
    save_archive(dir / "images", images);
    const Shape image_shape = corpus.empty() ? Shape{} : corpus.front().image.shape();
    nlohmann::json manifest = {{"format", "reportgen-corpus"},
                               {"version", 1},
                               {"count", corpus.size()},
                               {"records", "records.jsonl"},
                               {"images", "images"},
                               {"image_shape", image_shape}};
    std::ofstream(dir / "manifest.json", std::ios::trunc) << manifest.dump(2) << '\n';
}

Corpus load_corpus(const std::filesystem::path& dir) {
    std::ifstream mf(dir / "manifest.json");
    if (!mf) {
        throw CorpusFormatError(fmt::format("no corpus manifest in {}", dir.string()));
    }
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(mf);
    } catch (const nlohmann::json::exception& e) {
        throw CorpusFormatError(fmt::format("malformed corpus manifest: {}", e.what()));
    }
    Archive images;
    try {
        images = load_archive(dir / manifest.value("images", "images"));
    } catch (const ArchiveError& e) {
        throw CorpusFormatError(fmt::format("image archive: {}", e.what()));
    }
    std::ifstream records(dir / manifest.value("records", "records.jsonl"));
    if (!records) {
        throw CorpusFormatError(fmt::format("no records file in {}", dir.string()));
    }
    Corpus corpus;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(records, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        Sample s;
        try {
            const auto rec = nlohmann::json::parse(line);
            s.id = rec.at("id").get<std::string>();
            s.report = rec.at("report").get<std::string>();
            for (const auto& f : rec.at("findings")) {
                Finding finding;
                finding.category = index_of(kCategories, f.at("category").get<std::string>(), line_no);
                finding.location =
                    static_cast<Location>(index_of(kLocations, f.at("location").get<std::string>(), line_no));
                finding.severity =
                    static_cast<Severity>(index_of(kSeverities, f.at("severity").get<std::string>(), line_no));
                s.findings.push_back(finding);
            }
            for (const auto& c : rec.value("negated", nlohmann::json::array())) {
                s.negated.push_back(index_of(kCategories, c.get<std::string>(), line_no));
            }
            const auto ref = rec.at("image").get<std::string>();
            if (!images.contains(ref)) {
                throw CorpusFormatError(fmt::format("records line {}: image '{}' missing from archive", line_no, ref));
            }
            s.image = images.get(ref);
        } catch (const nlohmann::json::exception& e) {
            throw CorpusFormatError(fmt::format("records line {}: {}", line_no, e.what()));
        }
        corpus.push_back(std::move(s));
    }
    if (manifest.contains("count") && manifest["count"].get<std::size_t>() != corpus.size()) {
        throw CorpusFormatError(fmt::format("manifest lists {} samples but records hold {}",
                                            manifest["count"].get<std::size_t>(), corpus.size()));
    }
    return corpus;
}

void save_split(const std::filesystem::path& dir, const CorpusSplit& split) {
    auto ids = [](const Corpus& part) {
        nlohmann::json out = nlohmann::json::array();
        for (const auto& s : part) {
            out.push_back(s.id);
        }
        return out;
    };
    const nlohmann::json j = {{"train", ids(split.train)}, {"val", ids(split.val)}, {"test", ids(split.test)}};
    std::ofstream(dir / "split.json", std::ios::trunc) << j.dump() << '\n';
}

bool has_saved_split(const std::filesystem::path& dir) {
    return std::filesystem::exists(dir / "split.json");
}

CorpusSplit load_split(const std::filesystem::path& dir, const Corpus& corpus) {
    std::ifstream in(dir / "split.json");
    if (!in) {
        throw CorpusFormatError(fmt::format("no split.json in {}", dir.string()));
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw CorpusFormatError(fmt::format("malformed split.json: {}", e.what()));
    }
    std::map<std::string, const Sample*> by_id;
    for (const auto& s : corpus) {
        by_id[s.id] = &s;
    }
    auto pick = [&](const char* name) {
        Corpus part;
        for (const auto& id : j.at(name)) {
            const auto it = by_id.find(id.get<std::string>());
            if (it == by_id.end()) {
                throw CorpusFormatError(fmt::format("split.json: {} id '{}' is not in the corpus", name,
                                                    id.get<std::string>()));
            }
            part.push_back(*it->second);
        }
        return part;
    };
    return {pick("train"), pick("val"), pick("test")};
}

}  // namespace reportgen
