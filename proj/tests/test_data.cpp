// SPDX-License-Identifier: Apache-2.0

#include "reportgen/data.hpp"
#include "reportgen/metrics.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

using namespace reportgen;
namespace fs = std::filesystem;

namespace {

CorpusOptions small(std::size_t n = 40, std::uint64_t seed = 3) {
    CorpusOptions o;
    o.n = n;
    o.seed = seed;
    return o;
}

fs::path scratch_dir(const std::string& name) {
    auto d = fs::temp_directory_path() / ("reportgen_test_" + name);
    fs::remove_all(d);
    return d;
}

double region_mean(const Tensor& image, const std::vector<std::size_t>& region) {
    double s = 0.0;
    for (auto i : region) {
        s += image.data()[i];
    }
    return s / static_cast<double>(region.size());
}

}  // namespace

TEST_CASE("generation is deterministic in the options") {
    const auto a = generate_corpus(small());
    const auto b = generate_corpus(small());
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].id == b[i].id);
        CHECK(a[i].report == b[i].report);
        CHECK(a[i].findings == b[i].findings);
        CHECK(std::equal(a[i].image.data().begin(), a[i].image.data().end(), b[i].image.data().begin()));
    }
    const auto c = generate_corpus(small(40, 4));
    bool differs = false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        differs |= a[i].report != c[i].report;
    }
    CHECK(differs);
}

TEST_CASE("normal fraction is exact and findings are well formed") {
    auto o = small(50);
    o.normal_fraction = 0.3;
    const auto corpus = generate_corpus(o);
    const auto normals = std::count_if(corpus.begin(), corpus.end(), [](const Sample& s) { return s.findings.empty(); });
    CHECK(normals == 15);
    std::set<std::string> ids;
    for (const auto& s : corpus) {
        ids.insert(s.id);
        CHECK(s.image.shape() == Shape{1, 64, 64});
        CHECK(std::all_of(s.image.data().begin(), s.image.data().end(), [](double v) { return v >= 0.0 && v <= 1.0; }));
        CHECK(s.findings.size() <= 3);
        for (std::size_t i = 1; i < s.findings.size(); ++i) {
            CHECK(s.findings[i - 1].category < s.findings[i].category);
        }
        if (s.findings.empty()) {
            CHECK(s.report.find(kNormalLungSentence) != std::string::npos);
        }
    }
    CHECK(ids.size() == corpus.size());
    o.normal_fraction = 1.0;
    const auto all_normal = generate_corpus(o);
    CHECK(std::all_of(all_normal.begin(), all_normal.end(), [](const Sample& s) { return s.findings.empty(); }));
}

TEST_CASE("invalid generation options are rejected") {
    auto o = small();
    o.n = 0;
    CHECK_THROWS(generate_corpus(o));
    o = small();
    o.normal_fraction = 1.5;
    CHECK_THROWS(generate_corpus(o));
    o = small();
    o.negation_probability = -0.1;
    CHECK_THROWS(generate_corpus(o));
}

TEST_CASE("the rule-based labeler recovers the ground truth of every report") {
    auto o = small(200, 9);
    o.negation_probability = 0.5;
    const auto lexicon = Lexicon::standard();
    for (const auto& s : generate_corpus(o)) {
        const auto labels = label_findings(s.report, lexicon);
        for (std::size_t c = 0; c < kCategories.size(); ++c) {
            const bool positive = std::any_of(s.findings.begin(), s.findings.end(),
                                              [&](const Finding& f) { return f.category == c; });
            const bool negated = std::find(s.negated.begin(), s.negated.end(), c) != s.negated.end();
            const auto expected = positive ? LabelState::Positive : negated ? LabelState::Negative : LabelState::Absent;
            const auto it = std::find_if(labels.begin(), labels.end(),
                                         [&](const FindingLabel& l) { return l.category == kCategories[c]; });
            REQUIRE(it != labels.end());
            CHECK(it->state == expected);
        }
    }
}

TEST_CASE("report words come from the vocabulary") {
    const auto vocab = report_vocabulary();
    const std::set<std::string> words(vocab.begin(), vocab.end());
    for (const auto& s : generate_corpus(small(100, 5))) {
        std::string w;
        std::istringstream in(s.report);
        while (in >> w) {
            CHECK(words.count(w) == 1);
        }
    }
}

TEST_CASE("finding regions are brighter than the same pixels on normal images") {
    auto o = small(300, 11);
    o.normal_fraction = 0.5;
    const auto corpus = generate_corpus(o);
    std::vector<const Sample*> normals;
    for (const auto& s : corpus) {
        if (s.findings.empty()) {
            normals.push_back(&s);
        }
    }
    std::size_t checked = 0;
    for (const auto& s : corpus) {
        for (const auto& f : s.findings) {
            const auto region = finding_region(f, 64);
            REQUIRE_FALSE(region.empty());
            double mean = 0.0, sq = 0.0;
            for (const auto* n : normals) {
                const double m = region_mean(n->image, region);
                mean += m;
                sq += m * m;
            }
            mean /= static_cast<double>(normals.size());
            const double sd = std::sqrt(sq / static_cast<double>(normals.size()) - mean * mean);
            CHECK(region_mean(s.image, region) > mean + 3.0 * sd);
            ++checked;
        }
        if (checked > 40) {
            break;
        }
    }
    CHECK(checked > 40);
}

TEST_CASE("split sizes follow the ratios and are disjoint") {
    const auto corpus = generate_corpus(small(100));
    const auto s = split_corpus(corpus, SplitRatios{}, 7);
    CHECK(s.train.size() == 70);
    CHECK(s.test.size() == 10);
    CHECK(s.val.size() == 20);
    std::set<std::string> seen;
    for (const auto* part : {&s.train, &s.val, &s.test}) {
        for (const auto& x : *part) {
            CHECK(seen.insert(x.id).second);
        }
    }
    CHECK(seen.size() == 100);
    const auto again = split_corpus(corpus, SplitRatios{}, 7);
    CHECK(again.test.front().id == s.test.front().id);
}

TEST_CASE("degenerate split ratios are rejected") {
    const auto corpus = generate_corpus(small(20));
    CHECK_THROWS(split_corpus(corpus, SplitRatios{1.0, 0.0, 0.0}, 1));
    CHECK_THROWS(split_corpus(corpus, SplitRatios{0.5, 0.2, 0.2}, 1));
    CHECK_THROWS(split_corpus(corpus, SplitRatios{1.2, -0.1, -0.1}, 1));
}

TEST_CASE("corpus and split round-trip through disk") {
    const auto dir = scratch_dir("roundtrip");
    const auto corpus = generate_corpus(small(12));
    save_corpus(dir, corpus);
    const auto back = load_corpus(dir);
    REQUIRE(back.size() == corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        CHECK(back[i].id == corpus[i].id);
        CHECK(back[i].report == corpus[i].report);
        CHECK(back[i].findings == corpus[i].findings);
        CHECK(back[i].negated == corpus[i].negated);
        CHECK(std::equal(back[i].image.data().begin(), back[i].image.data().end(), corpus[i].image.data().begin()));
    }
    CHECK_FALSE(has_saved_split(dir));
    const auto split = split_corpus(corpus, SplitRatios{0.5, 0.25, 0.25}, 2);
    save_split(dir, split);
    REQUIRE(has_saved_split(dir));
    const auto loaded = load_split(dir, back);
    CHECK(loaded.train.size() == split.train.size());
    CHECK(loaded.val.front().id == split.val.front().id);
    fs::remove_all(dir);
}

TEST_CASE("a truncated image payload is reported") {
    const auto dir = scratch_dir("truncated");
    save_corpus(dir, generate_corpus(small(4)));
    fs::resize_file(dir / "images.bin", fs::file_size(dir / "images.bin") / 2);
    CHECK_THROWS_AS(load_corpus(dir), CorpusFormatError);
    fs::remove_all(dir);
}

TEST_CASE("malformed records name the offending line") {
    const auto dir = scratch_dir("malformed");
    save_corpus(dir, generate_corpus(small(4)));
    std::vector<std::string> lines;
    {
        std::ifstream in(dir / "records.jsonl");
        for (std::string l; std::getline(in, l);) {
            lines.push_back(l);
        }
    }
    lines[2] = "{\"id\": 3";
    {
        std::ofstream out(dir / "records.jsonl", std::ios::trunc);
        for (const auto& l : lines) {
            out << l << '\n';
        }
    }
    CHECK_THROWS_WITH_AS(load_corpus(dir), doctest::Contains("records line 3"), CorpusFormatError);
    CHECK_THROWS_AS(load_corpus(dir / "missing"), CorpusFormatError);
    fs::remove_all(dir);
}

TEST_CASE("content keywords summarise the report") {
    Sample s;
    CHECK(content_keywords(s) == "normal");
    s.findings = {Finding{1, Location::Left, Severity::Moderate}};
    s.negated = {2};
    CHECK(content_keywords(s) == "moderate effusion left no edema");
}
