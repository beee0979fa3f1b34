// SPDX-License-Identifier: Apache-2.0

#include "reportgen/metrics.hpp"

#include "reportgen/data.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <set>
#include <stdexcept>

namespace reportgen {

Words metric_tokens(std::string_view text) {
    Words out;
    std::string cur;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isalnum(c) || c == '\'' || c >= 0x80) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) {
        out.push_back(std::move(cur));
    }
    return out;
}

EvalPair make_eval_pair(std::string_view candidate, std::string_view reference) {
    return {metric_tokens(candidate), {metric_tokens(reference)}};
}

namespace {

using NgramCounts = std::map<Words, std::size_t>;

NgramCounts ngrams(const Words& w, std::size_t n) {
    NgramCounts out;
    for (std::size_t i = 0; i + n <= w.size(); ++i) {
        ++out[Words(w.begin() + static_cast<std::ptrdiff_t>(i), w.begin() + static_cast<std::ptrdiff_t>(i + n))];
    }
    return out;
}

void check_pair(const EvalPair& p) {
    if (p.references.empty() ||
        std::all_of(p.references.begin(), p.references.end(), [](const Words& r) { return r.empty(); })) {
        throw std::invalid_argument("evaluation pair needs at least one nonempty reference");
    }
}

}  // namespace

double bleu(std::span<const EvalPair> pairs, int n) {
    if (n < 1 || n > 4) {
        throw std::invalid_argument(fmt::format("BLEU order must be 1..4, got {}", n));
    }
    std::vector<double> matched(static_cast<std::size_t>(n), 0.0), total(static_cast<std::size_t>(n), 0.0);
    double cand_len = 0.0, ref_len = 0.0;
    for (const auto& p : pairs) {
        check_pair(p);
        const auto c = p.candidate.size();
        // closest reference length, shorter wins a tie
        std::size_t best = p.references.front().size();
        for (const auto& r : p.references) {
            const auto d = r.size() > c ? r.size() - c : c - r.size();
            const auto bd = best > c ? best - c : c - best;
            if (d < bd || (d == bd && r.size() < best)) {
                best = r.size();
            }
        }
        cand_len += static_cast<double>(c);
        ref_len += static_cast<double>(best);
        for (int k = 1; k <= n; ++k) {
            const auto cand = ngrams(p.candidate, static_cast<std::size_t>(k));
            std::map<Words, std::size_t> max_ref;
            for (const auto& r : p.references) {
                for (const auto& [g, cnt] : ngrams(r, static_cast<std::size_t>(k))) {
                    max_ref[g] = std::max(max_ref[g], cnt);
                }
            }
            for (const auto& [g, cnt] : cand) {
                const auto it = max_ref.find(g);
                matched[static_cast<std::size_t>(k - 1)] +=
                    static_cast<double>(std::min(cnt, it == max_ref.end() ? std::size_t{0} : it->second));
                total[static_cast<std::size_t>(k - 1)] += static_cast<double>(cnt);
            }
        }
    }
    double log_sum = 0.0;
    for (int k = 0; k < n; ++k) {
        const auto ku = static_cast<std::size_t>(k);
        if (matched[ku] == 0.0 || total[ku] == 0.0) {
            return 0.0;
        }
        log_sum += std::log(matched[ku] / total[ku]);
    }
    const double bp = cand_len < ref_len ? std::exp(1.0 - ref_len / cand_len) : 1.0;
    return bp * std::exp(log_sum / n);
}

namespace {

std::size_t lcs(const Words& a, const Words& b) {
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

}  // namespace

double rouge_l(std::span<const EvalPair> pairs) {
    if (pairs.empty()) {
        return 0.0;
    }
    constexpr double beta2 = 1.2 * 1.2;
    double total = 0.0;
    for (const auto& p : pairs) {
        check_pair(p);
        double pmax = 0.0, rmax = 0.0;
        for (const auto& r : p.references) {
            const auto l = static_cast<double>(lcs(p.candidate, r));
            if (!p.candidate.empty()) {
                pmax = std::max(pmax, l / static_cast<double>(p.candidate.size()));
            }
            if (!r.empty()) {
                rmax = std::max(rmax, l / static_cast<double>(r.size()));
            }
        }
        if (pmax > 0.0 && rmax > 0.0) {
            total += (1.0 + beta2) * pmax * rmax / (rmax + beta2 * pmax);
        }
    }
    return total / static_cast<double>(pairs.size());
}

std::string stem(std::string_view word) {
    std::string w(word);
    for (std::string_view suffix : {"ities", "ness", "ing", "ies", "ed", "es", "ly", "s"}) {
        if (w.size() > suffix.size() + 2 && w.ends_with(suffix)) {
            w.resize(w.size() - suffix.size());
            if (suffix == "ies" || suffix == "ities") {
                w += suffix == "ies" ? "y" : "ity";
            }
            break;
        }
    }
    return w;
}

MeteorStats meteor_pair(const Words& candidate, const Words& reference) {
    MeteorStats st;
    if (candidate.empty() || reference.empty()) {
        return st;
    }
    std::vector<long> align(candidate.size(), -1);
    std::vector<bool> used(reference.size(), false);
    for (int stage = 0; stage < 2; ++stage) {
        auto key = [stage](const std::string& w) { return stage == 0 ? w : stem(w); };
        for (std::size_t i = 0; i < candidate.size(); ++i) {
            if (align[i] >= 0) {
                continue;
            }
            const auto k = key(candidate[i]);
            long pick = -1;
            if (i > 0 && align[i - 1] >= 0) {
                const auto j = static_cast<std::size_t>(align[i - 1] + 1);
                if (j < reference.size() && !used[j] && key(reference[j]) == k) {
                    pick = static_cast<long>(j);
                }
            }
            for (std::size_t j = 0; pick < 0 && j < reference.size(); ++j) {
                if (!used[j] && key(reference[j]) == k) {
                    pick = static_cast<long>(j);
                }
            }
            if (pick >= 0) {
                align[i] = pick;
                used[static_cast<std::size_t>(pick)] = true;
            }
        }
    }
    for (std::size_t i = 0; i < candidate.size(); ++i) {
        if (align[i] < 0) {
            continue;
        }
        ++st.matches;
        if (i == 0 || align[i - 1] < 0 || align[i] != align[i - 1] + 1) {
            ++st.chunks;
        }
    }
    if (st.matches == 0) {
        return st;
    }
    const double m = static_cast<double>(st.matches);
    const double p = m / static_cast<double>(candidate.size());
    const double r = m / static_cast<double>(reference.size());
    const double fmean = 10.0 * p * r / (r + 9.0 * p);
    const double penalty = 0.5 * std::pow(static_cast<double>(st.chunks) / m, 3.0);
    st.score = fmean * (1.0 - penalty);
    return st;
}

double meteor_simplified(std::span<const EvalPair> pairs) {
    if (pairs.empty()) {
        return 0.0;
    }
    double total = 0.0;
    for (const auto& p : pairs) {
        check_pair(p);
        double best = 0.0;
        for (const auto& r : p.references) {
            best = std::max(best, meteor_pair(p.candidate, r).score);
        }
        total += best;
    }
    return total / static_cast<double>(pairs.size());
}

namespace {

struct TfIdf {
    std::array<std::map<Words, double>, 4> vec;
    std::array<double, 4> norm{};
    std::size_t length = 0;
};

}  // namespace

double cider(std::span<const EvalPair> pairs, const CiderOptions& options, std::vector<std::string>* warnings) {
    if (pairs.empty()) {
        return 0.0;
    }
    std::array<std::map<Words, std::size_t>, 4> df;
    std::set<std::vector<Words>> distinct;
    for (const auto& p : pairs) {
        check_pair(p);
        distinct.insert(p.references);
        for (std::size_t n = 1; n <= 4; ++n) {
            std::set<Words> seen;
            for (const auto& r : p.references) {
                for (const auto& [g, c] : ngrams(r, n)) {
                    seen.insert(g);
                }
            }
            for (const auto& g : seen) {
                ++df[n - 1][g];
            }
        }
    }
    if (distinct.size() < 2 && warnings) {
        warnings->push_back("CIDEr: fewer than two distinct reference documents; idf weights are all zero");
    }
    const double log_n = std::log(static_cast<double>(pairs.size()));
    auto vectorize = [&](const Words& w) {
        TfIdf t;
        t.length = w.size();
        for (std::size_t n = 1; n <= 4; ++n) {
            for (const auto& [g, c] : ngrams(w, n)) {
                const auto it = df[n - 1].find(g);
                const double d = it == df[n - 1].end() ? 0.0 : static_cast<double>(it->second);
                const double v = static_cast<double>(c) * (log_n - std::log(std::max(1.0, d)));
                t.vec[n - 1][g] = v;
                t.norm[n - 1] += v * v;
            }
            t.norm[n - 1] = std::sqrt(t.norm[n - 1]);
        }
        return t;
    };
    double total = 0.0;
    for (const auto& p : pairs) {
        const auto cand = vectorize(p.candidate);
        std::array<double, 4> acc{};
        for (const auto& r : p.references) {
            const auto ref = vectorize(r);
            for (std::size_t n = 0; n < 4; ++n) {
                double dot = 0.0;
                for (const auto& [g, v] : cand.vec[n]) {
                    if (const auto it = ref.vec[n].find(g); it != ref.vec[n].end()) {
                        dot += (options.d_variant ? std::min(v, it->second) : v) * it->second;
                    }
                }
                double sim = cand.norm[n] > 0.0 && ref.norm[n] > 0.0 ? dot / (cand.norm[n] * ref.norm[n]) : 0.0;
                if (options.d_variant) {
                    const double delta = static_cast<double>(cand.length) - static_cast<double>(ref.length);
                    sim *= std::exp(-delta * delta / (2.0 * options.sigma * options.sigma));
                }
                acc[n] += sim;
            }
        }
        double score = 0.0;
        for (double a : acc) {
            score += a / static_cast<double>(p.references.size());
        }
        total += 10.0 * score / 4.0;
    }
    return total / static_cast<double>(pairs.size());
}

// --- clinical efficacy -------------------------------------------------------------

Lexicon Lexicon::standard() {
    Lexicon lx;
    for (auto c : kCategories) {
        lx.categories.emplace_back(c);
    }
    return lx;
}

namespace {

// Start positions of `phrase` inside `words`.
std::vector<std::size_t> find_phrase(const Words& words, const Words& phrase) {
    std::vector<std::size_t> out;
    if (phrase.empty() || phrase.size() > words.size()) {
        return out;
    }
    for (std::size_t i = 0; i + phrase.size() <= words.size(); ++i) {
        if (std::equal(phrase.begin(), phrase.end(), words.begin() + static_cast<std::ptrdiff_t>(i))) {
            out.push_back(i);
        }
    }
    return out;
}

}  // namespace

std::vector<FindingLabel> label_findings(std::string_view report, const Lexicon& lexicon) {
    if (lexicon.categories.empty()) {
        throw std::invalid_argument("label_findings: empty lexicon");
    }
    std::vector<FindingLabel> labels;
    for (const auto& c : lexicon.categories) {
        labels.push_back({c, LabelState::Absent});
    }
    std::vector<Words> cues;
    for (const auto& c : lexicon.negation_cues) {
        cues.push_back(metric_tokens(c));
    }
    std::size_t start = 0;
    while (start <= report.size()) {
        auto end = report.find_first_of(".!?\n", start);
        if (end == std::string_view::npos) {
            end = report.size();
        }
        const auto words = metric_tokens(report.substr(start, end - start));
        std::size_t first_cue = words.size();
        for (const auto& cue : cues) {
            const auto hits = find_phrase(words, cue);
            if (!hits.empty()) {
                first_cue = std::min(first_cue, hits.front());
            }
        }
        for (auto& label : labels) {
            for (auto pos : find_phrase(words, metric_tokens(label.category))) {
                const auto state = first_cue < pos ? LabelState::Negative : LabelState::Positive;
                label.state = std::max(label.state, state);
            }
        }
        start = end + 1;
    }
    return labels;
}

ClinicalScores clinical_counts(std::size_t tp, std::size_t fp, std::size_t fn) {
    ClinicalScores s;
    s.tp = tp;
    s.fp = fp;
    s.fn = fn;
    if (tp + fp == 0) {
        s.warnings.push_back("clinical efficacy: no predicted positives; precision set to 0");
    } else {
        s.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    }
    if (tp + fn > 0) {
        s.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
    }
    if (s.precision + s.recall > 0.0) {
        s.f1 = 2.0 * s.precision * s.recall / (s.precision + s.recall);
    }
    return s;
}

ClinicalScores clinical_efficacy(std::span<const std::vector<FindingLabel>> predicted,
                                 std::span<const std::vector<FindingLabel>> truth) {
    if (predicted.size() != truth.size()) {
        throw std::invalid_argument("clinical efficacy: prediction and truth counts differ");
    }
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        if (predicted[i].size() != truth[i].size()) {
            throw std::invalid_argument("clinical efficacy: category sets differ");
        }
        for (std::size_t c = 0; c < truth[i].size(); ++c) {
            if (predicted[i][c].category != truth[i][c].category) {
                throw std::invalid_argument("clinical efficacy: category sets differ");
            }
            const bool p = predicted[i][c].state == LabelState::Positive;
            const bool t = truth[i][c].state == LabelState::Positive;
            tp += p && t;
            fp += p && !t;
            fn += !p && t;
        }
    }
    return clinical_counts(tp, fp, fn);
}

// --- report -------------------------------------------------------------------------

std::string MetricReport::table() const {
    std::string s = fmt::format("{:<12} {:>8}\n", "metric", "score");
    auto row = [&s](std::string_view name, double v) { s += fmt::format("{:<12} {:>8.4f}\n", name, v); };
    for (int n = 0; n < 4; ++n) {
        row(fmt::format("BLEU-{}", n + 1), bleu[static_cast<std::size_t>(n)]);
    }
    row("METEOR", meteor);
    row("ROUGE-L", rouge_l);
    row("CIDEr", cider);
    row("CE-P", clinical.precision);
    row("CE-R", clinical.recall);
    row("CE-F1", clinical.f1);
    s += fmt::format("{:<12} {:>8}\n", "samples", samples);
    return s;
}

std::string MetricReport::key_values() const {
    std::string s;
    for (int n = 0; n < 4; ++n) {
        s += fmt::format("bleu{}={:.6f}\n", n + 1, bleu[static_cast<std::size_t>(n)]);
    }
    s += fmt::format("meteor={:.6f}\nrouge_l={:.6f}\ncider={:.6f}\n", meteor, rouge_l, cider);
    s += fmt::format("ce_precision={:.6f}\nce_recall={:.6f}\nce_f1={:.6f}\nsamples={}\n", clinical.precision,
                     clinical.recall, clinical.f1, samples);
    return s;
}

nlohmann::json MetricReport::to_json() const {
    return {{"bleu1", bleu[0]},
            {"bleu2", bleu[1]},
            {"bleu3", bleu[2]},
            {"bleu4", bleu[3]},
            {"meteor", meteor},
            {"rouge_l", rouge_l},
            {"cider", cider},
            {"ce_precision", clinical.precision},
            {"ce_recall", clinical.recall},
            {"ce_f1", clinical.f1},
            {"samples", samples}};
}

MetricReport evaluate_texts(std::span<const std::string> candidates, std::span<const std::string> references,
                            const Lexicon& lexicon) {
    if (candidates.size() != references.size()) {
        throw std::invalid_argument(
            fmt::format("evaluate: {} candidates for {} references", candidates.size(), references.size()));
    }
    std::vector<EvalPair> pairs;
    std::vector<std::vector<FindingLabel>> pred, truth;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        pairs.push_back(make_eval_pair(candidates[i], references[i]));
        pred.push_back(label_findings(candidates[i], lexicon));
        truth.push_back(label_findings(references[i], lexicon));
    }
    MetricReport r;
    r.samples = pairs.size();
    for (int n = 1; n <= 4; ++n) {
        r.bleu[static_cast<std::size_t>(n - 1)] = bleu(pairs, n);
    }
    r.meteor = meteor_simplified(pairs);
    r.rouge_l = rouge_l(pairs);
    r.cider = cider(pairs);
    r.clinical = clinical_efficacy(pred, truth);
    return r;
}

}  // namespace reportgen
