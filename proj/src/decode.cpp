// SPDX-License-Identifier: Apache-2.0

#include "reportgen/decode.hpp"

#include "reportgen/trainer.hpp"

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

namespace reportgen {

void DecodeOptions::validate() const {
    if (beam_size < 1) {
        throw ConfigError("beam size must be >= 1");
    }
    if (max_len < 1) {
        throw ConfigError("max_len must be >= 1");
    }
}

double length_normalized(double log_prob, std::size_t length, double penalty) {
    if (penalty == 0.0 || length == 0) {
        return log_prob;
    }
    return log_prob / std::pow(static_cast<double>(length), penalty);
}

std::vector<double> log_softmax(std::span<const double> logits) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double x : logits) {
        z += std::exp(x - mx);
    }
    const double lz = mx + std::log(z);
    std::vector<double> out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = logits[i] - lz;
    }
    return out;
}

namespace {

std::vector<bool> allowed_mask(std::size_t vocab, const DecodeOptions& options) {
    std::vector<bool> allowed(vocab, true);
    for (auto t : options.banned) {
        if (t >= 0 && static_cast<std::size_t>(t) < vocab) {
            allowed[static_cast<std::size_t>(t)] = false;
        }
    }
    return allowed;
}

void finalize(Hypothesis& h, const DecodeOptions& options) {
    h.score = length_normalized(h.log_prob, h.length(), options.length_penalty);
}

}  // namespace

Hypothesis greedy(Scorer& scorer, const DecodeOptions& options) {
    options.validate();
    const auto allowed = allowed_mask(scorer.vocab_size(), options);
    Hypothesis h;
    while (h.length() < options.max_len) {
        const auto lp = log_softmax(scorer.logits(h.tokens));
        std::size_t best = lp.size();
        for (std::size_t v = 0; v < lp.size(); ++v) {
            if (allowed[v] && (best == lp.size() || lp[v] > lp[best])) {
                best = v;
            }
        }
        if (best == lp.size()) {
            throw ConfigError("every token is banned");
        }
        h.log_prob += lp[best];
        if (static_cast<TokenId>(best) == options.eos) {
            h.finished = true;
            break;
        }
        h.tokens.push_back(static_cast<TokenId>(best));
    }
    finalize(h, options);
    return h;
}

std::vector<Hypothesis> beam_search(Scorer& scorer, const DecodeOptions& options) {
    options.validate();
    const auto allowed = allowed_mask(scorer.vocab_size(), options);
    // Lexicographic order on (tokens, finished) gives a total, id-based tie-break.
    auto better = [](const Hypothesis& a, const Hypothesis& b) {
        if (a.log_prob != b.log_prob) {
            return a.log_prob > b.log_prob;
        }
        if (a.tokens != b.tokens) {
            return a.tokens < b.tokens;
        }
        return a.finished && !b.finished;
    };
    std::vector<Hypothesis> beams(1);
    for (std::size_t step = 0; step < options.max_len; ++step) {
        if (std::all_of(beams.begin(), beams.end(), [](const Hypothesis& h) { return h.finished; })) {
            break;
        }
        std::vector<Hypothesis> pool;
        for (const auto& b : beams) {
            if (b.finished) {
                pool.push_back(b);
                continue;
            }
            const auto lp = log_softmax(scorer.logits(b.tokens));
            for (std::size_t v = 0; v < lp.size(); ++v) {
                if (!allowed[v]) {
                    continue;
                }
                Hypothesis next = b;
                next.log_prob += lp[v];
                if (static_cast<TokenId>(v) == options.eos) {
                    next.finished = true;
                } else {
                    next.tokens.push_back(static_cast<TokenId>(v));
                }
                pool.push_back(std::move(next));
            }
        }
        const auto keep = std::min(options.beam_size, pool.size());
        std::partial_sort(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(keep), pool.end(), better);
        pool.resize(keep);
        beams = std::move(pool);
    }
    for (auto& h : beams) {
        finalize(h, options);
    }
    std::stable_sort(beams.begin(), beams.end(), [&](const Hypothesis& a, const Hypothesis& b) {
        if (a.score != b.score) {
            return a.score > b.score;
        }
        return better(a, b);
    });
    return beams;
}

// --- model scorer -------------------------------------------------------------------

ModelScorer::ModelScorer(const ReportModel& model, const Tensor& image) : model_(model) {
    NoGradGuard guard;
    const auto seq = model.sequence(image, std::nullopt);
    prompt_len_ = seq.length();
    State root;
    root.logits = model.lm.prefill(root.cache, seq.embeddings);
    states_.emplace(std::vector<TokenId>{}, std::move(root));
}

std::size_t ModelScorer::vocab_size() const {
    return model_.tokenizer.size();
}

std::size_t ModelScorer::room() const {
    return model_.lm.config().max_seq_len - prompt_len_;
}

std::vector<double> ModelScorer::logits(std::span<const TokenId> generated) {
    std::vector<TokenId> key(generated.begin(), generated.end());
    if (auto it = states_.find(key); it != states_.end()) {
        return it->second.logits;
    }
    if (key.empty()) {
        throw std::logic_error("model scorer lost its prompt state");
    }
    const TokenId last = key.back();
    key.pop_back();
    logits(key);  // materialise the parent
    State child{states_.at(key).cache, {}};
    NoGradGuard guard;
    const TokenId ids[1] = {last};
    const Tensor emb = model_.lm.embed_tokens(ids);
    child.logits = model_.lm.step(child.cache, emb.data());
    key.push_back(last);
    return states_.emplace(std::move(key), std::move(child)).first->second.logits;
}

DecodeOptions model_decode_options(const ReportModel& model, std::size_t beam_size, std::size_t max_len) {
    const auto& tok = model.tokenizer;
    DecodeOptions o;
    o.beam_size = beam_size;
    o.max_len = max_len;
    o.eos = tok.eos_id();
    o.banned = {tok.pad_id(), tok.bos_id(), tok.image_open_id(), tok.image_close_id(), tok.unknown_id()};
    return o;
}

Generation generate(const ReportModel& model, const Sample& sample, const DecodeOptions& options) {
    ModelScorer scorer(model, sample.image);
    DecodeOptions o = options;
    o.max_len = std::min(o.max_len, scorer.room());
    const auto best = o.beam_size == 1 ? greedy(scorer, o) : beam_search(scorer, o).front();
    return {sample.id, model.tokenizer.decode(best.tokens), best.score};
}

std::vector<Generation> generate_all(const ReportModel& model, std::span<const Sample> samples,
                                     const DecodeOptions& options) {
    std::vector<Generation> out;
    out.reserve(samples.size());
    for (const auto& s : samples) {
        out.push_back(generate(model, s, options));
    }
    return out;
}

void write_generations(const std::filesystem::path& path, std::span<const Generation> generations) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error(fmt::format("cannot write generations to {}", path.string()));
    }
    for (const auto& g : generations) {
        // fixed precision keeps the file byte-stable across runs
        out << nlohmann::json{{"id", g.id}, {"text", g.text}, {"score", std::round(g.score * 1e9) / 1e9}}.dump()
            << '\n';
    }
}

std::vector<Generation> read_generations(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error(fmt::format("cannot read generations from {}", path.string()));
    }
    std::vector<Generation> out;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty()) {
            continue;
        }
        try {
            const auto j = nlohmann::json::parse(line);
            out.push_back({j.at("id"), j.at("text"), j.value("score", 0.0)});
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error(fmt::format("{}:{}: {}", path.string(), n, e.what()));
        }
    }
    return out;
}

}  // namespace reportgen
