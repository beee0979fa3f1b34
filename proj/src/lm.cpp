// SPDX-License-Identifier: Apache-2.0

#include "reportgen/lm.hpp"

#include <Eigen/Core>
#include <fmt/format.h>

#include <cmath>

namespace reportgen {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatMap = Eigen::Map<const RowMatrix>;
using Vec = Eigen::VectorXd;

ConstMatMap weight_map(const Tensor& w) {
    return ConstMatMap(w.data().data(), static_cast<Eigen::Index>(w.dim(0)), static_cast<Eigen::Index>(w.dim(1)));
}

Eigen::Map<const Vec> vec_map(const Tensor& t) {
    return Eigen::Map<const Vec>(t.data().data(), static_cast<Eigen::Index>(t.numel()));
}

Vec apply_linear(const Linear& l, const Vec& x) {
    Vec y = weight_map(l.weight) * x;
    if (l.bias.defined()) {
        y += vec_map(l.bias);
    }
    return y;
}

Vec apply_norm(const LayerNorm& n, const Vec& x) {
    const double mu = x.mean();
    const double var = (x.array() - mu).square().mean();
    const double rstd = 1.0 / std::sqrt(var + 1e-5);
    return ((x.array() - mu) * rstd * vec_map(n.gamma).array() + vec_map(n.beta).array()).matrix();
}

}  // namespace

void LMConfig::validate() const {
    if (num_heads == 0 || d_model % num_heads != 0) {
        throw DimensionError(fmt::format("lm: d_model {} is not divisible by {} heads", d_model, num_heads));
    }
    if (vocab_size == 0 || max_seq_len == 0 || num_layers == 0 || mlp_ratio == 0) {
        throw DimensionError("lm: vocab size, max length, layers and mlp ratio must be positive");
    }
}

LanguageModel LanguageModel::create(const LMConfig& config, std::mt19937_64& rng) {
    config.validate();
    LanguageModel lm;
    lm.config_ = config;
    lm.token_embed_ = truncated_normal({config.vocab_size, config.d_model}, 0.02, rng);
    lm.pos_embed_ = truncated_normal({config.max_seq_len, config.d_model}, 0.02, rng);
    for (std::size_t i = 0; i < config.num_layers; ++i) {
        lm.layers_.push_back(TransformerBlock::create(config.d_model, config.num_heads, config.mlp_ratio, true, rng));
    }
    lm.final_norm_ = LayerNorm::create(config.d_model);
    return lm;
}

Tensor LanguageModel::embed_tokens(std::span<const TokenId> ids) const {
    return embedding(token_embed_, ids);
}

Tensor LanguageModel::forward(const Tensor& embeddings) const {
    if (embeddings.rank() != 2 || embeddings.dim(1) != config_.d_model) {
        throw DimensionError(fmt::format("lm: embeddings {} do not have width {}", shape_str(embeddings.shape()),
                                         config_.d_model));
    }
    const auto t = embeddings.dim(0);
    if (t > config_.max_seq_len) {
        throw LengthError(fmt::format("lm: sequence of {} positions exceeds the maximum of {}", t, config_.max_seq_len));
    }
    auto x = add(embeddings, slice_rows(pos_embed_, 0, t));
    for (const auto& block : layers_) {
        x = block.forward(x);
    }
    return linear(final_norm_.forward(x), token_embed_);
}

std::vector<double> LanguageModel::step(LmCache& cache, std::span<const double> embedding) const {
    const auto d = config_.d_model;
    if (embedding.size() != d) {
        throw DimensionError(fmt::format("lm: step embedding has {} values, expected {}", embedding.size(), d));
    }
    const auto p = cache.length_;
    if (p >= config_.max_seq_len) {
        throw LengthError(fmt::format("lm: position {} exceeds the maximum of {}", p, config_.max_seq_len));
    }
    if (cache.keys_.empty()) {
        cache.keys_.resize(layers_.size());
        cache.values_.resize(layers_.size());
    }
    Vec x = Eigen::Map<const Vec>(embedding.data(), static_cast<Eigen::Index>(d));
    x += Eigen::Map<const Vec>(pos_embed_.data().data() + p * d, static_cast<Eigen::Index>(d));

    for (std::size_t li = 0; li < layers_.size(); ++li) {
        const auto& block = layers_[li];
        const Vec h = apply_norm(block.norm1, x);
        const Vec q = apply_linear(block.query, h);
        const Vec k = apply_linear(block.key, h);
        const Vec v = apply_linear(block.value, h);
        auto& keys = cache.keys_[li];
        auto& values = cache.values_[li];
        keys.insert(keys.end(), k.data(), k.data() + d);
        values.insert(values.end(), v.data(), v.data() + d);

        const auto heads = block.num_heads;
        const auto dh = d / heads;
        const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
        Vec attended = Vec::Zero(static_cast<Eigen::Index>(d));
        std::vector<double> scores(p + 1);
        for (std::size_t hd = 0; hd < heads; ++hd) {
            double peak = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j <= p; ++j) {
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) {
                    s += q[static_cast<Eigen::Index>(hd * dh + c)] * keys[j * d + hd * dh + c];
                }
                scores[j] = s * inv_scale;
                peak = std::max(peak, scores[j]);
            }
            double total = 0.0;
            for (std::size_t j = 0; j <= p; ++j) {
                scores[j] = std::exp(scores[j] - peak);
                total += scores[j];
            }
            for (std::size_t j = 0; j <= p; ++j) {
                const double w = scores[j] / total;
                for (std::size_t c = 0; c < dh; ++c) {
                    attended[static_cast<Eigen::Index>(hd * dh + c)] += w * values[j * d + hd * dh + c];
                }
            }
        }
        x += apply_linear(block.output, attended);
        Vec u = apply_linear(block.mlp_up, apply_norm(block.norm2, x));
        for (auto& e : u) {
            e = 0.5 * e * (1.0 + std::erf(e / std::sqrt(2.0)));
        }
        x += apply_linear(block.mlp_down, u);
    }
    cache.length_ = p + 1;
    const Vec logits = weight_map(token_embed_) * apply_norm(final_norm_, x);
    return {logits.data(), logits.data() + logits.size()};
}

std::vector<double> LanguageModel::prefill(LmCache& cache, const Tensor& embeddings) const {
    std::vector<double> logits;
    const auto d = config_.d_model;
    for (std::size_t r = 0; r < embeddings.dim(0); ++r) {
        logits = step(cache, embeddings.data().subspan(r * d, d));
    }
    return logits;
}

void LanguageModel::visit(const ParamVisitor& fn) {
    fn("lm.token_embed", token_embed_);
    fn("lm.pos_embed", pos_embed_);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        layers_[i].visit(fmt::format("lm.layer{}", i), fn);
    }
    final_norm_.visit("lm.final_norm", fn);
}

// --- prompts --------------------------------------------------------------

std::vector<TokenId> PromptTemplate::prefix_ids(const Tokenizer& tokenizer) const {
    std::vector<TokenId> ids{tokenizer.bos_id()};
    const auto rest = tokenizer.encode(before_image);
    ids.insert(ids.end(), rest.begin(), rest.end());
    return ids;
}

std::vector<TokenId> PromptTemplate::suffix_ids(const Tokenizer& tokenizer) const {
    std::string text = after_image;
    const std::string key = "{instruction}";
    if (const auto pos = text.find(key); pos != std::string::npos) {
        text.replace(pos, key.size(), instruction);
    }
    return tokenizer.encode(text);
}

std::size_t PromptSequence::included() const {
    return static_cast<std::size_t>(std::count(loss_mask.begin(), loss_mask.end(), true));
}

std::vector<std::int64_t> PromptSequence::serialized_labels() const {
    std::vector<std::int64_t> labels(target_ids.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        labels[i] = loss_mask[i] ? target_ids[i] : kIgnoreLabel;
    }
    return labels;
}

PromptSequence assemble_prompt(const LanguageModel& lm, const Tokenizer& tokenizer, const PromptTemplate& prompt,
                               const Tensor& visual_tokens, std::optional<std::vector<TokenId>> report_ids) {
    if (prompt.instruction.empty()) {
        throw std::invalid_argument("assemble_prompt: instruction must not be empty");
    }
    const auto d = lm.config().d_model;
    if (visual_tokens.rank() != 2 || visual_tokens.dim(1) != d) {
        throw DimensionError(fmt::format("assemble_prompt: visual tokens {} do not have width {}",
                                         shape_str(visual_tokens.shape()), d));
    }
    const auto prefix = prompt.prefix_ids(tokenizer);
    auto suffix = prompt.suffix_ids(tokenizer);
    const auto n_visual = visual_tokens.dim(0);
    std::size_t n_report = 0;
    if (report_ids) {
        report_ids->push_back(tokenizer.eos_id());
        n_report = report_ids->size();
    }
    const auto total = prefix.size() + n_visual + suffix.size() + n_report;
    if (total > lm.config().max_seq_len) {
        throw LengthError(fmt::format("assemble_prompt: sequence of {} positions exceeds the maximum of {}", total,
                                      lm.config().max_seq_len));
    }

    PromptSequence seq;
    seq.target_ids.reserve(total);
    seq.target_ids.insert(seq.target_ids.end(), prefix.begin(), prefix.end());
    seq.segments.assign(prefix.size(), Segment::Prompt);
    seq.target_ids.insert(seq.target_ids.end(), n_visual, tokenizer.pad_id());
    seq.segments.insert(seq.segments.end(), n_visual, Segment::Visual);
    seq.target_ids.insert(seq.target_ids.end(), suffix.begin(), suffix.end());
    seq.segments.insert(seq.segments.end(), suffix.size(), Segment::Prompt);

    auto tail = suffix;
    if (report_ids) {
        seq.target_ids.insert(seq.target_ids.end(), report_ids->begin(), report_ids->end());
        seq.segments.insert(seq.segments.end(), n_report, Segment::Report);
        tail.insert(tail.end(), report_ids->begin(), report_ids->end());
    }
    seq.loss_mask.resize(total);
    for (std::size_t i = 0; i < total; ++i) {
        seq.loss_mask[i] = seq.segments[i] == Segment::Report;
    }

    std::vector<Tensor> parts{lm.embed_tokens(prefix), visual_tokens, lm.embed_tokens(tail)};
    seq.embeddings = concat_rows(parts);
    return seq;
}

PromptSequence assemble_prompt(const LanguageModel& lm, const Tokenizer& tokenizer, const PromptTemplate& prompt,
                               const Tensor& visual_tokens, std::optional<std::string_view> report) {
    std::optional<std::vector<TokenId>> ids;
    if (report) {
        ids = tokenizer.encode(*report);
    }
    return assemble_prompt(lm, tokenizer, prompt, visual_tokens, std::move(ids));
}

Tensor nll_loss(const Tensor& logits, const PromptSequence& seq) {
    const auto t = seq.length();
    if (logits.rank() != 2 || logits.dim(0) != t) {
        throw DimensionError(
            fmt::format("nll_loss: logits {} for a sequence of {} positions", shape_str(logits.shape()), t));
    }
    if (seq.included() == 0 || t < 2 || !std::any_of(seq.loss_mask.begin() + 1, seq.loss_mask.end(),
                                                      [](bool b) { return b; })) {
        throw std::domain_error("nll_loss: the sequence has no included report positions");
    }
    std::vector<TokenId> targets(seq.target_ids.begin() + 1, seq.target_ids.end());
    std::vector<bool> include(seq.loss_mask.begin() + 1, seq.loss_mask.end());
    return cross_entropy(slice_rows(logits, 0, t - 1), targets, include);
}

}  // namespace reportgen
