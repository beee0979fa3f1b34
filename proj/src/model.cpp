// SPDX-License-Identifier: Apache-2.0

#include "reportgen/model.hpp"

#include "reportgen/data.hpp"

#include <fmt/format.h>

namespace reportgen {

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"image_size", c.encoder.image_size},
         {"patch_size", c.encoder.patch_size},
         {"channels", c.encoder.channels},
         {"encoder_dim", c.encoder.embed_dim},
         {"encoder_layers", c.encoder.num_layers},
         {"encoder_heads", c.encoder.num_heads},
         {"encoder_mlp_ratio", c.encoder.mlp_ratio},
         {"lm_dim", c.lm_dim},
         {"lm_layers", c.lm_layers},
         {"lm_heads", c.lm_heads},
         {"lm_mlp_ratio", c.lm_mlp_ratio},
         {"max_seq_len", c.max_seq_len},
         {"mapper_bias", c.mapper_bias},
         {"instruction", c.prompt.instruction},
         {"before_image", c.prompt.before_image},
         {"after_image", c.prompt.after_image}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    c.encoder.image_size = j.at("image_size");
    c.encoder.patch_size = j.at("patch_size");
    c.encoder.channels = j.at("channels");
    c.encoder.embed_dim = j.at("encoder_dim");
    c.encoder.num_layers = j.at("encoder_layers");
    c.encoder.num_heads = j.at("encoder_heads");
    c.encoder.mlp_ratio = j.at("encoder_mlp_ratio");
    c.lm_dim = j.at("lm_dim");
    c.lm_layers = j.at("lm_layers");
    c.lm_heads = j.at("lm_heads");
    c.lm_mlp_ratio = j.at("lm_mlp_ratio");
    c.max_seq_len = j.at("max_seq_len");
    c.mapper_bias = j.at("mapper_bias");
    c.prompt.instruction = j.at("instruction");
    c.prompt.before_image = j.at("before_image");
    c.prompt.after_image = j.at("after_image");
}

Tokenizer ReportModel::build_tokenizer(const PromptTemplate& prompt) {
    auto words = report_vocabulary();
    for (const auto* text : {&prompt.before_image, &prompt.after_image, &prompt.instruction}) {
        for (auto& w : Tokenizer::split(*text)) {
            if (w != "{instruction}") {
                words.push_back(std::move(w));
            }
        }
    }
    return Tokenizer(words);
}

ReportModel ReportModel::create(const ModelConfig& config, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    ReportModel m;
    m.config = config;
    m.tokenizer = build_tokenizer(config.prompt);
    m.encoder = VisualEncoder::create(config.encoder, rng);
    m.mapper = VisualMapper::create(config.encoder.embed_dim, config.lm_dim, config.mapper_bias, rng);
    LMConfig lm_cfg;
    lm_cfg.d_model = config.lm_dim;
    lm_cfg.num_layers = config.lm_layers;
    lm_cfg.num_heads = config.lm_heads;
    lm_cfg.mlp_ratio = config.lm_mlp_ratio;
    lm_cfg.max_seq_len = config.max_seq_len;
    lm_cfg.vocab_size = m.tokenizer.size();
    m.lm = LanguageModel::create(lm_cfg, rng);
    return m;
}

NamedTensors ReportModel::parameters() {
    NamedTensors out;
    const ParamVisitor collect = [&out](const std::string& name, Tensor& t) { out.emplace_back(name, t); };
    encoder.visit(collect);
    mapper.visit(collect);
    lm.visit(collect);
    return out;
}

NamedTensors ReportModel::parameters_with_prefix(std::string_view prefix) {
    NamedTensors out;
    for (auto& [name, t] : parameters()) {
        if (name.starts_with(prefix)) {
            out.emplace_back(name, t);
        }
    }
    return out;
}

void ReportModel::apply_lora(const LoraOptions& options, std::mt19937_64& rng) {
    for (auto& h : filter_roles(encoder.named_projections(), {ProjectionRole::Query, ProjectionRole::Value})) {
        wrap(*h.linear, options, rng);
    }
}

bool ReportModel::has_lora() {
    for (auto& h : encoder.named_projections()) {
        if (h.linear->adapter) {
            return true;
        }
    }
    return false;
}

Tensor ReportModel::visual_tokens(const Tensor& image) const {
    return mapper.project(encoder.encode(image));
}

PromptSequence ReportModel::sequence(const Tensor& image, std::optional<std::string_view> report) const {
    return assemble_prompt(lm, tokenizer, config.prompt, visual_tokens(image), report);
}

Tensor ReportModel::loss(const Tensor& image, std::string_view report) const {
    const auto seq = sequence(image, report);
    return nll_loss(lm.forward(seq.embeddings), seq);
}

void save_model(const std::filesystem::path& dir, ReportModel& model, nlohmann::json attributes, bool merged) {
    if (attributes.is_null()) {
        attributes = nlohmann::json::object();
    }
    NamedTensors tensors;
    nlohmann::json lora = nullptr;
    for (auto& h : model.encoder.named_projections()) {
        if (h.linear->adapter) {
            lora = {{"rank", h.linear->adapter->rank}, {"alpha", h.linear->adapter->alpha}};
        }
    }
    for (auto& [name, t] : model.parameters()) {
        if (merged && (name.ends_with(".lora_A") || name.ends_with(".lora_B"))) {
            continue;
        }
        tensors.emplace_back(name, t);
    }
    if (merged) {
        for (auto& h : model.encoder.named_projections()) {
            if (h.linear->adapter) {
                for (auto& [name, t] : tensors) {
                    if (name == h.name) {
                        t = effective_weight(*h.linear);
                    }
                }
            }
        }
    }
    attributes["model_config"] = model.config;
    attributes["vocabulary"] = model.tokenizer.words();
    attributes["lora"] = lora;
    attributes["lora_form"] = lora.is_null() ? "none" : (merged ? "merged" : "factored");
    save_archive(dir / "weights", tensors, attributes);
}

ReportModel load_model(const std::filesystem::path& dir, nlohmann::json* attributes) {
    const auto archive = load_archive(dir / "weights");
    const auto& attrs = archive.attributes;
    const auto config = attrs.at("model_config").get<ModelConfig>();
    auto model = ReportModel::create(config, 0);
    if (attrs.contains("vocabulary") && attrs["vocabulary"].get<std::vector<std::string>>() != model.tokenizer.words()) {
        throw ArchiveError("checkpoint vocabulary differs from the one this build derives from its config");
    }
    if (attrs.value("lora_form", "none") == "factored") {
        LoraOptions opts;
        opts.rank = attrs.at("lora").at("rank");
        opts.alpha = attrs.at("lora").at("alpha");
        std::mt19937_64 rng(0);
        model.apply_lora(opts, rng);
    }
    for (auto& [name, t] : model.parameters()) {
        const auto& stored = archive.get(name);
        if (stored.shape() != t.shape()) {
            throw ArchiveError(fmt::format("tensor '{}' has shape {} in the checkpoint but {} in the model", name,
                                           shape_str(stored.shape()), shape_str(t.shape())));
        }
        std::copy(stored.data().begin(), stored.data().end(), t.mutable_data().begin());
    }
    if (attributes) {
        *attributes = attrs;
    }
    return model;
}

}  // namespace reportgen
