// SPDX-License-Identifier: Apache-2.0

#include "reportgen/config.hpp"

#include <fmt/format.h>

#include <fstream>

namespace reportgen {

namespace {

bool compatible(const nlohmann::json& def, const nlohmann::json& v) {
    if (def.is_null()) {
        return v.is_null() || v.is_number_unsigned() || v.is_number_integer();
    }
    if (def.is_number_unsigned() || def.is_number_integer()) {
        return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
    }
    if (def.is_number_float()) {
        return v.is_number();
    }
    if (def.is_boolean()) {
        return v.is_boolean();
    }
    if (def.is_string()) {
        return v.is_string();
    }
    return def.type() == v.type();
}

}  // namespace

nlohmann::json overlay(nlohmann::json base, const nlohmann::json& overrides, const std::string& path) {
    if (!overrides.is_object()) {
        throw ConfigError(fmt::format("config{}: expected an object", path.empty() ? "" : " key '" + path + "'"));
    }
    for (auto it = overrides.begin(); it != overrides.end(); ++it) {
        const auto key = path.empty() ? it.key() : path + "." + it.key();
        if (!base.contains(it.key())) {
            throw ConfigError(fmt::format("unknown config key '{}'", key));
        }
        auto& slot = base[it.key()];
        if (slot.is_object()) {
            slot = overlay(slot, it.value(), key);
        } else if (slot.is_number_unsigned() && it.value().is_number_float()) {
            throw ConfigError(fmt::format("config key '{}' expects an integer", key));
        } else if (!compatible(slot, it.value())) {
            throw ConfigError(fmt::format("config key '{}' expects a {} value, got {}", key, slot.type_name(),
                                          it.value().type_name()));
        } else {
            slot = it.value();
        }
    }
    return base;
}

nlohmann::json RunConfig::to_json() const {
    nlohmann::json train_json = train;
    train_json.erase("seed");
    return {{"seed", seed},
            {"data",
             {{"n", data.n},
              {"normal_fraction", data.normal_fraction},
              {"negation_probability", data.negation_probability},
              {"image_size", data.image_size},
              {"noise_stddev", data.noise_stddev},
              {"split", {{"train", split.train}, {"test", split.test}, {"val", split.val}}}}},
            {"model", model},
            {"pretrain",
             {{"learning_rate", pretrain.learning_rate},
              {"steps", pretrain.steps},
              {"batch_size", pretrain.batch_size}}},
            {"train", train_json},
            {"decode",
             {{"beam_size", decode.beam_size},
              {"max_len", decode.max_len},
              {"length_penalty", decode.length_penalty}}}};
}

RunConfig RunConfig::from_json(const nlohmann::json& overrides) {
    const auto j = overlay(RunConfig{}.to_json(), overrides);
    RunConfig c;
    c.seed = j.at("seed");
    const auto& d = j.at("data");
    c.data.n = d.at("n");
    c.data.normal_fraction = d.at("normal_fraction");
    c.data.negation_probability = d.at("negation_probability");
    c.data.image_size = d.at("image_size");
    c.data.noise_stddev = d.at("noise_stddev");
    c.split.train = d.at("split").at("train");
    c.split.test = d.at("split").at("test");
    c.split.val = d.at("split").at("val");
    c.model = j.at("model").get<ModelConfig>();
    c.pretrain.learning_rate = j.at("pretrain").at("learning_rate");
    c.pretrain.steps = j.at("pretrain").at("steps");
    c.pretrain.batch_size = j.at("pretrain").at("batch_size");
    reportgen::from_json(j.at("train"), c.train);
    c.decode.beam_size = j.at("decode").at("beam_size");
    c.decode.max_len = j.at("decode").at("max_len");
    c.decode.length_penalty = j.at("decode").at("length_penalty");
    c.apply_seed();
    return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError(fmt::format("cannot read config file {}", path.string()));
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
    }
    return from_json(j);
}

void RunConfig::apply_seed() {
    data.seed = seed;
    pretrain.seed = seed;
    train.seed = seed;
}

void RunConfig::validate() const {
    if (data.n < 1) {
        throw ConfigError("data.n must be >= 1");
    }
    if (data.normal_fraction < 0.0 || data.normal_fraction > 1.0) {
        throw ConfigError(fmt::format("data.normal_fraction must lie in [0, 1], got {}", data.normal_fraction));
    }
    if (data.negation_probability < 0.0 || data.negation_probability > 1.0) {
        throw ConfigError("data.negation_probability must lie in [0, 1]");
    }
    model.encoder.validate();
    train.validate();
    if (decode.beam_size < 1 || decode.max_len < 1) {
        throw ConfigError("decode.beam_size and decode.max_len must be >= 1");
    }
    if (pretrain.batch_size < 1) {
        throw ConfigError("pretrain.batch_size must be >= 1");
    }
}

void write_config_echo(const std::filesystem::path& dir, const RunConfig& config) {
    std::filesystem::create_directories(dir);
    std::ofstream(dir / "config.json", std::ios::binary | std::ios::trunc) << config.to_json().dump(2) << '\n';
}

}  // namespace reportgen
