// SPDX-License-Identifier: Apache-2.0

#include "reportgen/commands.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>

#include <fstream>
#include <map>
#include <ostream>

namespace reportgen {

LoadedData load_data(const std::filesystem::path& dir, const RunConfig& config) {
    if (!std::filesystem::exists(dir / "manifest.json")) {
        throw CorpusFormatError(fmt::format("no corpus at {}", dir.string()));
    }
    LoadedData d;
    d.corpus = load_corpus(dir);
    d.split = has_saved_split(dir) ? load_split(dir, d.corpus) : split_corpus(d.corpus, config.split, config.seed);
    return d;
}

void cmd_gen_data(const RunConfig& config, const std::filesystem::path& out) {
    config.validate();
    const auto corpus = generate_corpus(config.data);
    save_corpus(out, corpus);
    save_split(out, split_corpus(corpus, config.split, config.seed));
}

ReportModel cmd_pretrain_lm(const RunConfig& config, const std::filesystem::path& data,
                            const std::filesystem::path& out, std::ostream& log, bool verbose) {
    config.validate();
    const auto d = load_data(data, config);
    auto model = ReportModel::create(config.model, config.seed);
    const double loss = pretrain_language_model(model, d.split.train, config.pretrain, verbose);
    log << fmt::format("language model pretrained on {} reports, final loss {:.6f}\n", d.split.train.size(), loss);
    if (!out.empty()) {
        write_config_echo(out, config);
        save_model(out, model, {{"pretrain_loss", loss}});
    }
    return model;
}

namespace {

void log_counts(ReportModel& model, AlignmentMode mode, std::ostream& log) {
    const auto closed = count_trainable(model, mode);
    configure_mode(model, mode);
    const auto brute = count_grad_bearing(model);
    log << fmt::format("trainable parameters [{}]: {} (enumerated {})\n", mode_name(mode), closed, brute);
    for (auto& [name, t] : model.parameters()) {
        t.set_requires_grad(false);
    }
}

}  // namespace

TrainingReport cmd_train(const RunConfig& config, const TrainArgs& args, std::ostream& log) {
    config.validate();
    const auto d = load_data(args.data, config);
    write_config_echo(args.out, config);
    ReportModel model;
    if (args.resume) {
        nlohmann::json attrs;
        model = load_model(args.out / "checkpoints" / "last", &attrs);
        if (attrs.value("mode", "") != mode_name(config.train.mode)) {
            throw ConfigError(fmt::format("cannot resume a {} run in {} mode", attrs.value("mode", "?"),
                                          mode_name(config.train.mode)));
        }
        log << fmt::format("resuming from step {}\n", attrs.value("step", 0));
    } else {
        if (args.base) {
            model = load_model(*args.base);
            if (model.has_lora()) {
                throw ConfigError("the base model already carries LoRA adapters");
            }
        } else {
            model = cmd_pretrain_lm(config, args.data, args.out / "base", log, args.verbose);
        }
        if (config.train.mode == AlignmentMode::Delta) {
            std::mt19937_64 rng(config.seed + 1);
            model.apply_lora(config.train.lora, rng);
        }
    }
    log_counts(model, config.train.mode, log);
    FitOptions fo;
    fo.run_dir = args.out;
    fo.resume = args.resume;
    fo.verbose = args.verbose;
    auto report = fit(model, d.split.train, d.split.val, config.train, fo);

    nlohmann::json epochs = nlohmann::json::array();
    for (const auto& e : report.epochs) {
        epochs.push_back({{"epoch", e.epoch},
                          {"end_step", e.end_step},
                          {"train_loss", e.train_loss},
                          {"val_loss", e.val_loss ? nlohmann::json(*e.val_loss) : nlohmann::json(nullptr)},
                          {"seconds", e.seconds}});
    }
    const nlohmann::json summary = {
        {"mode", mode_name(config.train.mode)},
        {"steps", report.steps},
        {"final_train_loss", report.final_train_loss},
        {"best_val_loss", report.best_val_loss ? nlohmann::json(*report.best_val_loss) : nlohmann::json(nullptr)},
        {"best_checkpoint", report.best_checkpoint.string()},
        {"epochs", epochs}};
    std::ofstream(args.out / "training_report.json", std::ios::trunc) << summary.dump(2) << '\n';
    log << fmt::format("trained {} steps, final train loss {:.6f}\n", report.steps, report.final_train_loss);
    return report;
}

std::filesystem::path resolve_checkpoint(const std::filesystem::path& path) {
    if (std::filesystem::exists(path / "weights.json")) {
        return path;
    }
    for (const char* sub : {"best", "last"}) {
        if (std::filesystem::exists(path / "checkpoints" / sub / "weights.json")) {
            return path / "checkpoints" / sub;
        }
    }
    throw ArchiveError(fmt::format("no checkpoint at {}", path.string()));
}

std::vector<Generation> cmd_generate(const RunConfig& config, const GenerateArgs& args) {
    config.validate();
    nlohmann::json attrs;
    const auto model = load_model(resolve_checkpoint(args.checkpoint), &attrs);
    if (args.mode && attrs.value("mode", "") != *args.mode) {
        throw ConfigError(fmt::format("checkpoint was trained in '{}' mode, not '{}'", attrs.value("mode", "none"),
                                      *args.mode));
    }
    const auto d = load_data(args.data, config);
    const Corpus* part = nullptr;
    if (args.split == "train") {
        part = &d.split.train;
    } else if (args.split == "val") {
        part = &d.split.val;
    } else if (args.split == "test") {
        part = &d.split.test;
    } else if (args.split == "all") {
        part = &d.corpus;
    } else {
        throw ConfigError(fmt::format("unknown split '{}' (expected train, val, test or all)", args.split));
    }
    auto options = model_decode_options(model, config.decode.beam_size, config.decode.max_len);
    options.length_penalty = config.decode.length_penalty;
    auto gens = generate_all(model, *part, options);
    if (!args.out.empty()) {
        if (args.out.has_parent_path()) {
            std::filesystem::create_directories(args.out.parent_path());
        }
        write_generations(args.out, gens);
    }
    return gens;
}

MetricReport cmd_evaluate(const EvaluateArgs& args) {
    const auto gens = read_generations(args.generations);
    if (gens.empty()) {
        throw std::runtime_error(fmt::format("{} holds no generations", args.generations.string()));
    }
    const auto corpus = load_corpus(args.data);
    std::map<std::string, const Sample*> by_id;
    for (const auto& s : corpus) {
        by_id[s.id] = &s;
    }
    std::vector<std::string> cands, refs, missing;
    for (const auto& g : gens) {
        const auto it = by_id.find(g.id);
        if (it == by_id.end()) {
            missing.push_back(g.id);
            continue;
        }
        cands.push_back(g.text);
        refs.push_back(it->second->report);
    }
    if (!missing.empty()) {
        throw std::runtime_error(
            fmt::format("generation ids without a reference: {}", fmt::join(missing, ", ")));
    }
    return evaluate_texts(cands, refs);
}

std::string cmd_count_params(const RunConfig& config, bool full_scale) {
    std::string out = fmt::format("{:<8} {:>12}\n", "mode", "trainable");
    auto row = [&out](AlignmentMode m, std::size_t n) {
        out += fmt::format("{:<8} {:>12}", mode_name(m), n);
        out += n >= 100000 ? fmt::format("  ({:.2f}M)\n", static_cast<double>(n) / 1e6) : "\n";
    };
    if (full_scale) {
        FullScaleGeometry g;
        g.lora_rank = config.train.lora.rank;
        g.mapper_bias = config.model.mapper_bias;
        const auto c = g.counts();
        row(AlignmentMode::Shallow, c.shallow);
        row(AlignmentMode::Delta, c.delta);
        row(AlignmentMode::Deep, c.deep);
        return out;
    }
    for (auto m : {AlignmentMode::Shallow, AlignmentMode::Delta, AlignmentMode::Deep}) {
        auto model = ReportModel::create(config.model, config.seed);
        if (m == AlignmentMode::Delta) {
            std::mt19937_64 rng(config.seed + 1);
            model.apply_lora(config.train.lora, rng);
        }
        const auto closed = count_trainable(model, m);
        configure_mode(model, m);
        if (count_grad_bearing(model) != closed) {
            throw std::logic_error(fmt::format("{}: closed-form count {} disagrees with enumeration {}", mode_name(m),
                                               closed, count_grad_bearing(model)));
        }
        row(m, closed);
    }
    return out;
}

}  // namespace reportgen
