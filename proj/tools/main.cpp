// SPDX-License-Identifier: Apache-2.0
//
// reportgen: corpus generation, training, generation, evaluation and
// parameter accounting. Exit codes: 0 ok, 1 usage, 2 runtime failure.
// Logs go to stderr; stdout carries only machine-readable output.

#include "reportgen/commands.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>

#include <iostream>

namespace {

using namespace reportgen;

template <class T>
void override_if(const CLI::Option* opt, T& slot, const T& value) {
    if (opt->count() > 0) {
        slot = value;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Radiology report generation with a frozen language model and a trainable visual alignment"};
    app.require_subcommand(1);
    app.fallthrough();

    std::uint64_t seed = 1;
    std::string config_path, out;
    bool verbose = false;
    auto* seed_opt = app.add_option("--seed", seed, "Seed for data, splits, initialisation and shuffling");
    app.add_option("--config", config_path, "JSON run configuration (flags override it)")->check(CLI::ExistingFile);
    app.add_option("--out", out, "Output directory or file");
    app.add_flag("-v,--verbose", verbose, "Progress logging on stderr");

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic paired image/report corpus");
    std::size_t n = 0;
    double normal_fraction = 0, negation_prob = 0;
    std::size_t image_size = 0;
    auto* n_opt = gen->add_option("--n", n, "Number of samples")->check(CLI::PositiveNumber);
    auto* nf_opt = gen->add_option("--normal-fraction", normal_fraction, "Share of finding-free samples")
                       ->check(CLI::Range(0.0, 1.0));
    auto* neg_opt = gen->add_option("--negation-prob", negation_prob, "Chance of stating an absent category")
                        ->check(CLI::Range(0.0, 1.0));
    auto* size_opt = gen->add_option("--image-size", image_size, "Image side in pixels")->check(CLI::PositiveNumber);

    // pretrain-lm
    auto* pre = app.add_subcommand("pretrain-lm", "Train the language model on report text, producing a base model");
    std::string data;
    std::size_t pre_steps = 0;
    auto* pre_data = pre->add_option("--data", data, "Corpus directory")->required();
    auto* pre_steps_opt = pre->add_option("--steps", pre_steps, "Optimizer steps")->check(CLI::PositiveNumber);
    (void)pre_data;

    // train
    auto* train = app.add_subcommand("train", "Train the visual alignment in one mode");
    std::string mode, base, optimizer;
    std::size_t lora_r = 0, batch_size = 0, steps = 0, epochs = 0, every = 0;
    double lora_alpha = 0, lr = 0;
    bool resume = false;
    train->add_option("--data", data, "Corpus directory")->required();
    auto* mode_opt = train->add_option("--mode", mode, "Alignment mode")
                         ->check(CLI::IsMember({"shallow", "delta", "deep"}));
    auto* r_opt = train->add_option("--lora-r", lora_r, "LoRA rank")->check(CLI::PositiveNumber);
    auto* alpha_opt = train->add_option("--lora-alpha", lora_alpha, "LoRA alpha")->check(CLI::PositiveNumber);
    auto* lr_opt = train->add_option("--lr", lr, "Learning rate")->check(CLI::NonNegativeNumber);
    auto* bs_opt = train->add_option("--batch-size", batch_size, "Samples per step")->check(CLI::PositiveNumber);
    auto* steps_opt = train->add_option("--steps", steps, "Step budget (overrides epochs)")->check(CLI::PositiveNumber);
    auto* epochs_opt = train->add_option("--epochs", epochs, "Epochs")->check(CLI::PositiveNumber);
    auto* every_opt = train->add_option("--checkpoint-every", every, "Checkpoint cadence in steps");
    auto* opt_opt = train->add_option("--optimizer", optimizer, "adamw or sgd")->check(CLI::IsMember({"adamw", "sgd"}));
    auto* base_opt = train->add_option("--base", base, "Base model from pretrain-lm (skips LM pretraining)");
    train->add_flag("--resume", resume, "Continue the run in --out from its last checkpoint");

    // generate
    auto* gen_cmd = app.add_subcommand("generate", "Generate reports with a trained checkpoint");
    std::string checkpoint, split = "test", gen_mode;
    std::size_t beam = 0, max_len = 0;
    double length_penalty = 0;
    gen_cmd->add_option("--checkpoint", checkpoint, "Checkpoint or run directory")->required();
    gen_cmd->add_option("--data", data, "Corpus directory")->required();
    gen_cmd->add_option("--split", split, "train, val, test or all")
        ->check(CLI::IsMember({"train", "val", "test", "all"}));
    auto* beam_opt = gen_cmd->add_option("--beam", beam, "Beam size (1 = greedy)")->check(CLI::PositiveNumber);
    auto* len_opt = gen_cmd->add_option("--max-len", max_len, "Maximum generated tokens")->check(CLI::PositiveNumber);
    auto* lp_opt = gen_cmd->add_option("--length-penalty", length_penalty, "Exponent of the length normalisation");
    auto* gmode_opt = gen_cmd->add_option("--mode", gen_mode, "Expected training mode of the checkpoint")
                          ->check(CLI::IsMember({"shallow", "delta", "deep"}));

    // evaluate
    auto* eval = app.add_subcommand("evaluate", "Score generations against the corpus references");
    std::string generations, format = "table";
    eval->add_option("--generations", generations, "Generations file (JSON lines)")->required();
    eval->add_option("--data", data, "Corpus directory")->required();
    eval->add_option("--format", format, "table, kv or json")->check(CLI::IsMember({"table", "kv", "json"}));

    // count-params
    auto* count = app.add_subcommand("count-params", "Trainable parameters per alignment mode");
    bool full_scale = false;
    count->add_flag("--full-scale", full_scale,
                    "Use the full-scale geometry (1024-d hierarchical encoder, 4096-d language model)");
    count->add_flag("--paper-geometry", full_scale)->group("");  // alias kept for scripts
    auto* count_r = count->add_option("--lora-r", lora_r, "LoRA rank")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    RunConfig config;
    try {
        if (!config_path.empty()) {
            config = RunConfig::load(config_path);
        }
        override_if(seed_opt, config.seed, seed);
        config.apply_seed();
        override_if(n_opt, config.data.n, n);
        override_if(nf_opt, config.data.normal_fraction, normal_fraction);
        override_if(neg_opt, config.data.negation_probability, negation_prob);
        override_if(size_opt, config.data.image_size, image_size);
        override_if(pre_steps_opt, config.pretrain.steps, pre_steps);
        if (mode_opt->count() > 0) {
            config.train.mode = parse_mode(mode);
        }
        override_if(r_opt, config.train.lora.rank, lora_r);
        override_if(count_r, config.train.lora.rank, lora_r);
        override_if(alpha_opt, config.train.lora.alpha, lora_alpha);
        override_if(lr_opt, config.train.learning_rate, lr);
        override_if(bs_opt, config.train.batch_size, batch_size);
        if (steps_opt->count() > 0) {
            config.train.max_steps = steps;
        }
        override_if(epochs_opt, config.train.epochs, epochs);
        override_if(every_opt, config.train.checkpoint_every, every);
        if (opt_opt->count() > 0) {
            config.train.optimizer = optimizer == "sgd" ? OptimizerKind::Sgd : OptimizerKind::AdamW;
        }
        override_if(beam_opt, config.decode.beam_size, beam);
        override_if(len_opt, config.decode.max_len, max_len);
        override_if(lp_opt, config.decode.length_penalty, length_penalty);
        config.validate();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }

    auto need_out = [&](const char* what) {
        if (out.empty()) {
            throw CLI::RequiredError(fmt::format("--out ({})", what));
        }
    };

    try {
        if (gen->parsed()) {
            need_out("corpus directory");
            cmd_gen_data(config, out);
            std::cerr << fmt::format("wrote {} samples to {}\n", config.data.n, out);
        } else if (pre->parsed()) {
            need_out("base model directory");
            cmd_pretrain_lm(config, data, out, std::cerr, verbose);
        } else if (train->parsed()) {
            need_out("run directory");
            TrainArgs args;
            args.data = data;
            args.out = out;
            if (base_opt->count() > 0) {
                args.base = base;
            }
            args.resume = resume;
            args.verbose = verbose;
            cmd_train(config, args, std::cerr);
        } else if (gen_cmd->parsed()) {
            GenerateArgs args;
            args.checkpoint = checkpoint;
            args.data = data;
            args.split = split;
            args.out = out;
            if (gmode_opt->count() > 0) {
                args.mode = gen_mode;
            }
            const auto gens = cmd_generate(config, args);
            if (out.empty()) {
                for (const auto& g : gens) {
                    std::cout << nlohmann::json{{"id", g.id}, {"text", g.text}, {"score", g.score}}.dump() << '\n';
                }
            } else {
                std::cerr << fmt::format("wrote {} generations to {}\n", gens.size(), out);
            }
        } else if (eval->parsed()) {
            EvaluateArgs args;
            args.generations = generations;
            args.data = data;
            const auto report = cmd_evaluate(args);
            if (format == "table") {
                std::cout << report.table();
            } else if (format == "kv") {
                std::cout << report.key_values();
            } else {
                std::cout << report.to_json().dump(2) << '\n';
            }
            if (!out.empty()) {
                std::ofstream(out, std::ios::trunc) << report.to_json().dump(2) << '\n';
            }
            for (const auto& w : report.clinical.warnings) {
                std::cerr << "warning: " << w << '\n';
            }
        } else if (count->parsed()) {
            std::cout << cmd_count_params(config, full_scale);
        }
    } catch (const CLI::RequiredError& e) {
        std::cerr << "error: missing " << e.what() << '\n';
        return 1;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
