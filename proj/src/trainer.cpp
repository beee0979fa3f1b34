// SPDX-License-Identifier: Apache-2.0

#include "reportgen/trainer.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace reportgen {

const char* mode_name(AlignmentMode mode) {
    switch (mode) {
        case AlignmentMode::Shallow:
            return "shallow";
        case AlignmentMode::Delta:
            return "delta";
        case AlignmentMode::Deep:
            return "deep";
    }
    return "?";
}

AlignmentMode parse_mode(std::string_view name) {
    for (auto m : {AlignmentMode::Shallow, AlignmentMode::Delta, AlignmentMode::Deep}) {
        if (name == mode_name(m)) {
            return m;
        }
    }
    throw ConfigError(fmt::format("unknown alignment mode '{}' (expected shallow, delta or deep)", name));
}

namespace {

bool is_adapter(const std::string& name) {
    return name.ends_with(".lora_A") || name.ends_with(".lora_B");
}

}  // namespace

std::vector<std::string> trainable_names(ReportModel& model, AlignmentMode mode) {
    if (mode == AlignmentMode::Delta && !model.has_lora()) {
        throw ConfigError("delta mode needs LoRA adapters on the encoder query/value projections");
    }
    std::vector<std::string> out;
    for (auto& [name, t] : model.parameters()) {
        const bool mapper = name.starts_with("mapper.");
        const bool encoder = name.starts_with("encoder.");
        bool train = mapper;
        if (mode == AlignmentMode::Delta) {
            train = train || (encoder && is_adapter(name));
        } else if (mode == AlignmentMode::Deep) {
            train = train || encoder;
        }
        if (train) {
            out.push_back(name);
        }
    }
    return out;
}

NamedTensors configure_mode(ReportModel& model, AlignmentMode mode) {
    const auto names = trainable_names(model, mode);
    const std::set<std::string> wanted(names.begin(), names.end());
    NamedTensors theta;
    for (auto& [name, t] : model.parameters()) {
        const bool train = wanted.contains(name);
        t.set_requires_grad(train);
        t.zero_grad();
        if (train) {
            theta.emplace_back(name, t);
        }
    }
    return theta;
}

std::size_t count_trainable(ReportModel& model, AlignmentMode mode) {
    const auto names = trainable_names(model, mode);
    const std::set<std::string> wanted(names.begin(), names.end());
    std::size_t n = 0;
    for (auto& [name, t] : model.parameters()) {
        if (wanted.contains(name)) {
            n += t.numel();
        }
    }
    return n;
}

std::size_t count_grad_bearing(ReportModel& model) {
    std::size_t n = 0;
    for (auto& [name, t] : model.parameters()) {
        if (t.requires_grad()) {
            n += t.numel();
        }
    }
    return n;
}

// --- full-scale accounting --------------------------------------------------

std::size_t HierarchicalEncoderGeometry::param_count() const {
    if (depths.size() != widths.size() || depths.size() != heads.size() || depths.empty()) {
        throw ConfigError("encoder geometry needs one depth, width and head count per stage");
    }
    const std::size_t r = mlp_ratio;
    const std::size_t bias_table = (2 * window - 1) * (2 * window - 1);
    // patch projection (+bias) and its layer norm
    std::size_t n = in_channels * patch * patch * widths[0] + widths[0] + 2 * widths[0];
    for (std::size_t s = 0; s < depths.size(); ++s) {
        const std::size_t c = widths[s];
        // q,k,v,out with bias; two norms; two-layer MLP; relative position bias
        const std::size_t block = 4 * (c * c + c) + 4 * c + 2 * r * c * c + r * c + c + bias_table * heads[s];
        n += depths[s] * block;
        if (s + 1 < depths.size()) {
            n += 2 * (4 * c) + (4 * c) * widths[s + 1];  // merging: norm over 4C, bias-free reduction
        }
    }
    return n + 2 * widths.back();
}

std::vector<ProjectionShape> HierarchicalEncoderGeometry::query_value_shapes() const {
    std::vector<ProjectionShape> out;
    for (std::size_t s = 0; s < depths.size(); ++s) {
        for (std::size_t b = 0; b < depths[s]; ++b) {
            out.push_back({widths[s], widths[s]});
            out.push_back({widths[s], widths[s]});
        }
    }
    return out;
}

ModeCounts FullScaleGeometry::counts() const {
    ModeCounts c;
    c.shallow = VisualMapper::param_count(visual_dim, llm_dim, mapper_bias);
    const auto qv = encoder.query_value_shapes();
    c.delta = c.shallow + lora_param_count(qv, lora_rank);
    c.deep = c.shallow + encoder.param_count();
    return c;
}

// --- config ---------------------------------------------------------------------

void TrainConfig::validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
        throw ConfigError(fmt::format("learning rate must be finite and >= 0, got {}", learning_rate));
    }
    if (batch_size < 1) {
        throw ConfigError("batch size must be >= 1");
    }
    if (!max_steps && epochs < 1) {
        throw ConfigError("need epochs >= 1 or a step budget");
    }
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1 || eps <= 0) {
        throw ConfigError("adam betas must lie in [0, 1) and eps must be positive");
    }
    if (lora.alpha <= 0 || lora.rank < 1) {
        throw ConfigError("LoRA rank must be >= 1 and alpha > 0");
    }
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"mode", mode_name(c.mode)},
         {"optimizer", c.optimizer == OptimizerKind::AdamW ? "adamw" : "sgd"},
         {"learning_rate", c.learning_rate},
         {"weight_decay", c.weight_decay},
         {"beta1", c.beta1},
         {"beta2", c.beta2},
         {"eps", c.eps},
         {"grad_clip", c.grad_clip},
         {"batch_size", c.batch_size},
         {"epochs", c.epochs},
         {"max_steps", c.max_steps ? nlohmann::json(*c.max_steps) : nlohmann::json(nullptr)},
         {"checkpoint_every", c.checkpoint_every},
         {"seed", c.seed},
         {"lora_rank", c.lora.rank},
         {"lora_alpha", c.lora.alpha}};
}

// Overlays the keys present in j onto c; unknown keys are rejected.
void from_json(const nlohmann::json& j, TrainConfig& c) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        const auto& k = it.key();
        const auto& v = it.value();
        if (k == "mode") {
            c.mode = parse_mode(v.get<std::string>());
        } else if (k == "optimizer") {
            const auto s = v.get<std::string>();
            if (s != "adamw" && s != "sgd") {
                throw ConfigError(fmt::format("unknown optimizer '{}' (expected adamw or sgd)", s));
            }
            c.optimizer = s == "adamw" ? OptimizerKind::AdamW : OptimizerKind::Sgd;
        } else if (k == "learning_rate") {
            c.learning_rate = v;
        } else if (k == "weight_decay") {
            c.weight_decay = v;
        } else if (k == "beta1") {
            c.beta1 = v;
        } else if (k == "beta2") {
            c.beta2 = v;
        } else if (k == "eps") {
            c.eps = v;
        } else if (k == "grad_clip") {
            c.grad_clip = v;
        } else if (k == "batch_size") {
            c.batch_size = v;
        } else if (k == "epochs") {
            c.epochs = v;
        } else if (k == "max_steps") {
            c.max_steps = v.is_null() ? std::nullopt : std::optional<std::size_t>(v.get<std::size_t>());
        } else if (k == "checkpoint_every") {
            c.checkpoint_every = v;
        } else if (k == "seed") {
            c.seed = v;
        } else if (k == "lora_rank") {
            c.lora.rank = v;
        } else if (k == "lora_alpha") {
            c.lora.alpha = v;
        } else {
            throw ConfigError(fmt::format("unknown training option '{}'", k));
        }
    }
}

// --- optimizer ------------------------------------------------------------------

void Optimizer::step(const NamedTensors& params) {
    ++t_;
    const double lr = config_.learning_rate;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (const auto& [name, p] : params) {
        Tensor t = p;
        auto w = t.mutable_data();
        const bool has = t.has_grad();
        const auto g = has ? t.grad() : std::span<const double>{};
        if (config_.optimizer == OptimizerKind::Sgd) {
            for (std::size_t i = 0; i < w.size(); ++i) {
                w[i] -= lr * ((has ? g[i] : 0.0) + config_.weight_decay * w[i]);
            }
            continue;
        }
        auto& m = m_[name];
        auto& v = v_[name];
        m.resize(w.size(), 0.0);
        v.resize(w.size(), 0.0);
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double gi = has ? g[i] : 0.0;
            m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * gi;
            v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * gi * gi;
            const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + config_.eps);
            w[i] -= lr * (update + config_.weight_decay * w[i]);
        }
    }
}

NamedTensors Optimizer::state() const {
    NamedTensors out;
    for (const auto& [name, m] : m_) {
        out.emplace_back("m." + name, Tensor::from({m.size()}, m));
        out.emplace_back("v." + name, Tensor::from({m.size()}, v_.at(name)));
    }
    return out;
}

void Optimizer::load_state(const Archive& archive, std::size_t steps_taken) {
    m_.clear();
    v_.clear();
    for (const auto& [name, t] : archive.tensors) {
        std::vector<double> values(t.data().begin(), t.data().end());
        if (name.starts_with("m.")) {
            m_[name.substr(2)] = std::move(values);
        } else if (name.starts_with("v.")) {
            v_[name.substr(2)] = std::move(values);
        }
    }
    t_ = steps_taken;
}

// --- training -------------------------------------------------------------------

namespace {

void scale_gradients(const NamedTensors& params, double factor) {
    for (const auto& [name, p] : params) {
        if (p.has_grad()) {
            auto& g = p.node()->grad;
            for (auto& x : g) {
                x *= factor;
            }
        }
    }
}

double gradient_norm(const NamedTensors& params) {
    double sq = 0.0;
    for (const auto& [name, p] : params) {
        if (p.has_grad()) {
            for (double x : p.grad()) {
                sq += x * x;
            }
        }
    }
    return std::sqrt(sq);
}

}  // namespace

StepResult train_step(ReportModel& model, const NamedTensors& params, std::span<const Sample* const> batch,
                      Optimizer& optimizer, const TrainConfig& config, std::size_t step_index) {
    if (batch.empty()) {
        throw TrainingError(fmt::format("empty batch at step {}", step_index));
    }
    for (const auto& [name, p] : params) {
        Tensor(p).zero_grad();
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    double total = 0.0;
    for (const Sample* s : batch) {
        const Tensor loss = model.loss(s->image, s->report);
        const double value = loss.item();
        if (!std::isfinite(value)) {
            std::string ids;
            for (const Sample* b : batch) {
                ids += (ids.empty() ? "" : ",") + b->id;
            }
            throw TrainingError(fmt::format("non-finite loss at step {} (sample {}, batch [{}])", step_index, s->id, ids));
        }
        total += value;
        if (loss.requires_grad()) {
            scale(loss, inv).backward();
        }
    }
    StepResult r;
    r.loss = total * inv;
    r.grad_norm = gradient_norm(params);
    if (config.grad_clip > 0.0 && r.grad_norm > config.grad_clip) {
        scale_gradients(params, config.grad_clip / r.grad_norm);
    }
    optimizer.step(params);
    return r;
}

double evaluate_loss(const ReportModel& model, std::span<const Sample> samples) {
    if (samples.empty()) {
        throw TrainingError("cannot evaluate loss on an empty split");
    }
    NoGradGuard guard;
    double total = 0.0;
    for (const auto& s : samples) {
        total += model.loss(s.image, s.report).item();
    }
    return total / static_cast<double>(samples.size());
}

void save_checkpoint(const std::filesystem::path& dir, ReportModel& model, const TrainConfig& config,
                     std::size_t step, const nlohmann::json& metrics, const Optimizer* optimizer) {
    std::filesystem::create_directories(dir);
    nlohmann::json attrs = {{"mode", mode_name(config.mode)}, {"config", config}, {"step", step}, {"metrics", metrics}};
    save_model(dir, model, attrs);
    if (optimizer) {
        save_archive(dir / "optimizer", optimizer->state(), {{"steps_taken", optimizer->steps_taken()}});
    }
}

namespace {

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(epoch), 0x5eedu};
    std::mt19937_64 rng(seq);
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

std::string loss_row(std::size_t step, const char* split, double loss) {
    return fmt::format("{},{},{:.10f}\n", step, split, loss);
}

// Keeps the header and every row at or before `step`.
std::string truncated_log(const std::filesystem::path& path, std::size_t step) {
    std::ifstream in(path);
    std::string out, line;
    while (std::getline(in, line)) {
        if (out.empty()) {
            out = line + "\n";
            continue;
        }
        const auto comma = line.find(',');
        if (comma != std::string::npos && std::stoull(line.substr(0, comma)) <= step) {
            out += line + "\n";
        }
    }
    return out;
}

}  // namespace

TrainingReport fit(ReportModel& model, std::span<const Sample> train, std::span<const Sample> val,
                   const TrainConfig& config, const FitOptions& options) {
    config.validate();
    if (train.empty()) {
        throw TrainingError("training set is empty");
    }
    const bool persist = !options.run_dir.empty();
    const auto ckpt_dir = options.run_dir / "checkpoints";
    Optimizer optimizer(config);
    std::size_t step = 0;
    std::string log = "step,split,loss\n";
    TrainingReport report;
    if (options.resume) {
        if (!persist) {
            throw TrainingError("resume needs a run directory");
        }
        const auto last = ckpt_dir / "last";
        nlohmann::json attrs;
        model = load_model(last, &attrs);
        step = attrs.at("step");
        optimizer.load_state(load_archive(last / "optimizer"), load_archive(last / "optimizer").attributes.at("steps_taken"));
        if (attrs.at("metrics").contains("best_val_loss") && !attrs["metrics"]["best_val_loss"].is_null()) {
            report.best_val_loss = attrs["metrics"]["best_val_loss"].get<double>();
            report.best_checkpoint = ckpt_dir / "best";
        }
        log = truncated_log(options.run_dir / "loss.csv", step);
    }
    const NamedTensors theta = configure_mode(model, config.mode);

    const std::size_t batch = config.batch_size;
    const std::size_t per_epoch = (train.size() + batch - 1) / batch;
    const std::size_t total = config.max_steps ? *config.max_steps : config.epochs * per_epoch;
    if (persist) {
        std::filesystem::create_directories(ckpt_dir);
    }
    auto flush_log = [&] {
        if (persist) {
            std::ofstream(options.run_dir / "loss.csv", std::ios::binary | std::ios::trunc) << log;
        }
    };

    std::vector<std::size_t> order;
    std::size_t order_epoch = static_cast<std::size_t>(-1);
    auto epoch_start = std::chrono::steady_clock::now();
    double epoch_loss = 0.0;
    std::size_t epoch_steps = 0;
    while (step < total) {
        const std::size_t epoch = step / per_epoch, pos = step % per_epoch;
        if (epoch != order_epoch) {
            order = epoch_order(train.size(), config.seed, epoch);
            order_epoch = epoch;
        }
        std::vector<const Sample*> members;
        for (std::size_t i = pos * batch; i < std::min(train.size(), (pos + 1) * batch); ++i) {
            members.push_back(&train[order[i]]);
        }
        const auto result = train_step(model, theta, members, optimizer, config, step);
        ++step;
        epoch_loss += result.loss;
        ++epoch_steps;
        report.final_train_loss = result.loss;
        log += loss_row(step, "train", result.loss);
        if (options.verbose && (step % 50 == 0 || step == 1)) {
            std::cerr << fmt::format("[{}] step {}/{} loss {:.5f} |g| {:.3f}\n", mode_name(config.mode), step, total,
                                     result.loss, result.grad_norm);
        }
        if (persist && config.checkpoint_every > 0 && step % config.checkpoint_every == 0) {
            save_checkpoint(ckpt_dir / fmt::format("step_{:06d}", step), model, config, step, {}, nullptr);
        }
        if (pos + 1 == per_epoch || step == total) {
            EpochRecord rec;
            rec.epoch = epoch;
            rec.end_step = step;
            rec.train_loss = epoch_loss / static_cast<double>(epoch_steps);
            if (!val.empty()) {
                rec.val_loss = evaluate_loss(model, val);
                log += loss_row(step, "val", *rec.val_loss);
                if (!report.best_val_loss || *rec.val_loss < *report.best_val_loss) {
                    report.best_val_loss = rec.val_loss;
                    if (persist) {
                        report.best_checkpoint = ckpt_dir / "best";
                        save_checkpoint(report.best_checkpoint, model, config, step, {{"val_loss", *rec.val_loss}},
                                        nullptr);
                    }
                }
            }
            rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start).count();
            report.epochs.push_back(rec);
            if (options.verbose) {
                std::cerr << fmt::format("[{}] epoch {} done: train {:.5f}{} ({:.1f}s)\n", mode_name(config.mode),
                                         epoch, rec.train_loss,
                                         rec.val_loss ? fmt::format(" val {:.5f}", *rec.val_loss) : "", rec.seconds);
            }
            epoch_loss = 0.0;
            epoch_steps = 0;
            epoch_start = std::chrono::steady_clock::now();
            flush_log();
        }
    }
    report.steps = step;
    if (persist) {
        flush_log();
        report.last_checkpoint = ckpt_dir / "last";
        nlohmann::json metrics = {{"train_loss", report.final_train_loss},
                                  {"best_val_loss", report.best_val_loss ? nlohmann::json(*report.best_val_loss)
                                                                         : nlohmann::json(nullptr)}};
        save_checkpoint(report.last_checkpoint, model, config, step, metrics, &optimizer);
        if (report.best_checkpoint.empty()) {
            report.best_checkpoint = report.last_checkpoint;
        }
    }
    for (auto& [name, t] : model.parameters()) {
        t.set_requires_grad(false);
    }
    return report;
}

// --- language-model pretraining ---------------------------------------------------

double pretrain_language_model(ReportModel& model, std::span<const Sample> samples, const PretrainConfig& config,
                               bool verbose) {
    if (samples.empty()) {
        throw TrainingError("language-model pretraining needs at least one report");
    }
    NamedTensors lm_params;
    for (auto& [name, t] : model.parameters()) {
        const bool lm = name.starts_with("lm.");
        t.set_requires_grad(lm);
        t.zero_grad();
        if (lm) {
            lm_params.emplace_back(name, t);
        }
    }
    TrainConfig tc;
    tc.learning_rate = config.learning_rate;
    tc.batch_size = config.batch_size;
    Optimizer optimizer(tc);
    const std::size_t slot = model.config.encoder.num_patches();
    const auto pad = model.tokenizer.pad_id();

    std::vector<std::size_t> order;
    const std::size_t per_epoch = (samples.size() + config.batch_size - 1) / config.batch_size;
    double last = 0.0;
    for (std::size_t step = 0; step < config.steps; ++step) {
        const std::size_t epoch = step / per_epoch, pos = step % per_epoch;
        if (pos == 0) {
            order = epoch_order(samples.size(), config.seed, epoch);
        }
        for (auto& [name, p] : lm_params) {
            p.zero_grad();
        }
        const std::size_t lo = pos * config.batch_size, hi = std::min(samples.size(), lo + config.batch_size);
        double total = 0.0;
        for (std::size_t i = lo; i < hi; ++i) {
            const Sample& s = samples[order[i]];
            auto ids = model.tokenizer.encode(content_keywords(s));
            if (ids.size() > slot) {
                throw TrainingError(fmt::format("keywords of {} exceed the visual slot", s.id));
            }
            ids.resize(slot, pad);
            const auto seq = assemble_prompt(model.lm, model.tokenizer, model.config.prompt, model.lm.embed_tokens(ids),
                                             std::string_view(s.report));
            const Tensor loss = nll_loss(model.lm.forward(seq.embeddings), seq);
            total += loss.item();
            scale(loss, 1.0 / static_cast<double>(hi - lo)).backward();
        }
        last = total / static_cast<double>(hi - lo);
        if (!std::isfinite(last)) {
            throw TrainingError(fmt::format("non-finite loss during language-model pretraining at step {}", step));
        }
        const double norm = gradient_norm(lm_params);
        if (norm > 1.0) {
            scale_gradients(lm_params, 1.0 / norm);
        }
        optimizer.step(lm_params);
        if (verbose && (step % 100 == 0 || step + 1 == config.steps)) {
            std::cerr << fmt::format("[pretrain-lm] step {}/{} loss {:.5f}\n", step + 1, config.steps, last);
        }
    }
    for (auto& [name, t] : model.parameters()) {
        t.set_requires_grad(false);
    }
    return last;
}

}  // namespace reportgen
