// SPDX-License-Identifier: Apache-2.0
//
// Alignment regimes (which tensors train), trainable-parameter accounting,
// optimizers and the training loop.

#pragma once

#include "reportgen/data.hpp"
#include "reportgen/model.hpp"

#include <chrono>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace reportgen {

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class AlignmentMode { Shallow, Delta, Deep };

const char* mode_name(AlignmentMode mode);
AlignmentMode parse_mode(std::string_view name);

/// Names of the tensors a mode trains. Pure: flags are left untouched.
std::vector<std::string> trainable_names(ReportModel& model, AlignmentMode mode);
/// Sets requires_grad on exactly trainable_names(model, mode) and returns that
/// set. Delta without adapters is a configuration error.
NamedTensors configure_mode(ReportModel& model, AlignmentMode mode);
std::size_t count_trainable(ReportModel& model, AlignmentMode mode);
/// Sum of numel over every tensor currently flagged requires_grad.
std::size_t count_grad_bearing(ReportModel& model);

// --- full-scale accounting --------------------------------------------------

/// Hierarchical windowed transformer used as the full-scale visual encoder.
struct HierarchicalEncoderGeometry {
    std::vector<std::size_t> depths = {2, 2, 18, 2};
    std::vector<std::size_t> widths = {128, 256, 512, 1024};
    std::vector<std::size_t> heads = {4, 8, 16, 32};
    std::size_t window = 7;
    std::size_t patch = 4;
    std::size_t in_channels = 3;
    std::size_t mlp_ratio = 4;

    /// Parameters without a classification head.
    std::size_t param_count() const;
    /// Query and value projections of every block.
    std::vector<ProjectionShape> query_value_shapes() const;
};

struct ModeCounts {
    std::size_t shallow = 0;
    std::size_t delta = 0;
    std::size_t deep = 0;
};

struct FullScaleGeometry {
    HierarchicalEncoderGeometry encoder;
    std::size_t visual_dim = 1024;
    std::size_t llm_dim = 4096;
    std::size_t lora_rank = 16;
    bool mapper_bias = false;

    ModeCounts counts() const;
};

// --- optimization -------------------------------------------------------------

enum class OptimizerKind { AdamW, Sgd };

struct TrainConfig {
    AlignmentMode mode = AlignmentMode::Shallow;
    OptimizerKind optimizer = OptimizerKind::AdamW;
    double learning_rate = 1e-4;
    double weight_decay = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double grad_clip = 1.0;  // global norm; <= 0 disables
    std::size_t batch_size = 6;
    std::size_t epochs = 1;
    std::optional<std::size_t> max_steps;
    std::size_t checkpoint_every = 0;  // steps; 0 = only best/last
    std::uint64_t seed = 1;
    LoraOptions lora;

    void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

class Optimizer {
public:
    explicit Optimizer(const TrainConfig& config) : config_(config) {}

    /// Applies one update to every tensor in params using its gradient (a
    /// missing gradient counts as zero).
    void step(const NamedTensors& params);
    std::size_t steps_taken() const { return t_; }

    NamedTensors state() const;
    void load_state(const Archive& archive, std::size_t steps_taken);

private:
    TrainConfig config_;
    std::size_t t_ = 0;
    std::map<std::string, std::vector<double>> m_, v_;
};

struct StepResult {
    double loss = 0.0;
    double grad_norm = 0.0;
};

/// One optimizer update on the mean loss over the batch. Per-sample graphs are
/// back-propagated one at a time so peak memory is one sequence.
StepResult train_step(ReportModel& model, const NamedTensors& params, std::span<const Sample* const> batch,
                      Optimizer& optimizer, const TrainConfig& config, std::size_t step_index);

/// Mean per-sample loss without recording gradients.
double evaluate_loss(const ReportModel& model, std::span<const Sample> samples);

struct EpochRecord {
    std::size_t epoch = 0;
    std::size_t end_step = 0;
    double train_loss = 0.0;
    std::optional<double> val_loss;
    double seconds = 0.0;
};

struct TrainingReport {
    std::vector<EpochRecord> epochs;
    std::size_t steps = 0;
    double final_train_loss = 0.0;
    std::optional<double> best_val_loss;
    std::filesystem::path best_checkpoint;
    std::filesystem::path last_checkpoint;
};

struct FitOptions {
    std::filesystem::path run_dir;  // empty = keep nothing on disk
    bool resume = false;
    bool verbose = false;
};

/// Trains `model` in config.mode. Writes loss.csv (step,split,loss), one
/// checkpoint per cadence, `best` (lowest validation loss) and `last`.
TrainingReport fit(ReportModel& model, std::span<const Sample> train, std::span<const Sample> val,
                   const TrainConfig& config, const FitOptions& options = {});

/// Checkpoint = model weights + manifest attributes {mode, config, step, metrics}
/// + optimizer moments (for resume).
void save_checkpoint(const std::filesystem::path& dir, ReportModel& model, const TrainConfig& config,
                     std::size_t step, const nlohmann::json& metrics, const Optimizer* optimizer);

// --- language-model pretraining -------------------------------------------------

struct PretrainConfig {
    double learning_rate = 3e-3;
    std::size_t steps = 1500;
    std::size_t batch_size = 8;
    std::uint64_t seed = 1;
};

/// Text-only training of the language model: the visual slot holds the
/// embedded content keywords of each report (padded to the slot length), the
/// loss covers report tokens. Only LM tensors change. Returns the final mean
/// batch loss.
double pretrain_language_model(ReportModel& model, std::span<const Sample> samples, const PretrainConfig& config,
                               bool verbose = false);

}  // namespace reportgen
