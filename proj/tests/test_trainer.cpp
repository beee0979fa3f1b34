// SPDX-License-Identifier: Apache-2.0

#include "reportgen/trainer.hpp"

#include "gradcheck.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

using namespace reportgen;
namespace fs = std::filesystem;

namespace {

// Windowed hierarchical encoder parameter count, written out from the block layout.
std::size_t hierarchical_oracle(const HierarchicalEncoderGeometry& g) {
    std::size_t n = g.patch * g.patch * g.in_channels * g.widths[0] + g.widths[0];  // patch projection
    n += 2 * g.widths[0];                                                         // embedding norm
    const std::size_t table = (2 * g.window - 1) * (2 * g.window - 1);
    for (std::size_t s = 0; s < g.depths.size(); ++s) {
        const std::size_t c = g.widths[s], hidden = g.mlp_ratio * c;
        std::size_t block = 0;
        block += 2 * c;                     // norm1
        block += 3 * c * c + 3 * c;         // qkv
        block += table * g.heads[s];        // relative position bias
        block += c * c + c;                 // attention output
        block += 2 * c;                     // norm2
        block += c * hidden + hidden;       // mlp up
        block += hidden * c + c;            // mlp down
        n += g.depths[s] * block;
        if (s + 1 < g.depths.size()) {
            n += 2 * 4 * c + 4 * c * 2 * c;  // merge norm + reduction
        }
    }
    return n + 2 * g.widths.back();
}

Corpus tiny_corpus(std::size_t n, std::uint64_t seed = 5) {
    CorpusOptions o;
    o.n = n;
    o.seed = seed;
    return generate_corpus(o);
}

std::vector<double> snapshot(const Tensor& t) {
    return {t.data().begin(), t.data().end()};
}

std::map<std::string, std::vector<double>> snapshot(ReportModel& m) {
    std::map<std::string, std::vector<double>> out;
    for (auto& [name, t] : m.parameters()) {
        out[name] = snapshot(t);
    }
    return out;
}

TrainConfig quick(AlignmentMode mode, std::size_t steps) {
    TrainConfig c;
    c.mode = mode;
    c.learning_rate = 1e-3;
    c.batch_size = 2;
    c.max_steps = steps;
    c.epochs = 100;
    c.seed = 3;
    return c;
}

fs::path scratch_dir(const std::string& name) {
    auto d = fs::temp_directory_path() / ("reportgen_test_" + name);
    fs::remove_all(d);
    return d;
}

}  // namespace

TEST_CASE("modes select the documented tensor sets") {
    auto model = ReportModel::create(ModelConfig{}, 1);
    for (const auto& n : trainable_names(model, AlignmentMode::Shallow)) {
        CHECK(n.starts_with("mapper."));
    }
    CHECK_THROWS_AS(trainable_names(model, AlignmentMode::Delta), ConfigError);
    const auto deep = trainable_names(model, AlignmentMode::Deep);
    CHECK(std::none_of(deep.begin(), deep.end(), [](const std::string& n) { return n.starts_with("lm."); }));
    std::mt19937_64 rng(2);
    model.apply_lora(LoraOptions{}, rng);
    for (const auto& n : trainable_names(model, AlignmentMode::Delta)) {
        CHECK((n.starts_with("mapper.") || n.ends_with(".lora_A") || n.ends_with(".lora_B")));
    }
    const auto deep_lora = trainable_names(model, AlignmentMode::Deep);
    CHECK(std::any_of(deep_lora.begin(), deep_lora.end(), [](const std::string& n) { return n.ends_with(".lora_A"); }));
}

TEST_CASE("closed-form toy counts match enumeration of flagged tensors") {
    auto model = ReportModel::create(ModelConfig{}, 1);
    std::mt19937_64 rng(2);
    model.apply_lora(LoraOptions{}, rng);
    std::size_t previous = 0;
    for (auto mode : {AlignmentMode::Shallow, AlignmentMode::Delta, AlignmentMode::Deep}) {
        const auto set = configure_mode(model, mode);
        std::size_t enumerated = 0;
        for (auto& [name, t] : model.parameters()) {
            if (t.requires_grad()) {
                enumerated += t.numel();
            }
        }
        CHECK(count_trainable(model, mode) == enumerated);
        CHECK(count_grad_bearing(model) == enumerated);
        CHECK(enumerated > previous);
        previous = enumerated;
    }
}

TEST_CASE("full-scale counts") {
    FullScaleGeometry g;
    CHECK(g.encoder.param_count() == hierarchical_oracle(g.encoder));
    CHECK(g.encoder.param_count() == 86743224);
    const auto c = g.counts();
    CHECK(c.shallow == 1024u * 4096u);
    CHECK(c.shallow == 4194304);
    std::size_t qv = 0;
    for (std::size_t s = 0; s < g.encoder.depths.size(); ++s) {
        qv += g.encoder.depths[s] * 2 * g.lora_rank * (2 * g.encoder.widths[s]);
    }
    CHECK(c.delta == c.shallow + qv);
    CHECK(c.delta == 4964352);
    CHECK(c.deep == c.shallow + hierarchical_oracle(g.encoder));
    CHECK(c.deep == 90937528);
    g.mapper_bias = true;
    CHECK(g.counts().shallow == 4194304 + 4096);
}

TEST_CASE("sgd takes one exact gradient step") {
    auto p = Tensor::from({3}, {1.0, -2.0, 0.5});
    p.set_requires_grad(true);
    sum(mul(p, Tensor::from({3}, {2.0, 3.0, -1.0}))).backward();
    TrainConfig c;
    c.optimizer = OptimizerKind::Sgd;
    c.learning_rate = 0.1;
    Optimizer opt(c);
    opt.step({{"p", p}});
    CHECK(snapshot(p) == std::vector<double>{1.0 - 0.2, -2.0 - 0.3, 0.5 + 0.1});
}

TEST_CASE("adamw first step moves by lr times the gradient sign plus decay") {
    auto p = Tensor::from({2}, {1.0, -1.0});
    p.set_requires_grad(true);
    sum(mul(p, Tensor::from({2}, {4.0, -0.5}))).backward();
    TrainConfig c;
    c.learning_rate = 0.01;
    c.weight_decay = 0.1;
    Optimizer opt(c);
    opt.step({{"p", p}});
    const auto v = snapshot(p);
    const double g0 = 4.0 / (4.0 + c.eps), g1 = -0.5 / (0.5 + c.eps);
    CHECK(v[0] == doctest::Approx(1.0 - 0.01 * 0.1 * 1.0 - 0.01 * g0).epsilon(1e-12));
    CHECK(v[1] == doctest::Approx(-1.0 + 0.01 * 0.1 * 1.0 - 0.01 * g1).epsilon(1e-12));
    CHECK(opt.steps_taken() == 1);
}

TEST_CASE("zero learning rate leaves every parameter unchanged") {
    auto model = ReportModel::create(ModelConfig{}, 1);
    const auto corpus = tiny_corpus(4);
    const auto before = snapshot(model);
    auto c = quick(AlignmentMode::Deep, 2);
    c.learning_rate = 0.0;
    fit(model, corpus, {}, c);
    CHECK(snapshot(model) == before);
}

TEST_CASE("shallow training leaves the encoder and language model byte-identical") {
    auto model = ReportModel::create(ModelConfig{}, 1);
    const auto corpus = tiny_corpus(4);
    const auto before = snapshot(model);
    fit(model, corpus, {}, quick(AlignmentMode::Shallow, 2));
    const auto after = snapshot(model);
    bool mapper_moved = false;
    for (const auto& [name, v] : before) {
        if (name.starts_with("mapper.")) {
            mapper_moved |= after.at(name) != v;
        } else {
            CHECK_MESSAGE(after.at(name) == v, name);
        }
    }
    CHECK(mapper_moved);
    CHECK(count_grad_bearing(model) == 0);
}

TEST_CASE("delta training moves only adapters and the mapper") {
    auto model = ReportModel::create(ModelConfig{}, 1);
    std::mt19937_64 rng(2);
    model.apply_lora(LoraOptions{}, rng);
    const auto before = snapshot(model);
    fit(model, tiny_corpus(4), {}, quick(AlignmentMode::Delta, 2));
    const auto after = snapshot(model);
    for (const auto& [name, v] : before) {
        const bool trainable = name.starts_with("mapper.") || name.ends_with(".lora_A") || name.ends_with(".lora_B");
        if (!trainable) {
            CHECK_MESSAGE(after.at(name) == v, name);
        }
    }
}

TEST_CASE("a few steps reduce the training loss") {
    auto model = ReportModel::create(ModelConfig{}, 1);
    const auto corpus = tiny_corpus(4);
    const double before = evaluate_loss(model, corpus);
    auto c = quick(AlignmentMode::Deep, 10);
    c.batch_size = 4;
    fit(model, corpus, {}, c);
    CHECK(evaluate_loss(model, corpus) < before);
}

TEST_CASE("a non-finite loss aborts with context") {
    auto model = ReportModel::create(ModelConfig{}, 1);
    model.mapper.weight().mutable_data()[0] = std::numeric_limits<double>::quiet_NaN();
    const auto corpus = tiny_corpus(2);
    CHECK_THROWS_WITH_AS(fit(model, corpus, {}, quick(AlignmentMode::Shallow, 1)), doctest::Contains("step"),
                         TrainingError);
}

TEST_CASE("empty training data is an error") {
    auto model = ReportModel::create(ModelConfig{}, 1);
    CHECK_THROWS(fit(model, {}, {}, quick(AlignmentMode::Shallow, 1)));
}

TEST_CASE("invalid training configuration is rejected") {
    auto c = quick(AlignmentMode::Shallow, 1);
    c.batch_size = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = quick(AlignmentMode::Shallow, 1);
    c.learning_rate = -1.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    nlohmann::json j = quick(AlignmentMode::Deep, 5);
    TrainConfig back;
    from_json(j, back);
    CHECK(back.mode == AlignmentMode::Deep);
    CHECK(back.max_steps == 5u);
    j["bogus"] = 1;
    CHECK_THROWS(from_json(j, back));
}

TEST_CASE("fit is deterministic and writes its loss log") {
    const auto corpus = tiny_corpus(6);
    const auto dir_a = scratch_dir("fit_a"), dir_b = scratch_dir("fit_b");
    auto a = ReportModel::create(ModelConfig{}, 1);
    auto b = ReportModel::create(ModelConfig{}, 1);
    auto c = quick(AlignmentMode::Shallow, 4);
    c.epochs = 2;
    c.max_steps.reset();
    const auto ra = fit(a, std::span(corpus).first(4), std::span(corpus).subspan(4), c, {dir_a});
    const auto rb = fit(b, std::span(corpus).first(4), std::span(corpus).subspan(4), c, {dir_b});
    CHECK(ra.steps == 4);
    CHECK(snapshot(a) == snapshot(b));
    std::ifstream la(dir_a / "loss.csv"), lb(dir_b / "loss.csv");
    const std::string sa((std::istreambuf_iterator<char>(la)), {}), sb((std::istreambuf_iterator<char>(lb)), {});
    CHECK(sa == sb);
    CHECK(sa.starts_with("step,split,loss\n"));
    CHECK(std::count(sa.begin(), sa.end(), '\n') == 1 + 4 + 2);
    CHECK(fs::exists(dir_a / "checkpoints" / "best" / "weights.json"));
    CHECK(fs::exists(dir_a / "checkpoints" / "last" / "weights.json"));
    REQUIRE(ra.best_val_loss.has_value());
    fs::remove_all(dir_a);
    fs::remove_all(dir_b);
}

TEST_CASE("resuming from the last checkpoint matches an uninterrupted run") {
    const auto corpus = tiny_corpus(6);
    const auto dir_full = scratch_dir("resume_full"), dir_split = scratch_dir("resume_split");
    auto full = ReportModel::create(ModelConfig{}, 1);
    auto c = quick(AlignmentMode::Shallow, 6);
    c.epochs = 3;
    c.max_steps.reset();
    fit(full, corpus, {}, c, {dir_full});

    auto part = ReportModel::create(ModelConfig{}, 1);
    auto first = c;
    first.epochs = 2;
    fit(part, corpus, {}, first, {dir_split});
    auto resumed = ReportModel::create(ModelConfig{}, 1);
    fit(resumed, corpus, {}, c, {dir_split, true});
    CHECK(snapshot(resumed) == snapshot(full));
    std::ifstream la(dir_full / "loss.csv"), lb(dir_split / "loss.csv");
    const std::string sa((std::istreambuf_iterator<char>(la)), {}), sb((std::istreambuf_iterator<char>(lb)), {});
    CHECK(sa == sb);
    fs::remove_all(dir_full);
    fs::remove_all(dir_split);
}

TEST_CASE("pretraining changes only the language model") {
    auto model = ReportModel::create(ModelConfig{}, 1);
    const auto before = snapshot(model);
    PretrainConfig p;
    p.steps = 3;
    p.batch_size = 2;
    pretrain_language_model(model, tiny_corpus(4), p);
    const auto after = snapshot(model);
    bool lm_moved = false;
    for (const auto& [name, v] : before) {
        if (name.starts_with("lm.")) {
            lm_moved |= after.at(name) != v;
        } else {
            CHECK(after.at(name) == v);
        }
    }
    CHECK(lm_moved);
    CHECK(count_grad_bearing(model) == 0);
}

TEST_CASE("training gradients agree with finite differences on the mapper") {
    auto model = ReportModel::create(ModelConfig{}, 1);
    const auto corpus = tiny_corpus(1);
    auto w = model.mapper.weight();
    w.set_requires_grad(true);
    const auto err = reportgen::testing::max_gradient_error(
        {w}, [&](const std::vector<Tensor>&) { return model.loss(corpus[0].image, corpus[0].report); }, 1e-5);
    CHECK(err < 1e-4);
    w.set_requires_grad(false);
}
