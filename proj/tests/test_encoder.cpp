// SPDX-License-Identifier: Apache-2.0

#include "reportgen/encoder.hpp"
#include "reportgen/model.hpp"
#include "reportgen/trainer.hpp"

#include "gradcheck.hpp"

#include <doctest.h>

#include <algorithm>
#include <numeric>

using namespace reportgen;

namespace {

EncoderConfig small_config(std::size_t image = 32, std::size_t patch = 8) {
    EncoderConfig c;
    c.image_size = image;
    c.patch_size = patch;
    c.embed_dim = 16;
    c.num_layers = 2;
    c.num_heads = 4;
    return c;
}

Tensor random_image(std::mt19937_64& rng, std::size_t size) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> px(size * size);
    for (auto& p : px) {
        p = u(rng);
    }
    return Tensor::from({1, size, size}, px);
}

}  // namespace

TEST_CASE("32x32 image with patch 8 gives 16 tokens of width d_v") {
    std::mt19937_64 rng(1);
    auto enc = VisualEncoder::create(small_config(), rng);
    const auto z = enc.encode(random_image(rng, 32));
    CHECK(z.shape() == Shape{16, 16});
}

TEST_CASE("identical images give identical features") {
    std::mt19937_64 rng(2);
    auto enc = VisualEncoder::create(small_config(), rng);
    const auto img = random_image(rng, 32);
    const auto a = enc.encode(img);
    const auto b = enc.encode(img.clone());
    CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST_CASE("zero image with zero projection bias embeds to zero before positions") {
    std::mt19937_64 rng(3);
    auto enc = VisualEncoder::create(small_config(), rng);
    std::fill(enc.patch_embed().bias.mutable_data().begin(), enc.patch_embed().bias.mutable_data().end(), 0.0);
    const auto e = enc.embed_patches(enc.patchify(Tensor::zeros({1, 32, 32})));
    CHECK(e.shape() == Shape{16, 16});
    CHECK(std::all_of(e.data().begin(), e.data().end(), [](double v) { return v == 0.0; }));
}

TEST_CASE("patchify flattens patches row-major") {
    std::mt19937_64 rng(4);
    auto cfg = small_config(4, 2);
    cfg.embed_dim = 4;
    cfg.num_heads = 1;
    auto enc = VisualEncoder::create(cfg, rng);
    std::vector<double> px(16);
    std::iota(px.begin(), px.end(), 0.0);
    const auto p = enc.patchify(Tensor::from({1, 4, 4}, px));
    REQUIRE(p.shape() == Shape{4, 4});
    const std::vector<double> expected = {0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15};
    CHECK(std::vector<double>(p.data().begin(), p.data().end()) == expected);
}

TEST_CASE("image shape mismatch is a dimension error") {
    std::mt19937_64 rng(5);
    auto enc = VisualEncoder::create(small_config(), rng);
    CHECK_THROWS_AS(enc.encode(Tensor::zeros({1, 16, 16})), DimensionError);
    CHECK_THROWS_AS(enc.encode(Tensor::zeros({2, 32, 32})), DimensionError);
    CHECK_THROWS_AS(enc.encode(Tensor::zeros({32, 32})), DimensionError);
}

TEST_CASE("invalid configurations are rejected") {
    auto c = small_config();
    c.image_size = 30;
    CHECK_THROWS(c.validate());
    c = small_config();
    c.num_heads = 3;
    CHECK_THROWS(c.validate());
}

TEST_CASE("without positional terms the encoder is permutation equivariant") {
    std::mt19937_64 rng(6);
    auto enc = VisualEncoder::create(small_config(), rng);
    std::fill(enc.pos_embed().mutable_data().begin(), enc.pos_embed().mutable_data().end(), 0.0);
    const auto patches = enc.patchify(random_image(rng, 32));
    std::vector<std::size_t> perm(16);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    const auto width = patches.dim(1);
    std::vector<double> shuffled(patches.numel());
    for (std::size_t i = 0; i < 16; ++i) {
        std::copy_n(patches.data().begin() + static_cast<std::ptrdiff_t>(perm[i] * width), width,
                    shuffled.begin() + static_cast<std::ptrdiff_t>(i * width));
    }
    const auto out = enc.encode_patches(patches);
    const auto out_perm = enc.encode_patches(Tensor::from(patches.shape(), shuffled));
    const auto d = out.dim(1);
    double worst = 0.0;
    for (std::size_t i = 0; i < 16; ++i) {
        for (std::size_t c = 0; c < d; ++c) {
            worst = std::max(worst, std::abs(out_perm.at(i, c) - out.at(perm[i], c)));
        }
    }
    CHECK(worst < 1e-12);
}

TEST_CASE("named projections expose query and value per layer") {
    std::mt19937_64 rng(7);
    auto enc = VisualEncoder::create(small_config(), rng);
    const auto all = enc.named_projections();
    CHECK(all.size() == 1 + 2 * 6);
    CHECK(all.front().name == "encoder.patch_embed");
    const auto qv = filter_roles(all, {ProjectionRole::Query, ProjectionRole::Value});
    REQUIRE(qv.size() == 4);
    CHECK(qv[0].name == "encoder.layer0.query");
    CHECK(qv[1].name == "encoder.layer0.value");
    CHECK(qv[2].name == "encoder.layer1.query");
    CHECK(qv[3].name == "encoder.layer1.value");
    CHECK(filter_roles(all, {ProjectionRole::Query}).size() == qv.size() / 2);
}

TEST_CASE("adapter count from the handles matches the delta closed form") {
    ModelConfig mc;
    auto model = ReportModel::create(mc, 8);
    std::mt19937_64 rng(9);
    LoraOptions opt;
    model.apply_lora(opt, rng);
    std::size_t from_handles = 0;
    for (const auto& h : filter_roles(model.encoder.named_projections(), {ProjectionRole::Query, ProjectionRole::Value})) {
        from_handles += h.linear->adapter->a.numel() + h.linear->adapter->b.numel();
    }
    CHECK(from_handles == count_trainable(model, AlignmentMode::Delta) - count_trainable(model, AlignmentMode::Shallow));
    CHECK(from_handles == 2 * 2 * 16 * (32 + 32));
}

TEST_CASE("encoder gradients match finite differences") {
    std::mt19937_64 rng(10);
    EncoderConfig c;
    c.image_size = 4;
    c.patch_size = 2;
    c.embed_dim = 4;
    c.num_layers = 1;
    c.num_heads = 2;
    c.mlp_ratio = 2;
    auto enc = VisualEncoder::create(c, rng);
    const auto img = random_image(rng, 4);
    std::vector<Tensor> params;
    enc.visit([&](const std::string&, Tensor& t) {
        t.set_requires_grad(true);
        params.push_back(t);
    });
    const auto err = reportgen::testing::max_gradient_error(
        params, [&](const std::vector<Tensor>&) { return reportgen::testing::weighted_sum(enc.encode(img), 11); });
    CHECK(err < 1e-4);
}
