// SPDX-License-Identifier: Apache-2.0

#include "reportgen/mapper.hpp"
#include "reportgen/model.hpp"

#include <doctest.h>

#include <algorithm>

using namespace reportgen;

namespace {

void assign(Tensor& t, std::vector<double> v) {
    std::copy(v.begin(), v.end(), t.mutable_data().begin());
}

std::vector<double> values(const Tensor& t) {
    return {t.data().begin(), t.data().end()};
}

}  // namespace

TEST_CASE("identity mapper passes features through") {
    std::mt19937_64 rng(1);
    auto m = VisualMapper::create(2, 2, true, rng);
    assign(m.weight(), {1, 0, 0, 1});
    assign(m.bias(), {0, 0});
    const auto z = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6});
    CHECK(values(m.project(z)) == values(z));
}

TEST_CASE("zero mapper annihilates") {
    std::mt19937_64 rng(2);
    auto m = VisualMapper::create(3, 5, false, rng);
    assign(m.weight(), std::vector<double>(15, 0.0));
    const auto h = m.project(Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}));
    CHECK(h.shape() == Shape{2, 5});
    CHECK(values(h) == std::vector<double>(10, 0.0));
}

TEST_CASE("hand-computed two-token projection") {
    std::mt19937_64 rng(3);
    auto m = VisualMapper::create(2, 2, false, rng);
    assign(m.weight(), {1, 1, 0, 1});
    CHECK(values(m.project(Tensor::from({2, 2}, {1, 2, 3, 4}))) == std::vector<double>{3, 2, 7, 4});
}

TEST_CASE("width mismatch is a dimension error") {
    std::mt19937_64 rng(4);
    auto m = VisualMapper::create(4, 8, false, rng);
    CHECK_THROWS_AS(m.project(Tensor::zeros({3, 5})), DimensionError);
}

TEST_CASE("parameter counts") {
    CHECK(VisualMapper::param_count(1024, 4096, false) == 4194304);
    CHECK(VisualMapper::param_count(8, 16, true) == 144);
    auto model = ReportModel::create(ModelConfig{}, 5);
    CHECK(model.mapper.param_count() == 2048);
    std::size_t enumerated = 0;
    for (auto& [name, t] : model.parameters_with_prefix("mapper.")) {
        enumerated += t.numel();
    }
    CHECK(enumerated == 2048);
}

TEST_CASE("output width equals the language model width") {
    auto model = ReportModel::create(ModelConfig{}, 6);
    const auto h = model.visual_tokens(Tensor::zeros({1, 64, 64}));
    CHECK(h.shape() == Shape{64, model.lm.config().d_model});
}
