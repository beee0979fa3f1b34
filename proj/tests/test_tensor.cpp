// SPDX-License-Identifier: Apache-2.0

#include "reportgen/archive.hpp"
#include "reportgen/tensor.hpp"

#include "gradcheck.hpp"
#include "op_cases.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace reportgen;
using reportgen::testing::max_gradient_error;

namespace {

std::vector<double> values(const Tensor& t) {
    return {t.data().begin(), t.data().end()};
}

}  // namespace

TEST_CASE("matmul examples") {
    auto a = Tensor::from({2, 2}, {1, 2, 3, 4});
    CHECK(values(matmul(a, Tensor::from({2, 2}, {1, 0, 0, 1}))) == std::vector<double>{1, 2, 3, 4});
    CHECK(values(matmul(a, Tensor::zeros({2, 2}))) == std::vector<double>{0, 0, 0, 0});
    auto c = matmul(Tensor::from({1, 2}, {1, 1}), Tensor::from({2, 1}, {2, 3}));
    CHECK(c.shape() == Shape{1, 1});
    CHECK(c.item() == 5.0);
}

TEST_CASE("matmul shape mismatch names both shapes") {
    try {
        matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
        FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2x3] x [2x3]") != std::string::npos);
    }
}

TEST_CASE("softmax examples") {
    auto s = softmax(Tensor::from({2}, {0, 0}), 0);
    CHECK(s.data()[0] == doctest::Approx(0.5));
    CHECK(s.data()[1] == doctest::Approx(0.5));
    s = softmax(Tensor::from({2}, {1000, 1000}), 0);
    CHECK(s.data()[0] == 0.5);
    CHECK(s.data()[1] == 0.5);
    s = softmax(Tensor::from({2}, {0, std::log(3.0)}), 0);
    CHECK(s.data()[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(s.data()[1] == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        auto x = reportgen::testing::random_tensor(rng, {3, 4, 4}, false, 5.0);
        for (std::size_t axis = 0; axis < 3; ++axis) {
            auto y = softmax(x, axis);
            std::size_t inner = 1;
            for (std::size_t i = axis + 1; i < 3; ++i) {
                inner *= y.dim(i);
            }
            const auto n = y.dim(axis);
            for (std::size_t base = 0; base < y.numel(); ++base) {
                if ((base / inner) % n != 0) {
                    continue;
                }
                double total = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    CHECK(y.data()[base + j * inner] >= 0.0);
                    total += y.data()[base + j * inner];
                }
                CHECK(std::abs(total - 1.0) < 1e-12);
            }
        }
    }
}

TEST_CASE("cross_entropy examples") {
    const std::vector<std::int64_t> zero{0};
    CHECK(cross_entropy(Tensor::from({1, 2}, {0, 0}), zero, {true}).item() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(cross_entropy(Tensor::from({1, 2}, {std::log(3.0), 0}), zero, {true}).item() ==
          doctest::Approx(-std::log(0.75)).epsilon(1e-12));

    auto two = Tensor::from({2, 2}, {0.3, -0.2, 5.0, 1.0});
    const std::vector<std::int64_t> ids{1, 0};
    auto first = Tensor::from({1, 2}, {0.3, -0.2});
    CHECK(cross_entropy(two, ids, {true, false}).item() == cross_entropy(first, std::vector<std::int64_t>{1}, {true}).item());
}

TEST_CASE("cross_entropy ignores targets at excluded positions bitwise") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 10; ++trial) {
        auto a = reportgen::testing::random_tensor(rng, {4, 5});
        auto b = a.clone();
        b.set_requires_grad(true);
        const std::vector<bool> include{false, true, false, true};
        auto la = cross_entropy(a, std::vector<std::int64_t>{-100, 2, -100, 4}, include);
        auto lb = cross_entropy(b, std::vector<std::int64_t>{3, 2, 0, 4}, include);
        CHECK(la.item() == lb.item());
        la.backward();
        lb.backward();
        CHECK(values(a) == values(b));
        CHECK(std::vector<double>(a.grad().begin(), a.grad().end()) ==
              std::vector<double>(b.grad().begin(), b.grad().end()));
    }
}

TEST_CASE("cross_entropy with every position excluded is an error") {
    CHECK_THROWS_AS(cross_entropy(Tensor::zeros({2, 3}), std::vector<std::int64_t>{0, 0}, {false, false}),
                    std::domain_error);
}

TEST_CASE("backward examples") {
    auto x = Tensor::from({2}, {1, 2}, true);
    auto y = Tensor::from({2}, {5, 6}, true);
    sum(mul(x, x)).backward();
    CHECK(values(Tensor::from({2}, {x.grad()[0], x.grad()[1]})) == std::vector<double>{2, 4});
    CHECK_FALSE(y.has_grad());
}

TEST_CASE("fan-out accumulates") {
    auto x = Tensor::scalar(3.0, true);
    add(x, x).backward();
    CHECK(x.grad()[0] == 2.0);

    auto once = Tensor::from({3}, {1, 2, 3}, true);
    auto twice = once.clone();
    twice.set_requires_grad(true);
    sum(mul(once, once)).backward();
    sum(add(mul(twice, twice), mul(twice, twice))).backward();
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(twice.grad()[i] == 2.0 * once.grad()[i]);
    }
}

TEST_CASE("frozen tensors never accumulate grad") {
    auto frozen = Tensor::from({2, 2}, {1, 2, 3, 4});
    auto live = Tensor::from({2, 2}, {0.5, 0.1, -0.3, 0.2}, true);
    sum(matmul(frozen, live)).backward();
    CHECK_FALSE(frozen.has_grad());
    CHECK(live.has_grad());
}

TEST_CASE("backward needs a scalar") {
    auto x = Tensor::from({2}, {1, 2}, true);
    CHECK_THROWS_AS(scale(x, 2.0).backward(), std::logic_error);
}

TEST_CASE("no-grad guard stops recording") {
    auto x = Tensor::from({2}, {1, 2}, true);
    NoGradGuard guard;
    CHECK_FALSE(scale(x, 2.0).requires_grad());
}

TEST_CASE("every op matches finite differences") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        for (auto& c : reportgen::testing::make_op_cases(seed)) {
            CAPTURE(c.name);
            CAPTURE(seed);
            CHECK(max_gradient_error(c.inputs, c.fn) < 1e-4);
        }
    }
}

TEST_CASE("archive round trip and truncation") {
    const auto dir = std::filesystem::temp_directory_path() / "reportgen_archive_test";
    std::filesystem::remove_all(dir);
    const auto stem = dir / "weights";
    NamedTensors tensors{{"a", Tensor::from({2, 3}, {1, 2, 3, 4, 5, -6.25})},
                         {"b", Tensor::scalar(1e-300)}};
    save_archive(stem, tensors, {{"step", 7}});
    auto back = load_archive(stem);
    CHECK(back.attributes.at("step") == 7);
    CHECK(back.get("a").shape() == Shape{2, 3});
    CHECK(values(back.get("a")) == values(tensors[0].second));
    CHECK(back.get("b").item() == 1e-300);
    CHECK(serialize_payload(back.tensors) == serialize_payload(tensors));

    std::filesystem::resize_file(archive_payload_path(stem), 6 * 8 + 3);
    try {
        load_archive(stem);
        FAIL("expected ArchiveError");
    } catch (const ArchiveError& e) {
        CHECK(std::string(e.what()).find("'b'") != std::string::npos);
    }
    std::filesystem::remove_all(dir);
}
