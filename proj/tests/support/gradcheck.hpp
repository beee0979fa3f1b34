// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference oracle for the autograd engine. Evaluates the
// function with recording disabled, so it never touches the backward code.

#pragma once

#include "reportgen/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace reportgen::testing {

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

inline double relative_error(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    return std::abs(analytic - numeric) / denom;
}

/// Max elementwise relative error between backward() and central differences
/// over every input that requires grad.
inline double max_gradient_error(std::vector<Tensor> inputs, const ScalarFn& fn, double h = 1e-5) {
    for (auto& t : inputs) {
        t.zero_grad();
    }
    fn(inputs).backward();

    double worst = 0.0;
    NoGradGuard guard;
    for (auto& t : inputs) {
        if (!t.requires_grad()) {
            continue;
        }
        std::vector<double> analytic(t.numel(), 0.0);
        if (t.has_grad()) {
            std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
        }
        auto values = t.mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + h;
            const double up = fn(inputs).item();
            values[i] = saved - h;
            const double down = fn(inputs).item();
            values[i] = saved;
            worst = std::max(worst, relative_error(analytic[i], (up - down) / (2.0 * h)));
        }
    }
    return worst;
}

inline Tensor random_tensor(std::mt19937_64& rng, Shape shape, bool requires_grad = true, double scale = 1.0) {
    std::normal_distribution<double> dist(0.0, scale);
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) {
        v = dist(rng);
    }
    return Tensor::from(std::move(shape), std::move(values), requires_grad);
}

/// Contracts a tensor against fixed random weights so every output element
/// contributes a distinct amount to the scalar.
inline Tensor weighted_sum(const Tensor& out, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return sum(mul(out, random_tensor(rng, out.shape(), false)));
}

}  // namespace reportgen::testing
