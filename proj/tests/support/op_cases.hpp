// SPDX-License-Identifier: Apache-2.0
//
// Random small instances (every dim <= 4) of each differentiable op, shared by
// the unit tests and the acceptance gate.

#pragma once

#include "gradcheck.hpp"

#include <string>
#include <utility>

namespace reportgen::testing {

struct OpCase {
    std::string name;
    std::vector<Tensor> inputs;
    ScalarFn fn;
};

inline std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline std::vector<OpCase> make_op_cases(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<OpCase> cases;
    const auto w = seed * 7919 + 1;

    {
        const auto m = pick(rng, 1, 4), k = pick(rng, 1, 4), n = pick(rng, 1, 4);
        cases.push_back({"matmul", {random_tensor(rng, {m, k}), random_tensor(rng, {k, n})},
                         [w](const auto& in) { return weighted_sum(matmul(in[0], in[1]), w); }});
    }
    {
        const auto t = pick(rng, 1, 4), i = pick(rng, 1, 4), o = pick(rng, 1, 4);
        cases.push_back({"linear",
                         {random_tensor(rng, {t, i}), random_tensor(rng, {o, i}), random_tensor(rng, {o})},
                         [w](const auto& in) { return weighted_sum(linear(in[0], in[1], in[2]), w); }});
    }
    const Shape s3{pick(rng, 1, 4), pick(rng, 1, 4), pick(rng, 1, 4)};
    cases.push_back({"add", {random_tensor(rng, s3), random_tensor(rng, s3)},
                     [w](const auto& in) { return weighted_sum(add(in[0], in[1]), w); }});
    cases.push_back({"sub", {random_tensor(rng, s3), random_tensor(rng, s3)},
                     [w](const auto& in) { return weighted_sum(sub(in[0], in[1]), w); }});
    cases.push_back({"mul", {random_tensor(rng, s3), random_tensor(rng, s3)},
                     [w](const auto& in) { return weighted_sum(mul(in[0], in[1]), w); }});
    cases.push_back({"scale", {random_tensor(rng, s3)},
                     [w](const auto& in) { return weighted_sum(scale(in[0], -1.7), w); }});
    cases.push_back({"gelu", {random_tensor(rng, s3, true, 1.5)},
                     [w](const auto& in) { return weighted_sum(gelu(in[0]), w); }});
    cases.push_back({"sum", {random_tensor(rng, s3)}, [](const auto& in) { return sum(in[0]); }});
    cases.push_back({"mean", {random_tensor(rng, s3)}, [](const auto& in) { return mean(in[0]); }});
    {
        const auto axis = pick(rng, 0, 2);
        cases.push_back({"softmax", {random_tensor(rng, s3, true, 2.0)},
                         [w, axis](const auto& in) { return weighted_sum(softmax(in[0], axis), w); }});
    }
    {
        const auto t = pick(rng, 1, 4), d = pick(rng, 2, 4);
        cases.push_back({"layer_norm",
                         {random_tensor(rng, {t, d}), random_tensor(rng, {d}), random_tensor(rng, {d})},
                         [w](const auto& in) { return weighted_sum(layer_norm(in[0], in[1], in[2]), w); }});
    }
    {
        const auto vocab = pick(rng, 1, 4), d = pick(rng, 1, 4), t = pick(rng, 1, 4);
        std::vector<std::int64_t> ids(t);
        for (auto& id : ids) {
            id = static_cast<std::int64_t>(pick(rng, 0, vocab - 1));
        }
        cases.push_back({"embedding", {random_tensor(rng, {vocab, d})},
                         [w, ids](const auto& in) { return weighted_sum(embedding(in[0], ids), w); }});
    }
    {
        const auto r = pick(rng, 1, 4), c = pick(rng, 1, 4);
        cases.push_back({"transpose", {random_tensor(rng, {r, c})},
                         [w](const auto& in) { return weighted_sum(transpose(in[0]), w); }});
        cases.push_back({"reshape", {random_tensor(rng, {r, c})},
                         [w, r, c](const auto& in) { return weighted_sum(reshape(in[0], {c, r}), w); }});
    }
    {
        const auto d = pick(rng, 1, 4);
        cases.push_back({"concat_rows",
                         {random_tensor(rng, {pick(rng, 1, 4), d}), random_tensor(rng, {pick(rng, 1, 4), d}),
                          random_tensor(rng, {pick(rng, 1, 4), d})},
                         [w](const auto& in) { return weighted_sum(concat_rows(in), w); }});
    }
    {
        const auto r = pick(rng, 2, 4), c = pick(rng, 1, 4);
        const auto begin = pick(rng, 0, r - 1);
        const auto end = pick(rng, begin + 1, r);
        cases.push_back({"slice_rows", {random_tensor(rng, {r, c})},
                         [w, begin, end](const auto& in) { return weighted_sum(slice_rows(in[0], begin, end), w); }});
    }
    for (bool causal : {false, true}) {
        const auto heads = pick(rng, 1, 2);
        const auto d = heads * pick(rng, 1, 2);
        const auto t = pick(rng, 1, 4);
        const auto tk = causal ? t : pick(rng, 1, 4);
        cases.push_back({causal ? "attention_causal" : "attention",
                         {random_tensor(rng, {t, d}), random_tensor(rng, {tk, d}), random_tensor(rng, {tk, d})},
                         [w, heads, causal](const auto& in) {
                             return weighted_sum(multi_head_attention(in[0], in[1], in[2], heads, causal), w);
                         }});
    }
    {
        const auto t = pick(rng, 1, 4), vocab = pick(rng, 2, 4);
        std::vector<std::int64_t> targets(t);
        std::vector<bool> include(t);
        for (std::size_t i = 0; i < t; ++i) {
            include[i] = i == 0 || pick(rng, 0, 1) == 1;
            targets[i] = include[i] ? static_cast<std::int64_t>(pick(rng, 0, vocab - 1)) : -100;
        }
        cases.push_back({"cross_entropy", {random_tensor(rng, {t, vocab}, true, 2.0)},
                         [targets, include](const auto& in) { return cross_entropy(in[0], targets, include); }});
    }
    {
        const std::size_t t = pick(rng, 1, 4), d = 4;
        cases.push_back({"composite",
                         {random_tensor(rng, {t, d}), random_tensor(rng, {d}), random_tensor(rng, {d}),
                          random_tensor(rng, {d, d})},
                         [w](const auto& in) {
                             auto h = layer_norm(in[0], in[1], in[2]);
                             auto y = gelu(linear(h, in[3]));
                             auto a = multi_head_attention(y, y, h, 2, true);
                             return weighted_sum(softmax(add(a, in[0]), 1), w);
                         }});
    }
    return cases;
}

}  // namespace reportgen::testing
