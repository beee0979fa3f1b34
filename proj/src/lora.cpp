// SPDX-License-Identifier: Apache-2.0

#include "reportgen/lora.hpp"

#include <fmt/format.h>

#include <algorithm>

namespace reportgen {

LoraAdapter& wrap(Linear& layer, const LoraOptions& options, std::mt19937_64& rng) {
    const auto d = layer.out_features();
    const auto k = layer.in_features();
    if (options.rank == 0 || options.rank >= std::min(d, k)) {
        throw LoraConfigError(
            fmt::format("LoRA rank {} must satisfy 1 <= r < min({}, {})", options.rank, d, k));
    }
    if (!(options.alpha > 0.0)) {
        throw LoraConfigError(fmt::format("LoRA alpha must be positive, got {}", options.alpha));
    }
    if (layer.adapter) {
        throw LoraConfigError("layer already carries a LoRA adapter");
    }
    std::normal_distribution<double> dist(0.0, options.init_stddev);
    std::vector<double> a(options.rank * k);
    for (auto& v : a) {
        v = dist(rng);
    }
    layer.adapter = LoraAdapter{Tensor::from({options.rank, k}, std::move(a)),
                                Tensor::zeros({d, options.rank}), options.rank, options.alpha};
    return *layer.adapter;
}

Tensor effective_weight(const Linear& layer) {
    NoGradGuard guard;
    if (!layer.adapter) {
        return layer.weight.clone();
    }
    const auto& ad = *layer.adapter;
    return add(layer.weight, scale(matmul(ad.b, ad.a), ad.scaling()));
}

Linear merge(const Linear& layer) {
    Linear merged;
    merged.weight = effective_weight(layer);
    if (layer.bias.defined()) {
        merged.bias = layer.bias.clone();
    }
    return merged;
}

std::size_t lora_param_count(std::span<const ProjectionShape> targets, std::size_t rank) {
    std::size_t total = 0;
    for (const auto& t : targets) {
        total += rank * (t.out + t.in);
    }
    return total;
}

}  // namespace reportgen
