// SPDX-License-Identifier: Apache-2.0
//
// Low-rank adaptation of frozen linear layers (delta alignment).

#pragma once

#include "reportgen/layers.hpp"

#include <random>
#include <span>
#include <stdexcept>

namespace reportgen {

class LoraConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct LoraOptions {
    std::size_t rank = 16;
    double alpha = 16.0;
    double init_stddev = 0.02;
};

/// Attaches a fresh adapter: B = 0 and A ~ N(0, init_stddev^2), so the wrapped
/// layer computes exactly what it did before. Requires 1 <= rank < min(out, in).
LoraAdapter& wrap(Linear& layer, const LoraOptions& options, std::mt19937_64& rng);

/// W0 + (alpha / rank) * B * A, or W0 when the layer carries no adapter.
Tensor effective_weight(const Linear& layer);

/// Plain layer with the adapter folded into the weight.
Linear merge(const Linear& layer);

struct ProjectionShape {
    std::size_t out = 0;
    std::size_t in = 0;
};

/// Sum over targets of rank * (out + in).
std::size_t lora_param_count(std::span<const ProjectionShape> targets, std::size_t rank);

}  // namespace reportgen
