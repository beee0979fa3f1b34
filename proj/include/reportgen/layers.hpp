// SPDX-License-Identifier: Apache-2.0
//
// Parameterised building blocks shared by the visual encoder and the language
// model: linear projections (optionally carrying a low-rank adapter), layer
// norm, and a pre-norm transformer block.

#pragma once

#include "reportgen/tensor.hpp"

#include <functional>
#include <optional>
#include <random>
#include <string>

namespace reportgen {

using ParamVisitor = std::function<void(const std::string& name, Tensor& tensor)>;

/// Truncated normal (cut at two standard deviations) initialisation.
Tensor truncated_normal(Shape shape, double stddev, std::mt19937_64& rng);

/// Low-rank update attached to a frozen linear weight: W0 + (alpha / rank) * B * A.
struct LoraAdapter {
    Tensor a;  // [rank x in]
    Tensor b;  // [out x rank]
    std::size_t rank = 0;
    double alpha = 0.0;

    double scaling() const { return alpha / static_cast<double>(rank); }
};

struct Linear {
    Tensor weight;  // [out x in]
    Tensor bias;    // [out], may be undefined
    std::optional<LoraAdapter> adapter;

    static Linear create(std::size_t in, std::size_t out, bool with_bias, std::mt19937_64& rng,
                         double stddev = 0.02);

    std::size_t in_features() const { return weight.dim(1); }
    std::size_t out_features() const { return weight.dim(0); }
    Tensor forward(const Tensor& x) const;
    void visit(const std::string& name, const ParamVisitor& fn);
};

struct LayerNorm {
    Tensor gamma;
    Tensor beta;

    static LayerNorm create(std::size_t width);
    Tensor forward(const Tensor& x) const { return layer_norm(x, gamma, beta); }
    void visit(const std::string& name, const ParamVisitor& fn);
};

enum class ProjectionRole { PatchEmbed, Query, Key, Value, Output, MlpUp, MlpDown };

const char* role_name(ProjectionRole role);

/// Pre-norm block: x + attn(norm1(x)), then + mlp(norm2(.)).
struct TransformerBlock {
    LayerNorm norm1;
    Linear query;
    Linear key;
    Linear value;
    Linear output;
    LayerNorm norm2;
    Linear mlp_up;
    Linear mlp_down;
    std::size_t num_heads = 1;
    bool causal = false;

    static TransformerBlock create(std::size_t width, std::size_t num_heads, std::size_t mlp_ratio, bool causal,
                                   std::mt19937_64& rng);

    Tensor forward(const Tensor& x) const;
    void visit(const std::string& prefix, const ParamVisitor& fn);
    /// Linear layers with their roles, in a fixed order.
    std::vector<std::pair<ProjectionRole, Linear*>> projections();
};

}  // namespace reportgen
