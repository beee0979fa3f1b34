// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "reportgen/layers.hpp"

#include <random>

namespace reportgen {

/// Trainable projection of encoder features into the language model's
/// embedding space: H_v = Z_v W_m^T (+ b), one visual token per patch.
class VisualMapper {
public:
    static VisualMapper create(std::size_t visual_dim, std::size_t language_dim, bool with_bias,
                               std::mt19937_64& rng);

    /// features [n x visual_dim] -> visual tokens [n x language_dim].
    Tensor project(const Tensor& features) const;

    std::size_t param_count() const;
    static std::size_t param_count(std::size_t visual_dim, std::size_t language_dim, bool with_bias);

    Tensor& weight() { return layer_.weight; }
    Tensor& bias() { return layer_.bias; }
    std::size_t visual_dim() const { return layer_.in_features(); }
    std::size_t language_dim() const { return layer_.out_features(); }

    void visit(const ParamVisitor& fn) {
        fn("mapper.weight", layer_.weight);
        if (layer_.bias.defined()) {
            fn("mapper.bias", layer_.bias);
        }
    }

private:
    Linear layer_;
};

}  // namespace reportgen
