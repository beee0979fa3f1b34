// SPDX-License-Identifier: Apache-2.0

#include "reportgen/mapper.hpp"

#include <fmt/format.h>

namespace reportgen {

VisualMapper VisualMapper::create(std::size_t visual_dim, std::size_t language_dim, bool with_bias,
                                  std::mt19937_64& rng) {
    VisualMapper m;
    m.layer_ = Linear::create(visual_dim, language_dim, with_bias, rng);
    return m;
}

Tensor VisualMapper::project(const Tensor& features) const {
    if (features.rank() != 2 || features.dim(1) != visual_dim()) {
        throw DimensionError(fmt::format("mapper: features {} do not have width {}", shape_str(features.shape()),
                                         visual_dim()));
    }
    return layer_.forward(features);
}

std::size_t VisualMapper::param_count() const {
    return param_count(visual_dim(), language_dim(), layer_.bias.defined());
}

std::size_t VisualMapper::param_count(std::size_t visual_dim, std::size_t language_dim, bool with_bias) {
    return language_dim * visual_dim + (with_bias ? language_dim : 0);
}

}  // namespace reportgen
