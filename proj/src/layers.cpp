// SPDX-License-Identifier: Apache-2.0

#include "reportgen/layers.hpp"

namespace reportgen {

Tensor truncated_normal(Shape shape, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) {
        double z = dist(rng);
        while (z < -2.0 || z > 2.0) {
            z = dist(rng);
        }
        v = z * stddev;
    }
    return Tensor::from(std::move(shape), std::move(values));
}

Linear Linear::create(std::size_t in, std::size_t out, bool with_bias, std::mt19937_64& rng, double stddev) {
    Linear l;
    l.weight = truncated_normal({out, in}, stddev, rng);
    if (with_bias) {
        l.bias = Tensor::zeros({out});
    }
    return l;
}

Tensor Linear::forward(const Tensor& x) const {
    auto y = linear(x, weight, bias);
    if (adapter) {
        auto delta = linear(linear(x, adapter->a), adapter->b);
        y = add(y, scale(delta, adapter->scaling()));
    }
    return y;
}

void Linear::visit(const std::string& name, const ParamVisitor& fn) {
    fn(name, weight);
    if (bias.defined()) {
        fn(name + ".bias", bias);
    }
    if (adapter) {
        fn(name + ".lora_A", adapter->a);
        fn(name + ".lora_B", adapter->b);
    }
}

LayerNorm LayerNorm::create(std::size_t width) {
    return {Tensor::full({width}, 1.0), Tensor::zeros({width})};
}

void LayerNorm::visit(const std::string& name, const ParamVisitor& fn) {
    fn(name, gamma);
    fn(name + ".bias", beta);
}

const char* role_name(ProjectionRole role) {
    switch (role) {
        case ProjectionRole::PatchEmbed:
            return "patch_embed";
        case ProjectionRole::Query:
            return "query";
        case ProjectionRole::Key:
            return "key";
        case ProjectionRole::Value:
            return "value";
        case ProjectionRole::Output:
            return "output";
        case ProjectionRole::MlpUp:
            return "mlp_up";
        case ProjectionRole::MlpDown:
            return "mlp_down";
    }
    return "unknown";
}

TransformerBlock TransformerBlock::create(std::size_t width, std::size_t num_heads, std::size_t mlp_ratio,
                                          bool causal, std::mt19937_64& rng) {
    if (num_heads == 0 || width % num_heads != 0) {
        throw DimensionError("transformer block: width must be divisible by the head count");
    }
    TransformerBlock b;
    b.norm1 = LayerNorm::create(width);
    b.query = Linear::create(width, width, true, rng);
    b.key = Linear::create(width, width, true, rng);
    b.value = Linear::create(width, width, true, rng);
    b.output = Linear::create(width, width, true, rng);
    b.norm2 = LayerNorm::create(width);
    b.mlp_up = Linear::create(width, width * mlp_ratio, true, rng);
    b.mlp_down = Linear::create(width * mlp_ratio, width, true, rng);
    b.num_heads = num_heads;
    b.causal = causal;
    return b;
}

Tensor TransformerBlock::forward(const Tensor& x) const {
    auto h = norm1.forward(x);
    auto attended = multi_head_attention(query.forward(h), key.forward(h), value.forward(h), num_heads, causal);
    auto x1 = add(x, output.forward(attended));
    auto m = mlp_down.forward(gelu(mlp_up.forward(norm2.forward(x1))));
    return add(x1, m);
}

void TransformerBlock::visit(const std::string& prefix, const ParamVisitor& fn) {
    norm1.visit(prefix + ".norm1", fn);
    for (auto& [role, l] : projections()) {
        if (role == ProjectionRole::MlpUp) {
            norm2.visit(prefix + ".norm2", fn);
        }
        l->visit(prefix + "." + role_name(role), fn);
    }
}

std::vector<std::pair<ProjectionRole, Linear*>> TransformerBlock::projections() {
    return {{ProjectionRole::Query, &query},   {ProjectionRole::Key, &key},
            {ProjectionRole::Value, &value},   {ProjectionRole::Output, &output},
            {ProjectionRole::MlpUp, &mlp_up},  {ProjectionRole::MlpDown, &mlp_down}};
}

}  // namespace reportgen
