// SPDX-License-Identifier: Apache-2.0

#include "reportgen/encoder.hpp"

#include <fmt/format.h>

#include <algorithm>

namespace reportgen {

void EncoderConfig::validate() const {
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
        throw DimensionError(
            fmt::format("encoder: image size {} is not divisible by patch size {}", image_size, patch_size));
    }
    if (num_heads == 0 || embed_dim % num_heads != 0) {
        throw DimensionError(
            fmt::format("encoder: embed dim {} is not divisible by {} heads", embed_dim, num_heads));
    }
    if (channels == 0 || num_layers == 0 || mlp_ratio == 0) {
        throw DimensionError("encoder: channels, layers and mlp ratio must be positive");
    }
}

std::vector<ProjectionHandle> filter_roles(const std::vector<ProjectionHandle>& handles,
                                           std::initializer_list<ProjectionRole> roles) {
    std::vector<ProjectionHandle> out;
    for (const auto& h : handles) {
        if (std::find(roles.begin(), roles.end(), h.role) != roles.end()) {
            out.push_back(h);
        }
    }
    return out;
}

VisualEncoder VisualEncoder::create(const EncoderConfig& config, std::mt19937_64& rng) {
    config.validate();
    VisualEncoder enc;
    enc.config_ = config;
    enc.patch_embed_ = Linear::create(config.patch_dim(), config.embed_dim, true, rng);
    enc.pos_embed_ = truncated_normal({config.num_patches(), config.embed_dim}, 0.02, rng);
    for (std::size_t i = 0; i < config.num_layers; ++i) {
        enc.layers_.push_back(
            TransformerBlock::create(config.embed_dim, config.num_heads, config.mlp_ratio, false, rng));
    }
    enc.final_norm_ = LayerNorm::create(config.embed_dim);
    return enc;
}

Tensor VisualEncoder::patchify(const Tensor& image) const {
    const auto& c = config_;
    const Shape expected{c.channels, c.image_size, c.image_size};
    if (image.shape() != expected) {
        throw DimensionError(fmt::format("encoder: expected image {} but got {}", shape_str(expected),
                                         shape_str(image.shape())));
    }
    const auto g = c.grid(), p = c.patch_size, s = c.image_size;
    std::vector<double> patches(c.num_patches() * c.patch_dim());
    const auto px = image.data();
    std::size_t out = 0;
    for (std::size_t gy = 0; gy < g; ++gy) {
        for (std::size_t gx = 0; gx < g; ++gx) {
            for (std::size_t ch = 0; ch < c.channels; ++ch) {
                for (std::size_t y = 0; y < p; ++y) {
                    const auto row = ch * s * s + (gy * p + y) * s + gx * p;
                    std::copy_n(px.data() + row, p, patches.data() + out);
                    out += p;
                }
            }
        }
    }
    return Tensor::from({c.num_patches(), c.patch_dim()}, std::move(patches));
}

Tensor VisualEncoder::embed_patches(const Tensor& patches) const {
    return patch_embed_.forward(patches);
}

Tensor VisualEncoder::encode_patches(const Tensor& patches) const {
    auto x = add(embed_patches(patches), pos_embed_);
    for (const auto& block : layers_) {
        x = block.forward(x);
    }
    return final_norm_.forward(x);
}

Tensor VisualEncoder::encode(const Tensor& image) const {
    return encode_patches(patchify(image));
}

std::vector<ProjectionHandle> VisualEncoder::named_projections() {
    std::vector<ProjectionHandle> handles;
    handles.push_back({std::nullopt, ProjectionRole::PatchEmbed, "encoder.patch_embed", &patch_embed_});
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        for (auto& [role, l] : layers_[i].projections()) {
            handles.push_back({i, role, fmt::format("encoder.layer{}.{}", i, role_name(role)), l});
        }
    }
    return handles;
}

void VisualEncoder::visit(const ParamVisitor& fn) {
    patch_embed_.visit("encoder.patch_embed", fn);
    fn("encoder.pos_embed", pos_embed_);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        layers_[i].visit(fmt::format("encoder.layer{}", i), fn);
    }
    final_norm_.visit("encoder.final_norm", fn);
}

}  // namespace reportgen
