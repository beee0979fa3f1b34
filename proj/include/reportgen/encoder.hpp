// SPDX-License-Identifier: Apache-2.0
//
// Patch-based transformer visual encoder. Produces the last-layer grid
// features (one token per patch, no pooling, no class token).

#pragma once

#include "reportgen/layers.hpp"

#include <optional>
#include <random>
#include <string>
#include <vector>

namespace reportgen {

struct EncoderConfig {
    std::size_t image_size = 64;
    std::size_t patch_size = 8;
    std::size_t channels = 1;
    std::size_t embed_dim = 32;
    std::size_t num_layers = 2;
    std::size_t num_heads = 4;
    std::size_t mlp_ratio = 4;

    void validate() const;
    std::size_t grid() const { return image_size / patch_size; }
    std::size_t num_patches() const { return grid() * grid(); }
    std::size_t patch_dim() const { return channels * patch_size * patch_size; }
};

/// A linear weight inside the encoder, addressable by layer and role.
struct ProjectionHandle {
    std::optional<std::size_t> layer;  // empty for the patch embedding
    ProjectionRole role;
    std::string name;
    Linear* linear = nullptr;
};

std::vector<ProjectionHandle> filter_roles(const std::vector<ProjectionHandle>& handles,
                                           std::initializer_list<ProjectionRole> roles);

class VisualEncoder {
public:
    static VisualEncoder create(const EncoderConfig& config, std::mt19937_64& rng);

    const EncoderConfig& config() const { return config_; }

    /// image [C x H x W] -> features [num_patches x embed_dim].
    Tensor encode(const Tensor& image) const;

    /// Row-major patch flattening: [num_patches x C*p*p].
    Tensor patchify(const Tensor& image) const;
    /// Patch projection only, before positional terms.
    Tensor embed_patches(const Tensor& patches) const;
    /// Everything after patchify.
    Tensor encode_patches(const Tensor& patches) const;

    std::vector<ProjectionHandle> named_projections();
    void visit(const ParamVisitor& fn);

    Tensor& pos_embed() { return pos_embed_; }
    Linear& patch_embed() { return patch_embed_; }

private:
    EncoderConfig config_;
    Linear patch_embed_;
    Tensor pos_embed_;
    std::vector<TransformerBlock> layers_;
    LayerNorm final_norm_;
};

}  // namespace reportgen
