#pragma once

#include <array>
#include <string>

#include "dam/params.hpp"

namespace dam {

inline constexpr std::size_t kEmbeddingFilters = 64;
inline constexpr std::size_t kEmbeddingBlocks = 4;

/// Spatial side after the embedding's four floor-halving pools.
constexpr std::size_t embedded_side(std::size_t image_side) {
    for (std::size_t i = 0; i < kEmbeddingBlocks; ++i) image_side /= 2;
    return image_side;
}

/// Four conv3x3(64)/BN/ReLU/maxpool blocks shared by support and query images.
template <typename T>
struct EmbeddingParams {
    std::array<ConvBlockParams<T>, kEmbeddingBlocks> blocks;

    template <typename F>
    void visit(F&& f) {
        for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit("embedding.block" + std::to_string(i), f);
    }
    template <typename F>
    void visit(F&& f) const {
        for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit("embedding.block" + std::to_string(i), f);
    }
};

template <typename T>
EmbeddingParams<T> init_embedding(std::size_t image_channels, Rng& rng) {
    EmbeddingParams<T> p;
    std::size_t cin = image_channels;
    for (auto& block : p.blocks) {
        block = init_conv_block<T>(cin, kEmbeddingFilters, rng);
        cin = kEmbeddingFilters;
    }
    return p;
}

/// images [B,H,W,C] -> features [B,h,w,64] with h = w = H halved (floor) four times.
template <typename T>
Var<T> embed(Binding<T>& bind, const EmbeddingParams<T>& params, Var<T> images, bool training) {
    const Shape& s = images.shape();
    if (s.size() != 4 || s[1] != s[2]) throw ShapeError("embed expects square [B,H,W,C] images, got " + to_string(s));
    if (s[1] < 16) throw ShapeError("embed needs images of at least 16x16 for four 2x2 pools, got " + to_string(s));
    if (s[3] != params.blocks[0].kernel.dim(2))
        throw ShapeError("embed: image channels " + std::to_string(s[3]) + " do not match the first block");
    Var<T> x = images;
    for (const auto& block : params.blocks) x = conv_block(bind, block, x, training, true);
    return x;
}

}  // namespace dam
