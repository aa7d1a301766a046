#pragma once

// Meta-learner: cross-class pairs -> discrepancy encoder -> per-class latent Gaussians ->
// reparameterised sample -> layer-aware weight generators.

#include <array>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "dam/embedding.hpp"
#include "dam/params.hpp"

namespace dam {

/// Model variants: the full method and the five ablations.
enum class Variant { full, no_pairs, no_variance, no_multimodal, matching_net, no_attention };

inline constexpr std::array<Variant, 6> kAllVariants{Variant::full,         Variant::no_pairs,
                                                     Variant::no_variance,  Variant::no_multimodal,
                                                     Variant::matching_net, Variant::no_attention};

inline std::string to_string(Variant v) {
    switch (v) {
        case Variant::full: return "full";
        case Variant::no_pairs: return "no_pairs";
        case Variant::no_variance: return "no_variance";
        case Variant::no_multimodal: return "no_multimodal";
        case Variant::matching_net: return "matching_net";
        case Variant::no_attention: return "no_attention";
    }
    return "?";
}

inline Variant parse_variant(const std::string& s) {
    for (Variant v : kAllVariants)
        if (to_string(v) == s) return v;
    throw std::invalid_argument("unknown variant '" + s +
                                "' (expected full|no_pairs|no_variance|no_multimodal|matching_net|no_attention)");
}

/// Static sizes of one model; generator output sizes follow from them.
struct ModelDims {
    std::size_t image_side = 32;
    std::size_t image_channels = 3;
    std::size_t n_way = 5;
    std::size_t dz = 64;
    std::size_t transform_dim = 64;  // output width of the matching-net embedding transform

    std::size_t feat_side() const { return embedded_side(image_side); }
    std::size_t feat_area() const { return feat_side() * feat_side(); }
    std::size_t fc_in() const { return feat_area() * kEmbeddingFilters; }
};

inline constexpr std::size_t kPairChannels = 2 * kEmbeddingFilters;
inline constexpr std::size_t kEncoderBlocks = 3;
inline constexpr std::size_t kEncoderFilters = 64;

template <typename T>
struct MetaLearnerParams {
    std::array<ConvBlockParams<T>, kEncoderBlocks> encoder;
    AffineParams<T> gen_attention;
    AffineParams<T> gen_conv;
    AffineParams<T> gen_fc;
    std::optional<AffineParams<T>> sigma_head;  // no_variance only: per-pair sigma head

    template <typename F>
    void visit(F&& f) {
        for (std::size_t i = 0; i < encoder.size(); ++i) encoder[i].visit("meta.encoder.block" + std::to_string(i), f);
        gen_attention.visit("meta.gen_attention", f);
        gen_conv.visit("meta.gen_conv", f);
        gen_fc.visit("meta.gen_fc", f);
        if (sigma_head) sigma_head->visit("meta.sigma_head", f);
    }
    template <typename F>
    void visit(F&& f) const {
        for (std::size_t i = 0; i < encoder.size(); ++i) encoder[i].visit("meta.encoder.block" + std::to_string(i), f);
        gen_attention.visit("meta.gen_attention", f);
        gen_conv.visit("meta.gen_conv", f);
        gen_fc.visit("meta.gen_fc", f);
        if (sigma_head) sigma_head->visit("meta.sigma_head", f);
    }
};

template <typename T>
MetaLearnerParams<T> init_meta_learner(const ModelDims& dims, Variant variant, Rng& rng) {
    if (dims.n_way < 2) throw std::invalid_argument("the meta-learner needs at least 2 classes per episode");
    MetaLearnerParams<T> p;
    const std::size_t enc_in = variant == Variant::no_pairs ? kEmbeddingFilters : kPairChannels;
    p.encoder[0] = init_conv_block<T>(enc_in, kEncoderFilters, rng);
    p.encoder[1] = init_conv_block<T>(kEncoderFilters, kEncoderFilters, rng);
    p.encoder[2] = init_conv_block<T>(kEncoderFilters, dims.dz, rng);
    const std::size_t joint = dims.n_way * dims.dz;
    if (variant == Variant::matching_net) {
        p.gen_attention = init_affine<T>(dims.dz, dims.feat_area() * kEmbeddingFilters, rng);
        p.gen_conv = init_affine<T>(joint, 9 * kEmbeddingFilters * kEmbeddingFilters, rng);
        p.gen_fc = init_affine<T>(joint, dims.transform_dim * dims.fc_in() + dims.transform_dim, rng);
    } else {
        p.gen_attention = init_affine<T>(dims.dz, dims.feat_area() * kPairChannels, rng);
        p.gen_conv = init_affine<T>(joint, 9 * kPairChannels * kEmbeddingFilters, rng);
        p.gen_fc = init_affine<T>(joint, dims.fc_in() + 1, rng);
    }
    if (variant == Variant::no_variance) p.sigma_head = init_affine<T>(dims.dz, dims.dz, rng);
    return p;
}

// ---------------------------------------------------------------------------------------------
// Cross-class pairs

/// Support rows (class-major: row = class * K + shot) joined by one cross-class pair.
struct CrossClassPair {
    std::size_t anchor_class;
    std::size_t anchor_row;
    std::size_t other_class;
    std::size_t other_row;
};

/// Every (anchor shot, other class, other shot) combination for each anchor class, grouped by
/// anchor class: K²(N−1) pairs per class, N·K²(N−1) in total.
inline std::vector<CrossClassPair> build_pairs(std::size_t n, std::size_t k) {
    if (n < 2) throw std::invalid_argument("cross-class pairs need at least 2 classes, got " + std::to_string(n));
    if (k < 1) throw std::invalid_argument("cross-class pairs need at least 1 shot");
    std::vector<CrossClassPair> pairs;
    pairs.reserve(n * k * k * (n - 1));
    for (std::size_t c = 0; c < n; ++c)
        for (std::size_t s = 0; s < k; ++s)
            for (std::size_t d = 0; d < n; ++d) {
                if (d == c) continue;
                for (std::size_t l = 0; l < k; ++l) pairs.push_back({c, c * k + s, d, d * k + l});
            }
    return pairs;
}

/// Channel concatenation (anchor, other) of every pair: support [N·K,h,w,64] -> [P,h,w,128].
template <typename T>
Var<T> pair_features(Var<T> support, const std::vector<CrossClassPair>& pairs) {
    std::vector<std::size_t> anchors, others;
    anchors.reserve(pairs.size());
    others.reserve(pairs.size());
    for (const auto& p : pairs) {
        anchors.push_back(p.anchor_row);
        others.push_back(p.other_row);
    }
    return concat_channels(take(support, std::move(anchors)), take(support, std::move(others)));
}

// ---------------------------------------------------------------------------------------------
// Discrepancy encoder and latent statistics

/// Three conv blocks; the first two max-pool while the map is at least 2x2, the last ends in global
/// average pooling. x [P,h,w,C] -> [P,dz].
template <typename T>
Var<T> encode(Binding<T>& bind, const MetaLearnerParams<T>& params, Var<T> x, bool training) {
    for (std::size_t i = 0; i < kEncoderBlocks; ++i) {
        const bool last = i + 1 == kEncoderBlocks;
        const bool can_pool = x.dim(1) >= 2 && x.dim(2) >= 2;
        x = conv_block(bind, params.encoder[i], x, training, !last && can_pool);
    }
    return global_avg_pool(x);
}

/// Per-class latent Gaussian (mu, sigma), each [dz].
template <typename T>
struct LatentClassStats {
    std::vector<Var<T>> mu;
    std::vector<Var<T>> sigma;

    std::size_t classes() const { return mu.size(); }
};

/// Splits encodings [N·M,dz] into N consecutive groups of M rows; mu is the mean and sigma the
/// Bessel-corrected standard deviation of each group. M < 2 yields sigma = 0 (counted on the tape).
template <typename T>
LatentClassStats<T> class_stats(Var<T> encodings, std::size_t n) {
    if (encodings.shape().size() != 2 || n == 0 || encodings.dim(0) % n != 0)
        throw ShapeError("class_stats: " + to_string(encodings.shape()) + " cannot be split into " + std::to_string(n) +
                         " equal groups");
    const std::size_t m = encodings.dim(0) / n;
    LatentClassStats<T> stats;
    for (std::size_t c = 0; c < n; ++c) {
        Var<T> group = slice(encodings, c * m, (c + 1) * m);
        stats.mu.push_back(row_mean(group));
        stats.sigma.push_back(row_std(group));
    }
    return stats;
}

/// One reparameterised draw per class and their concatenation in class order.
template <typename T>
struct LatentSample {
    std::vector<Var<T>> per_class;
    Var<T> joint;
};

/// d = eps ⊙ sigma + mu with a fresh eps ~ N(0, I) per class; `deterministic` uses eps = 0.
template <typename T>
LatentSample<T> sample_latent(const LatentClassStats<T>& stats, Rng& rng, bool deterministic) {
    LatentSample<T> out;
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (std::size_t c = 0; c < stats.classes(); ++c) {
        if (deterministic) {
            out.per_class.push_back(stats.mu[c]);
            continue;
        }
        Tape<T>& tape = stats.mu[c].tape();
        Tensor<T> eps(stats.sigma[c].shape());
        for (auto& v : eps.data()) v = static_cast<T>(gauss(rng));
        out.per_class.push_back(add(mul(tape.constant(std::move(eps)), stats.sigma[c]), stats.mu[c]));
    }
    out.joint = concat(out.per_class);
    return out;
}

/// Single pooled Gaussian shared by all classes: one draw, tiled N times.
template <typename T>
LatentSample<T> sample_shared_latent(Var<T> mu, Var<T> sigma, std::size_t n, Rng& rng, bool deterministic) {
    LatentClassStats<T> one{{mu}, {sigma}};
    LatentSample<T> single = sample_latent(one, rng, deterministic);
    LatentSample<T> out;
    out.per_class.assign(n, single.per_class[0]);
    out.joint = concat(out.per_class);
    return out;
}

// ---------------------------------------------------------------------------------------------
// Weight generation

/// The generated base learner: per-class attention, conv kernel and FC scorer.
template <typename T>
struct GeneratedMetricWeights {
    std::vector<Var<T>> attention;  // N x [h,w,128], values in [0,1]
    Var<T> conv_kernel;             // [3,3,128,64], each output filter unit-l2
    Var<T> fc_weight;               // [1, h·w·64], unit-l2
    Var<T> fc_bias;                 // [1]
};

/// Generated three-layer embedding transform used by the matching-net ablation.
template <typename T>
struct GeneratedTransformWeights {
    Var<T> attention;    // [h,w,64]
    Var<T> conv_kernel;  // [3,3,64,64], each output filter unit-l2
    Var<T> fc_weight;    // [E, h·w·64], each row unit-l2
    Var<T> fc_bias;      // [E]
};

namespace detail {

template <typename T>
Var<T> normalized_kernel(Binding<T>& bind, const AffineParams<T>& gen, Var<T> joint, std::size_t cin, std::size_t cout) {
    Var<T> raw = affine(bind, gen, joint);
    Var<T> unit = l2_normalize(raw, NormAxis::columns, 9 * cin, cout);
    return reshape(unit, {3, 3, cin, cout});
}

}  // namespace detail

/// Decodes a latent sample into metric weights. Attention for class n comes from that class's own
/// draw; the conv and FC layers from the joint concatenation. `with_attention = false` fixes every
/// attention map to zero.
template <typename T>
GeneratedMetricWeights<T> generate_weights(Binding<T>& bind, const LatentSample<T>& latent,
                                           const MetaLearnerParams<T>& params, const ModelDims& dims,
                                           bool with_attention = true) {
    const std::size_t h = dims.feat_side(), w = dims.feat_side();
    if (latent.per_class.size() != dims.n_way || latent.joint.size() != params.gen_conv.in_dim())
        throw ShapeError("generate_weights: latent sample does not match the generator input sizes");
    if (params.gen_attention.out_dim() != h * w * kPairChannels)
        throw ShapeError("generate_weights: attention generator does not match the feature map size");
    GeneratedMetricWeights<T> out;
    Tape<T>& tape = bind.tape();
    for (const Var<T>& d : latent.per_class) {
        if (with_attention) {
            out.attention.push_back(reshape(sigmoid(affine(bind, params.gen_attention, d)), {h, w, kPairChannels}));
        } else {
            out.attention.push_back(tape.constant(Tensor<T>({h, w, kPairChannels})));
        }
    }
    out.conv_kernel = detail::normalized_kernel(bind, params.gen_conv, latent.joint, kPairChannels, kEmbeddingFilters);
    const std::size_t d_fc = dims.fc_in();
    Var<T> fc = affine(bind, params.gen_fc, latent.joint);
    out.fc_weight = reshape(l2_normalize(slice(fc, 0, d_fc), NormAxis::rows, 1, d_fc), {1, d_fc});
    out.fc_bias = slice(fc, d_fc, d_fc + 1);
    return out;
}

/// Matching-net ablation: generates an embedding transform instead of a metric. Its attention is
/// class-agnostic (queries carry no class), decoded from the mean of the per-class draws.
template <typename T>
GeneratedTransformWeights<T> generate_transform(Binding<T>& bind, const LatentSample<T>& latent,
                                                const MetaLearnerParams<T>& params, const ModelDims& dims) {
    const std::size_t h = dims.feat_side(), w = dims.feat_side(), e = dims.transform_dim, d_fc = dims.fc_in();
    if (params.gen_fc.out_dim() != e * d_fc + e)
        throw ShapeError("generate_transform: parameters were not built for the matching-net variant");
    GeneratedTransformWeights<T> out;
    Var<T> mean_d = latent.per_class[0];
    for (std::size_t c = 1; c < latent.per_class.size(); ++c) mean_d = add(mean_d, latent.per_class[c]);
    mean_d = scale(mean_d, T{1} / static_cast<T>(latent.per_class.size()));
    out.attention = reshape(sigmoid(affine(bind, params.gen_attention, mean_d)), {h, w, kEmbeddingFilters});
    out.conv_kernel =
        detail::normalized_kernel(bind, params.gen_conv, latent.joint, kEmbeddingFilters, kEmbeddingFilters);
    Var<T> fc = affine(bind, params.gen_fc, latent.joint);
    out.fc_weight = reshape(l2_normalize(slice(fc, 0, e * d_fc), NormAxis::rows, e, d_fc), {e, d_fc});
    out.fc_bias = slice(fc, e * d_fc, e * d_fc + e);
    return out;
}

}  // namespace dam
