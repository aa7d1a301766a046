#pragma once

// Whole-episode forward pass: shared embedding -> meta-learner (per variant) -> scores -> loss.

#include <random>
#include <string>
#include <vector>

#include "dam/data.hpp"
#include "dam/embedding.hpp"
#include "dam/metagen.hpp"
#include "dam/metricnet.hpp"

namespace dam {

template <typename T>
struct Model {
    ModelDims dims;
    Variant variant = Variant::full;
    EmbeddingParams<T> embedding;
    MetaLearnerParams<T> meta;

    template <typename F>
    void visit(F&& f) {
        embedding.visit(f);
        meta.visit(f);
    }
    template <typename F>
    void visit(F&& f) const {
        embedding.visit(f);
        meta.visit(f);
    }

    std::size_t parameter_count() const {
        std::size_t total = 0;
        visit([&](const std::string&, const Tensor<T>& t) { total += t.size(); });
        return total;
    }

    template <typename U>
    Model<U> cast() const {
        Model<U> out;
        out.dims = dims;
        out.variant = variant;
        if (meta.sigma_head) out.meta.sigma_head.emplace();
        std::vector<const Tensor<T>*> src;
        visit([&](const std::string&, const Tensor<T>& t) { src.push_back(&t); });
        std::size_t i = 0;
        out.visit([&](const std::string&, Tensor<U>& t) { t = src[i++]->template cast<U>(); });
        return out;
    }
};

/// Random initialisation; the stream depends only on `seed`, so variants share nothing but the seed.
template <typename T>
Model<T> init_model(const ModelDims& dims, Variant variant, std::uint64_t seed) {
    if (dims.image_side < 16) throw std::invalid_argument("image side must be at least 16");
    Rng rng = make_rng(seed, "model.init");
    Model<T> m;
    m.dims = dims;
    m.variant = variant;
    m.embedding = init_embedding<T>(dims.image_channels, rng);
    m.meta = init_meta_learner<T>(dims, variant, rng);
    return m;
}

/// Support/query features from one shared embedding pass (BN statistics over the whole episode).
template <typename T>
struct EpisodeFeatures {
    Var<T> support;  // [N·K,h,w,64]
    Var<T> query;    // [N·Q,h,w,64]
};

template <typename T>
EpisodeFeatures<T> embed_episode(Binding<T>& bind, const Model<T>& model, const Tensor<T>& support_images,
                                 const Tensor<T>& query_images, bool training) {
    Tape<T>& tape = bind.tape();
    const std::size_t ns = support_images.dim(0), nq = query_images.dim(0);
    Var<T> all = concat(std::vector<Var<T>>{tape.constant(support_images), tape.constant(query_images)});
    Var<T> feats = embed(bind, model.embedding, all, training);
    return {slice(feats, 0, ns), slice(feats, ns, ns + nq)};
}

/// Latent statistics for an episode. For no_multimodal every class entry is the same pooled Gaussian.
template <typename T>
struct EpisodeLatent {
    LatentClassStats<T> stats;
    bool shared = false;
};

template <typename T>
EpisodeLatent<T> latent_stats(Binding<T>& bind, const Model<T>& model, Var<T> support_feat, std::size_t n,
                              std::size_t k, bool training) {
    const auto& meta = model.meta;
    EpisodeLatent<T> out;
    switch (model.variant) {
        case Variant::no_pairs: {
            out.stats = class_stats(encode(bind, meta, support_feat, training), n);
            break;
        }
        case Variant::no_variance: {
            Var<T> enc = encode(bind, meta, pair_features(support_feat, build_pairs(n, k)), training);
            Var<T> sig = softplus(affine(bind, *meta.sigma_head, enc));
            const std::size_t m = enc.dim(0) / n;
            for (std::size_t c = 0; c < n; ++c) {
                out.stats.mu.push_back(row_mean(slice(enc, c * m, (c + 1) * m)));
                out.stats.sigma.push_back(row_mean(slice(sig, c * m, (c + 1) * m)));
            }
            break;
        }
        case Variant::no_multimodal: {
            Var<T> enc = encode(bind, meta, pair_features(support_feat, build_pairs(n, k)), training);
            Var<T> mu = row_mean(enc), sigma = row_std(enc);
            out.stats.mu.assign(n, mu);
            out.stats.sigma.assign(n, sigma);
            out.shared = true;
            break;
        }
        default: {
            Var<T> enc = encode(bind, meta, pair_features(support_feat, build_pairs(n, k)), training);
            out.stats = class_stats(enc, n);
            break;
        }
    }
    return out;
}

template <typename T>
LatentSample<T> draw_latent(const EpisodeLatent<T>& latent, Rng& rng, bool deterministic) {
    if (latent.shared)
        return sample_shared_latent(latent.stats.mu[0], latent.stats.sigma[0], latent.stats.classes(), rng,
                                    deterministic);
    return sample_latent(latent.stats, rng, deterministic);
}

/// Decodes one latent draw and scores every (query, support) pair: [Q, N·K].
template <typename T>
Var<T> score_with_sample(Binding<T>& bind, const Model<T>& model, const LatentSample<T>& latent,
                         const EpisodeFeatures<T>& feats, const std::vector<std::size_t>& support_labels) {
    if (model.variant == Variant::matching_net) {
        return cosine_scores(feats.support, feats.query, generate_transform(bind, latent, model.meta, model.dims));
    }
    const bool with_attention = model.variant != Variant::no_attention;
    return score_episode(feats.support, feats.query, support_labels,
                         generate_weights(bind, latent, model.meta, model.dims, with_attention));
}

template <typename T>
struct EpisodeResult {
    Var<T> scores;     // [Q, N·K]
    Var<T> log_probs;  // [Q, N]
    Var<T> loss;       // mean cross-entropy over queries
};

/// Builds the full episode graph on `bind`'s tape. `deterministic` uses the latent means.
template <typename T>
EpisodeResult<T> episode_forward(Binding<T>& bind, const Model<T>& model, const Episode& ep,
                                 const Tensor<T>& support_images, const Tensor<T>& query_images, Rng& latent_rng,
                                 bool deterministic, bool training) {
    if (ep.n != model.dims.n_way)
        throw std::invalid_argument("episode is " + std::to_string(ep.n) + "-way but the model was built for " +
                                    std::to_string(model.dims.n_way) + "-way tasks");
    EpisodeFeatures<T> feats = embed_episode(bind, model, support_images, query_images, training);
    EpisodeLatent<T> latent = latent_stats(bind, model, feats.support, ep.n, ep.k, training);
    LatentSample<T> sample = draw_latent(latent, latent_rng, deterministic);
    EpisodeResult<T> out;
    out.scores = score_with_sample(bind, model, sample, feats, ep.support_labels);
    out.log_probs = class_log_probs(out.scores, ep.support_labels, ep.n);
    out.loss = nll_loss(out.log_probs, ep.query_labels);
    return out;
}

/// Convenience: materialises the episode images and returns the scalar loss Var.
template <typename T>
Var<T> episode_loss(Binding<T>& bind, const Model<T>& model, const Dataset& dataset, const Episode& ep,
                    Rng& latent_rng, bool deterministic = false) {
    EpisodeImages imgs = materialize(dataset, ep, false);
    return episode_forward(bind, model, ep, imgs.support.template cast<T>(), imgs.query.template cast<T>(), latent_rng,
                           deterministic, true)
        .loss;
}

}  // namespace dam
