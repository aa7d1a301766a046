#pragma once

// The generated attentive metric: attention -> conv -> FC similarity, then the softmax
// attention-kernel label estimate over all support samples.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "dam/metagen.hpp"

namespace dam {

namespace detail {

template <typename T>
Var<T> stacked_attention(const std::vector<Var<T>>& attention) {
    const Shape& s = attention.front().shape();
    Var<T> flat = concat(attention);  // [N*h, w, 128]
    return reshape(flat, {attention.size(), s[0], s[1], s[2]});
}

// FC scorer applied to each row of attentive features f [P,h,w,128] -> [P].
template <typename T>
Var<T> score_attentive(Var<T> f, const GeneratedMetricWeights<T>& weights) {
    const std::size_t p = f.dim(0);
    Var<T> hidden = relu(conv2d(f, weights.conv_kernel));
    Var<T> flat = reshape(hidden, {p, hidden.size() / p});
    return reshape(linear(flat, weights.fc_weight, weights.fc_bias), {p});
}

}  // namespace detail

/// Similarity of one (support, query) feature pair under the metric of the support's class:
/// s = W·flatten(ReLU(conv(concat(x, z) ⊙ (a_n + 1)))) + b.
template <typename T>
Var<T> score_pair(Var<T> support_feat, Var<T> query_feat, std::size_t class_index,
                  const GeneratedMetricWeights<T>& weights) {
    if (class_index >= weights.attention.size())
        throw ShapeError("score_pair: class index " + std::to_string(class_index) + " out of range");
    if (support_feat.shape() != query_feat.shape() || support_feat.shape().size() != 3)
        throw ShapeError("score_pair expects matching [h,w,64] features");
    Var<T> joined = concat_channels(support_feat, query_feat);
    if (joined.shape() != weights.attention[class_index].shape())
        throw ShapeError("score_pair: feature shape " + to_string(joined.shape()) + " does not match attention " +
                         to_string(weights.attention[class_index].shape()));
    Var<T> f = mul(joined, add_scalar(weights.attention[class_index], T{1}));
    const Shape& s = f.shape();
    Var<T> batch = reshape(f, {1, s[0], s[1], s[2]});
    return reshape(detail::score_attentive(batch, weights), {1});
}

/// Scores of every query against every support sample, [Q, N·K]; columns follow the support rows
/// (class-major, shot-minor), rows follow the queries.
template <typename T>
Var<T> score_episode(Var<T> support, Var<T> query, const std::vector<std::size_t>& support_labels,
                     const GeneratedMetricWeights<T>& weights) {
    if (support.shape().size() != 4 || query.shape().size() != 4)
        throw ShapeError("score_episode expects [S,h,w,C] support and [Q,h,w,C] query features");
    const std::size_t s = support.dim(0), q = query.dim(0);
    if (support_labels.size() != s) throw ShapeError("score_episode: one label per support row required");
    std::vector<std::size_t> sup_rows, qry_rows, cls_rows;
    sup_rows.reserve(q * s);
    qry_rows.reserve(q * s);
    cls_rows.reserve(q * s);
    for (std::size_t j = 0; j < q; ++j)
        for (std::size_t c = 0; c < s; ++c) {
            sup_rows.push_back(c);
            qry_rows.push_back(j);
            if (support_labels[c] >= weights.attention.size())
                throw ShapeError("score_episode: support label out of range");
            cls_rows.push_back(support_labels[c]);
        }
    Var<T> joined = concat_channels(take(support, std::move(sup_rows)), take(query, std::move(qry_rows)));
    Var<T> multiplier = take(add_scalar(detail::stacked_attention(weights.attention), T{1}), std::move(cls_rows));
    if (multiplier.shape() != joined.shape())
        throw ShapeError("score_episode: features " + to_string(joined.shape()) + " do not match attention " +
                         to_string(multiplier.shape()));
    Var<T> scores = detail::score_attentive(mul(joined, multiplier), weights);
    return reshape(scores, {q, s});
}

/// Cosine-similarity scores between transformed query and support features (matching-net ablation).
template <typename T>
Var<T> transform_features(Var<T> features, const GeneratedTransformWeights<T>& weights) {
    const std::size_t b = features.dim(0);
    Var<T> att = add_scalar(weights.attention, T{1});
    std::vector<std::size_t> rows(b, 0);
    Var<T> f = mul(features, take(reshape(att, {1, att.dim(0), att.dim(1), att.dim(2)}), std::move(rows)));
    Var<T> hidden = relu(conv2d(f, weights.conv_kernel));
    return linear(reshape(hidden, {b, hidden.size() / b}), weights.fc_weight, weights.fc_bias);
}

template <typename T>
Var<T> cosine_scores(Var<T> support, Var<T> query, const GeneratedTransformWeights<T>& weights) {
    return cosine_similarity(transform_features(query, weights), transform_features(support, weights));
}

namespace detail {

// Sum in ascending order, so the result does not depend on how the terms were listed.
inline double sorted_sum(std::vector<double>& terms) {
    std::sort(terms.begin(), terms.end());
    double total = 0.0;
    for (double t : terms) total += t;
    return total;
}

}  // namespace detail

/// Label estimate per query: softmax over all support scores, summed per class. [Q,S] -> [Q,N].
/// Sums run in sorted order, so permuting support columns with their labels changes nothing.
template <typename T>
Tensor<T> predict(const Tensor<T>& scores, const std::vector<std::size_t>& support_labels, std::size_t classes) {
    if (scores.rank() != 2 || scores.dim(1) != support_labels.size())
        throw ShapeError("predict expects [Q,S] scores with S support labels");
    for (std::size_t label : support_labels)
        if (label >= classes) throw ShapeError("predict: support label out of range");
    const std::size_t q = scores.dim(0), s = scores.dim(1);
    Tensor<T> out({q, classes});
    std::vector<double> w(s);
    std::vector<std::vector<double>> per_class(classes);
    for (std::size_t r = 0; r < q; ++r) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < s; ++j) mx = std::max(mx, double(scores[r * s + j]));
        for (auto& terms : per_class) terms.clear();
        for (std::size_t j = 0; j < s; ++j) {
            w[j] = std::exp(double(scores[r * s + j]) - mx);
            per_class[support_labels[j]].push_back(w[j]);
        }
        std::vector<double> all = w;
        const double total = detail::sorted_sum(all);
        for (std::size_t c = 0; c < classes; ++c)
            out[r * classes + c] = static_cast<T>(detail::sorted_sum(per_class[c]) / total);
    }
    return out;
}

/// Row-wise argmax of a [Q,N] prediction.
template <typename T>
std::vector<std::size_t> argmax_rows(const Tensor<T>& probs) {
    const std::size_t q = probs.dim(0), n = probs.dim(1);
    std::vector<std::size_t> out(q);
    for (std::size_t r = 0; r < q; ++r) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < n; ++c)
            if (probs[r * n + c] > probs[r * n + best]) best = c;
        out[r] = best;
    }
    return out;
}

}  // namespace dam
