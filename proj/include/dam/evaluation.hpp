#pragma once

#include <atomic>
#include <cmath>
#include <exception>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "dam/model.hpp"

namespace dam {

/// Runs body(i) for i in [0, count) on up to `workers` threads. Results must be written by index;
/// the first exception is rethrown after all workers stop.
inline void parallel_for(std::size_t count, std::size_t workers, const std::function<void(std::size_t)>& body) {
    workers = std::max<std::size_t>(1, std::min(workers, count));
    if (workers == 1) {
        for (std::size_t i = 0; i < count; ++i) body(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < count; i = next++) {
                try {
                    body(i);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!error) error = std::current_exception();
                    next = count;
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

/// Mean accuracy (percent) with a normal-approximation 95% half-width.
struct EvalReport {
    double mean_accuracy = 0.0;
    double ci95 = 0.0;
    std::size_t episodes = 0;
    std::vector<double> per_episode;  // percent correct per episode, in episode order
};

/// ci95 = 1.96 · sample-std / sqrt(E); a single episode has zero half-width.
inline EvalReport summarize(std::vector<double> accuracies) {
    EvalReport r;
    r.episodes = accuracies.size();
    if (accuracies.empty()) return r;
    double sum = 0.0;
    for (double a : accuracies) sum += a;
    r.mean_accuracy = sum / double(accuracies.size());
    if (accuracies.size() > 1) {
        double ss = 0.0;
        for (double a : accuracies) ss += (a - r.mean_accuracy) * (a - r.mean_accuracy);
        const double sd = std::sqrt(ss / double(accuracies.size() - 1));
        r.ci95 = 1.96 * sd / std::sqrt(double(accuracies.size()));
    }
    r.per_episode = std::move(accuracies);
    return r;
}

struct EvalOptions {
    Split split = Split::test;
    std::size_t n = 5, k = 1, q = 15;
    std::size_t episodes = 1000;
    std::size_t ensemble = 1;  // 1: deterministic latent; S > 1: average scores over S sampled metrics
    std::uint64_t seed = 1;
    std::size_t workers = 1;
};

/// Class-probability estimate for one episode. Deterministic (eps = 0) unless ensemble > 1.
template <typename T>
Tensor<T> predict_episode(const Model<T>& model, const Dataset& dataset, const Episode& ep, std::size_t ensemble,
                          Rng& latent_rng) {
    EpisodeImages imgs = materialize(dataset, ep, false);
    Tape<T> tape;
    Binding<T> bind(tape, false);
    const EpisodeFeatures<T> feats =
        embed_episode(bind, model, imgs.support.template cast<T>(), imgs.query.template cast<T>(), false);
    const EpisodeLatent<T> latent = latent_stats(bind, model, feats.support, ep.n, ep.k, false);
    Tensor<T> scores;
    if (ensemble <= 1) {
        scores = score_with_sample(bind, model, draw_latent(latent, latent_rng, true), feats, ep.support_labels).value();
    } else {
        for (std::size_t s = 0; s < ensemble; ++s) {
            const Tensor<T>& draw =
                score_with_sample(bind, model, draw_latent(latent, latent_rng, false), feats, ep.support_labels).value();
            if (scores.empty()) scores = Tensor<T>(draw.shape());
            for (std::size_t i = 0; i < draw.size(); ++i) scores[i] += draw[i] / static_cast<T>(ensemble);
        }
    }
    return predict(scores, ep.support_labels, ep.n);
}

inline double accuracy_percent(const std::vector<std::size_t>& predicted, const std::vector<std::size_t>& truth) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) correct += predicted[i] == truth[i];
    return 100.0 * double(correct) / double(truth.size());
}

/// Accuracy over `episodes` random tasks of one split. Episode i depends only on (seed, split, i),
/// so the report is independent of the worker count.
template <typename T>
EvalReport evaluate_model(const Model<T>& model, const Dataset& dataset, const EvalOptions& opts) {
    if (dataset.side() != model.dims.image_side || dataset.channels() != model.dims.image_channels)
        throw std::invalid_argument("dataset images are " + std::to_string(dataset.side()) + "x" +
                                    std::to_string(dataset.side()) + "x" + std::to_string(dataset.channels()) +
                                    " but the model expects " + std::to_string(model.dims.image_side) + "x" +
                                    std::to_string(model.dims.image_side) + "x" +
                                    std::to_string(model.dims.image_channels));
    if (opts.n != model.dims.n_way)
        throw std::invalid_argument("model was trained for " + std::to_string(model.dims.n_way) +
                                    "-way tasks, evaluation requested " + std::to_string(opts.n) + "-way");
    if (opts.episodes == 0) throw std::invalid_argument("evaluation needs at least one episode");
    std::vector<double> acc(opts.episodes);
    const std::string stream = "eval.episode." + to_string(opts.split);
    parallel_for(opts.episodes, opts.workers, [&](std::size_t i) {
        Rng ep_rng = make_rng(opts.seed, stream, i);
        Rng latent_rng = make_rng(opts.seed, "eval.latent", i);
        const Episode ep = sample_episode(dataset, opts.split, opts.n, opts.k, opts.q, ep_rng);
        const Tensor<T> probs = predict_episode(model, dataset, ep, opts.ensemble, latent_rng);
        acc[i] = accuracy_percent(argmax_rows(probs), ep.query_labels);
    });
    return summarize(std::move(acc));
}

}  // namespace dam
