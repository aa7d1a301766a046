#pragma once

// Episodic training: batches of tasks, summed task losses, one Adam step per batch,
// step-decayed learning rate, best-on-validation checkpoint.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dam/checkpoint.hpp"
#include "dam/config.hpp"
#include "dam/evaluation.hpp"
#include "dam/model.hpp"

namespace dam {

/// Where the images come from: a regenerated synthetic set or a class-per-directory tree.
struct DataConfig {
    std::string source = "synthetic";
    std::string root;
    SyntheticSpec synthetic;

    static DataConfig from(const KeyValueConfig& cfg) {
        DataConfig d;
        d.source = cfg.get_string("data.source", d.source);
        d.root = cfg.get_string("data.root", d.root);
        d.synthetic.classes = cfg.get_uint("data.classes", d.synthetic.classes);
        d.synthetic.per_class = cfg.get_uint("data.per_class", d.synthetic.per_class);
        d.synthetic.side = cfg.get_uint("data.side", d.synthetic.side);
        d.synthetic.seed = cfg.get_uint("data.seed", d.synthetic.seed);
        if (d.source != "synthetic" && d.source != "directory")
            throw ConfigError("data.source must be 'synthetic' or 'directory', got '" + d.source + "'");
        if (d.source == "directory" && d.root.empty()) throw ConfigError("data.source = directory needs data.root");
        return d;
    }

    void write(KeyValueConfig& cfg) const {
        cfg.set("data.source", source);
        if (!root.empty()) cfg.set("data.root", root);
        cfg.set("data.classes", std::to_string(synthetic.classes));
        cfg.set("data.per_class", std::to_string(synthetic.per_class));
        cfg.set("data.side", std::to_string(synthetic.side));
        cfg.set("data.seed", std::to_string(synthetic.seed));
    }
};

inline Dataset load_dataset(const DataConfig& d) {
    if (d.source == "directory") return load_directory(d.root);
    return make_synthetic(d.synthetic);
}

struct TrainConfig {
    std::size_t n = 5, k = 1, q = 15;
    std::size_t epochs = 120;
    std::size_t tasks_per_epoch = 1000;
    std::size_t batch_tasks = 4;
    double lr = 1e-3;
    double lr_decay = 0.9;
    std::size_t lr_decay_every = 2;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double clip_norm = 0.0;  // global-norm clipping threshold, 0 = off
    std::uint64_t seed = 1;
    Variant variant = Variant::full;
    std::size_t val_episodes = 100;
    std::size_t test_episodes = 1000;
    std::size_t dz = 64;
    bool augment = true;
    std::size_t workers = 1;
    DataConfig data;

    static TrainConfig from(const KeyValueConfig& cfg) {
        TrainConfig c;
        c.n = cfg.get_uint("n", c.n);
        c.k = cfg.get_uint("k", c.k);
        c.q = cfg.get_uint("q", c.q);
        c.epochs = cfg.get_uint("epochs", c.epochs);
        c.tasks_per_epoch = cfg.get_uint("tasks_per_epoch", c.tasks_per_epoch);
        c.batch_tasks = cfg.get_uint("batch_tasks", c.batch_tasks);
        c.lr = cfg.get_double("lr", c.lr);
        c.lr_decay = cfg.get_double("lr_decay", c.lr_decay);
        c.lr_decay_every = cfg.get_uint("lr_decay_every", c.lr_decay_every);
        c.adam_beta1 = cfg.get_double("adam_beta1", c.adam_beta1);
        c.adam_beta2 = cfg.get_double("adam_beta2", c.adam_beta2);
        c.adam_eps = cfg.get_double("adam_eps", c.adam_eps);
        c.clip_norm = cfg.get_double("clip_norm", c.clip_norm);
        c.seed = cfg.get_uint("seed", c.seed);
        try {
            c.variant = parse_variant(cfg.get_string("variant", to_string(c.variant)));
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
        c.val_episodes = cfg.get_uint("val_episodes", c.val_episodes);
        c.test_episodes = cfg.get_uint("test_episodes", c.test_episodes);
        c.dz = cfg.get_uint("dz", c.dz);
        c.augment = cfg.get_bool("augment", c.augment);
        c.workers = cfg.get_uint("workers", c.workers);
        c.data = DataConfig::from(cfg);
        c.validate();
        return c;
    }

    KeyValueConfig to_config() const {
        KeyValueConfig cfg;
        cfg.set("n", std::to_string(n));
        cfg.set("k", std::to_string(k));
        cfg.set("q", std::to_string(q));
        cfg.set("epochs", std::to_string(epochs));
        cfg.set("tasks_per_epoch", std::to_string(tasks_per_epoch));
        cfg.set("batch_tasks", std::to_string(batch_tasks));
        cfg.set("lr", format_double(lr));
        cfg.set("lr_decay", format_double(lr_decay));
        cfg.set("lr_decay_every", std::to_string(lr_decay_every));
        cfg.set("adam_beta1", format_double(adam_beta1));
        cfg.set("adam_beta2", format_double(adam_beta2));
        cfg.set("adam_eps", format_double(adam_eps));
        cfg.set("clip_norm", format_double(clip_norm));
        cfg.set("seed", std::to_string(seed));
        cfg.set("variant", to_string(variant));
        cfg.set("val_episodes", std::to_string(val_episodes));
        cfg.set("test_episodes", std::to_string(test_episodes));
        cfg.set("dz", std::to_string(dz));
        cfg.set("augment", augment ? "true" : "false");
        cfg.set("workers", std::to_string(workers));
        data.write(cfg);
        return cfg;
    }

    void validate() const {
        if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be positive");
        if (epochs < 1) throw ConfigError("epochs must be at least 1");
        if (n < 2) throw ConfigError("n must be at least 2");
        if (k < 1 || q < 1) throw ConfigError("k and q must be at least 1");
        if (n * k < 2) throw ConfigError("an episode needs at least two support images");
        if (tasks_per_epoch < 1 || batch_tasks < 1) throw ConfigError("tasks_per_epoch and batch_tasks must be positive");
        if (!(lr_decay > 0.0) || lr_decay_every < 1) throw ConfigError("lr_decay must be positive, lr_decay_every >= 1");
        if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
            throw ConfigError("adam betas must lie in [0, 1)");
        if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
        if (clip_norm < 0.0) throw ConfigError("clip_norm must be non-negative");
        if (val_episodes < 1) throw ConfigError("val_episodes must be at least 1");
        if (dz < 1) throw ConfigError("dz must be positive");
        if (workers < 1) throw ConfigError("workers must be at least 1");
    }

    /// Learning rate used throughout (zero-based) `epoch`.
    double lr_at(std::size_t epoch) const {
        return lr * std::pow(lr_decay, double(epoch / lr_decay_every));
    }

    ModelDims dims(const Dataset& dataset) const {
        ModelDims d;
        d.image_side = dataset.side();
        d.image_channels = dataset.channels();
        d.n_way = n;
        d.dz = dz;
        return d;
    }
};

/// The matching-net ablation of a configuration: same seeds and schedule, cosine scoring.
inline TrainConfig matching_net_variant(TrainConfig config) {
    config.variant = Variant::matching_net;
    return config;
}

/// First and second Adam moments, aligned with Model::visit order.
struct AdamState {
    std::vector<Tensor<float>> m, v;
    std::uint64_t step = 0;
};

inline AdamState init_adam(const Model<float>& model) {
    AdamState s;
    model.visit([&](const std::string&, const Tensor<float>& p) {
        s.m.emplace_back(p.shape());
        s.v.emplace_back(p.shape());
    });
    return s;
}

/// Per-task random streams, keyed by the global task index.
struct TaskStreams {
    Rng episode, augment, latent;
};

inline TaskStreams task_streams(std::uint64_t seed, std::uint64_t task) {
    return {make_rng(seed, "train.episode", task), make_rng(seed, "train.augment", task),
            make_rng(seed, "train.latent", task)};
}

struct TaskResult {
    double loss = 0.0;
    std::vector<Tensor<float>> grads;  // visit order; empty where no gradient reached the parameter
};

namespace detail {

inline std::string score_summary(const Tensor<float>& scores) {
    double lo = INFINITY, hi = -INFINITY, sum = 0.0;
    std::size_t bad = 0;
    for (float s : scores.data()) {
        if (!std::isfinite(s)) {
            ++bad;
            continue;
        }
        lo = std::min(lo, double(s));
        hi = std::max(hi, double(s));
        sum += s;
    }
    const std::size_t good = scores.size() - bad;
    return "scores " + to_string(scores.shape()) + ": min " + format_double(lo) + ", max " + format_double(hi) +
           ", mean " + format_double(good ? sum / double(good) : 0.0) + ", non-finite " + std::to_string(bad);
}

}  // namespace detail

/// Loss and parameter gradients for one training task. With `sinks` (visit order) the gradients are
/// added into those tensors and the returned grads stay empty.
inline TaskResult run_task(const Model<float>& model, const Dataset& dataset, const TrainConfig& config,
                           std::uint64_t task, std::vector<Tensor<float>>* sinks = nullptr) {
    TaskStreams rng = task_streams(config.seed, task);
    const Episode ep = sample_episode(dataset, Split::train, config.n, config.k, config.q, rng.episode);
    const EpisodeImages imgs = materialize(dataset, ep, config.augment, &rng.augment);
    Tape<float> tape;
    Binding<float> bind(tape, true);
    if (sinks) {
        std::size_t i = 0;
        model.visit([&](const std::string&, const Tensor<float>& p) { bind.set_sink(p, (*sinks)[i++]); });
    }
    std::optional<Var<float>> scores;
    Var<float> loss;
    try {
        EpisodeFeatures<float> feats = embed_episode(bind, model, imgs.support, imgs.query, true);
        EpisodeLatent<float> latent = latent_stats(bind, model, feats.support, ep.n, ep.k, true);
        scores = score_with_sample(bind, model, draw_latent(latent, rng.latent, false), feats, ep.support_labels);
        loss = nll_loss(class_log_probs(*scores, ep.support_labels, ep.n), ep.query_labels);
    } catch (const NumericError& e) {
        throw NumericError("training task " + std::to_string(task) + ": " + e.what() +
                           (scores ? "; " + detail::score_summary(scores->value()) : std::string()));
    }
    TaskResult r;
    r.loss = loss.value()[0];
    tape.backward(loss);
    if (!sinks) {
        model.visit([&](const std::string&, const Tensor<float>& p) {
            const Tensor<float>* g = bind.grad(p);
            r.grads.push_back(g ? *g : Tensor<float>());
        });
    }
    return r;
}

struct BatchResult {
    double loss = 0.0;  // sum of task losses
    std::vector<double> task_losses;
    std::vector<Tensor<float>> grads;  // summed over tasks, visit order
};

/// Tasks [first, first + count): losses and summed gradients. A single worker accumulates every task
/// straight into the batch gradient; several workers run groups of tasks concurrently and add their
/// gradients in task order.
inline BatchResult run_batch(const Model<float>& model, const Dataset& dataset, const TrainConfig& config,
                             std::uint64_t first, std::size_t count) {
    BatchResult b;
    model.visit([&](const std::string&, const Tensor<float>& p) { b.grads.emplace_back(p.shape()); });
    if (config.workers <= 1) {
        for (std::size_t i = 0; i < count; ++i) {
            const TaskResult r = run_task(model, dataset, config, first + i, &b.grads);
            b.loss += r.loss;
            b.task_losses.push_back(r.loss);
        }
        return b;
    }
    for (std::size_t start = 0; start < count; start += config.workers) {
        const std::size_t len = std::min(config.workers, count - start);
        std::vector<TaskResult> results(len);
        parallel_for(len, config.workers,
                     [&](std::size_t i) { results[i] = run_task(model, dataset, config, first + start + i); });
        for (auto& r : results) {
            b.loss += r.loss;
            b.task_losses.push_back(r.loss);
            for (std::size_t p = 0; p < r.grads.size(); ++p) {
                if (r.grads[p].empty()) continue;
                float* dst = b.grads[p].raw();
                const float* src = r.grads[p].raw();
                for (std::size_t e = 0; e < r.grads[p].size(); ++e) dst[e] += src[e];
            }
        }
    }
    return b;
}

/// Global gradient norm before clipping.
inline double global_norm(const std::vector<Tensor<float>>& grads) {
    double total = 0.0;
    for (const auto& g : grads)
        for (float v : g.data()) total += double(v) * v;
    return std::sqrt(total);
}

/// Clips by global norm (when enabled) and applies one Adam update. Returns the pre-clip norm.
inline double adam_step(Model<float>& model, AdamState& state, std::vector<Tensor<float>>& grads, double lr,
                        const TrainConfig& config) {
    const double norm = global_norm(grads);
    if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
    const float clip = (config.clip_norm > 0.0 && norm > config.clip_norm) ? float(config.clip_norm / norm) : 1.0f;
    ++state.step;
    const double b1 = config.adam_beta1, b2 = config.adam_beta2;
    const float c1 = float(1.0 / (1.0 - std::pow(b1, double(state.step))));
    const float c2 = float(1.0 / (1.0 - std::pow(b2, double(state.step))));
    const float fb1 = float(b1), fb2 = float(b2), eps = float(config.adam_eps), flr = float(lr);
    std::size_t i = 0;
    model.visit([&](const std::string&, Tensor<float>& p) {
        float* w = p.raw();
        float* m = state.m[i].raw();
        float* v = state.v[i].raw();
        const float* g = grads[i].raw();
        for (std::size_t e = 0; e < p.size(); ++e) {
            const float ge = g[e] * clip;
            m[e] = fb1 * m[e] + (1.0f - fb1) * ge;
            v[e] = fb2 * v[e] + (1.0f - fb2) * ge * ge;
            w[e] -= flr * (m[e] * c1) / (std::sqrt(v[e] * c2) + eps);
        }
        ++i;
    });
    return norm;
}

/// Everything needed to resume evaluation or inspect a run.
struct Checkpoint {
    TrainConfig config;
    Model<float> model;
    AdamState adam;
    NormStats norm;
    std::size_t epoch = 0;  // epochs completed when this snapshot was taken
    std::size_t best_epoch = 0;
    double best_val_acc = -1.0;
};

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
    CheckpointFile file;
    file.config = ck.config.to_config();
    file.config.set("ckpt.epoch", std::to_string(ck.epoch));
    file.config.set("ckpt.best_epoch", std::to_string(ck.best_epoch));
    file.config.set("ckpt.best_val_acc", format_double(ck.best_val_acc));
    file.config.set("ckpt.adam_step", std::to_string(ck.adam.step));
    file.config.set("ckpt.image_side", std::to_string(ck.model.dims.image_side));
    file.config.set("ckpt.image_channels", std::to_string(ck.model.dims.image_channels));
    std::vector<std::string> names;
    ck.model.visit([&](const std::string& name, const Tensor<float>& t) {
        names.push_back(name);
        file.tensors.emplace_back(name, t);
    });
    for (std::size_t i = 0; i < names.size() && i < ck.adam.m.size(); ++i) {
        file.tensors.emplace_back("adam.m." + names[i], ck.adam.m[i]);
        file.tensors.emplace_back("adam.v." + names[i], ck.adam.v[i]);
    }
    const std::size_t c = ck.norm.mean.size();
    Tensor<float> mean({c}), stddev({c});
    for (std::size_t i = 0; i < c; ++i) {
        mean[i] = ck.norm.mean[i];
        stddev[i] = ck.norm.stddev[i];
    }
    file.tensors.emplace_back("data.norm_mean", std::move(mean));
    file.tensors.emplace_back("data.norm_std", std::move(stddev));
    write_checkpoint_file(path, file);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    CheckpointFile file = read_checkpoint_file(path);
    Checkpoint ck;
    ck.config = TrainConfig::from(file.config);
    ck.epoch = file.config.get_uint("ckpt.epoch", 0);
    ck.best_epoch = file.config.get_uint("ckpt.best_epoch", 0);
    ck.best_val_acc = file.config.get_double("ckpt.best_val_acc", -1.0);
    ck.adam.step = file.config.get_uint("ckpt.adam_step", 0);
    ModelDims dims;
    dims.image_side = file.config.get_uint("ckpt.image_side", dims.image_side);
    dims.image_channels = file.config.get_uint("ckpt.image_channels", dims.image_channels);
    dims.n_way = ck.config.n;
    dims.dz = ck.config.dz;
    ck.model.dims = dims;
    ck.model.variant = ck.config.variant;
    if (ck.config.variant == Variant::no_variance) ck.model.meta.sigma_head.emplace();
    ck.model.visit([&](const std::string& name, Tensor<float>& t) {
        t = file.tensor(name);
        if (file.has_tensor("adam.m." + name)) {
            ck.adam.m.push_back(file.tensor("adam.m." + name));
            ck.adam.v.push_back(file.tensor("adam.v." + name));
        }
    });
    // Shapes must agree with a freshly built model of the recorded dimensions.
    const Model<float> reference = init_model<float>(dims, ck.config.variant, 0);
    std::vector<Shape> expected;
    reference.visit([&](const std::string&, const Tensor<float>& t) { expected.push_back(t.shape()); });
    std::size_t i = 0;
    ck.model.visit([&](const std::string& name, const Tensor<float>& t) {
        if (t.shape() != expected[i])
            throw CheckpointError("tensor '" + name + "' has shape " + to_string(t.shape()) + ", expected " +
                                  to_string(expected[i]));
        if (!ck.adam.m.empty() && (ck.adam.m[i].shape() != t.shape() || ck.adam.v[i].shape() != t.shape()))
            throw CheckpointError("optimizer moments for '" + name + "' do not match the parameter shape");
        ++i;
    });
    if (!ck.adam.m.empty() && ck.adam.m.size() != i) throw CheckpointError("optimizer moments are incomplete");
    const Tensor<float>& mean = file.tensor("data.norm_mean");
    const Tensor<float>& stddev = file.tensor("data.norm_std");
    ck.norm.mean.assign(mean.data().begin(), mean.data().end());
    ck.norm.stddev.assign(stddev.data().begin(), stddev.data().end());
    return ck;
}

/// Rebuilds the checkpoint's dataset and applies its stored normalisation. Rejects image-size mismatches.
inline Dataset dataset_for(const Checkpoint& ck) {
    Dataset ds = load_dataset(ck.config.data);
    if (ds.side() != ck.model.dims.image_side || ds.channels() != ck.model.dims.image_channels)
        throw ConfigError("dataset images are " + std::to_string(ds.side()) + "x" + std::to_string(ds.side()) + "x" +
                          std::to_string(ds.channels()) + " but the checkpoint expects " +
                          std::to_string(ck.model.dims.image_side) + "x" + std::to_string(ck.model.dims.image_side) +
                          "x" + std::to_string(ck.model.dims.image_channels));
    ds.set_norm(ck.norm);
    return ds;
}

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;  // mean task loss
    double val_acc = 0.0;
    double lr = 0.0;
    double wall_seconds = 0.0;  // since training started
};

struct TrainHooks {
    std::function<void(const EpochRecord&)> on_epoch;
    std::function<void(std::size_t epoch, std::size_t batch, const BatchResult&)> on_batch;
    std::filesystem::path run_log;  // CSV, written after every epoch when set
};

struct TrainOutcome {
    Checkpoint best;
    Checkpoint last;
    std::vector<EpochRecord> history;
    double first_batch_loss = 0.0;
};

inline EvalOptions validation_options(const TrainConfig& config) {
    EvalOptions o;
    o.split = Split::val;
    o.n = config.n;
    o.k = config.k;
    o.q = config.q;
    o.episodes = config.val_episodes;
    o.seed = config.seed;
    o.workers = config.workers;
    return o;
}

inline TrainOutcome train(const TrainConfig& config, const Dataset& dataset, const TrainHooks& hooks = {}) {
    config.validate();
    for (Split s : {Split::train, Split::val})
        if (dataset.classes_in(s).size() < config.n)
            throw std::invalid_argument("dataset has " + std::to_string(dataset.classes_in(s).size()) + " " +
                                        to_string(s) + " classes, " + std::to_string(config.n) + "-way training needs " +
                                        std::to_string(config.n));
    const auto start = std::chrono::steady_clock::now();
    TrainOutcome out;
    Checkpoint& cur = out.last;
    cur.config = config;
    cur.model = init_model<float>(config.dims(dataset), config.variant, config.seed);
    cur.adam = init_adam(cur.model);
    cur.norm = dataset.norm();

    std::ofstream log;
    if (!hooks.run_log.empty()) {
        if (hooks.run_log.has_parent_path()) std::filesystem::create_directories(hooks.run_log.parent_path());
        log.open(hooks.run_log, std::ios::trunc);
        if (!log) throw std::runtime_error("cannot write run log " + hooks.run_log.string());
        log << "epoch,train_loss,val_acc,lr,wall_seconds\n";
    }

    bool have_best = false;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        const double lr = config.lr_at(epoch);
        double loss_sum = 0.0;
        std::size_t batch = 0;
        for (std::size_t t = 0; t < config.tasks_per_epoch; t += config.batch_tasks, ++batch) {
            const std::size_t count = std::min(config.batch_tasks, config.tasks_per_epoch - t);
            BatchResult b = run_batch(cur.model, dataset, config, epoch * config.tasks_per_epoch + t, count);
            if (epoch == 0 && batch == 0) out.first_batch_loss = b.loss;
            loss_sum += b.loss;
            adam_step(cur.model, cur.adam, b.grads, lr, config);
            if (hooks.on_batch) hooks.on_batch(epoch, batch, b);
        }
        const EvalReport val = evaluate_model(cur.model, dataset, validation_options(config));
        cur.epoch = epoch + 1;
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / double(config.tasks_per_epoch);
        rec.val_acc = val.mean_accuracy;
        rec.lr = lr;
        rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (!have_best || val.mean_accuracy > cur.best_val_acc) {
            cur.best_val_acc = val.mean_accuracy;
            cur.best_epoch = epoch;
            have_best = true;
            out.best = cur;
        }
        out.best.best_val_acc = cur.best_val_acc;
        out.best.best_epoch = cur.best_epoch;
        out.history.push_back(rec);
        if (log) {
            log << rec.epoch << ',' << format_double(rec.train_loss) << ',' << format_double(rec.val_acc) << ','
                << format_double(rec.lr) << ',' << format_double(rec.wall_seconds) << '\n';
            log.flush();
        }
        if (hooks.on_epoch) hooks.on_epoch(rec);
    }
    return out;
}

}  // namespace dam
