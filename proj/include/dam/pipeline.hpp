#pragma once

// Checkpoint-level operations behind the command-line tool: evaluation, ablation table and
// generated-weight dumps.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "dam/trainer.hpp"

namespace dam {

inline EvalOptions test_options(const TrainConfig& config) {
    EvalOptions o;
    o.split = Split::test;
    o.n = config.n;
    o.k = config.k;
    o.q = config.q;
    o.episodes = config.test_episodes;
    o.seed = config.seed;
    o.workers = config.workers;
    return o;
}

inline EvalReport evaluate(const Checkpoint& ck, const Dataset& dataset, const EvalOptions& opts) {
    if (dataset.classes_in(opts.split).size() < opts.n)
        throw std::invalid_argument("split '" + to_string(opts.split) + "' has " +
                                    std::to_string(dataset.classes_in(opts.split).size()) + " classes, fewer than " +
                                    std::to_string(opts.n));
    return evaluate_model(ck.model, dataset, opts);
}

inline void write_eval_report(const std::filesystem::path& path, const EvalReport& r) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "episode,accuracy\n";
    for (std::size_t i = 0; i < r.per_episode.size(); ++i) out << i << ',' << format_double(r.per_episode[i]) << '\n';
}

struct AblationRow {
    Variant variant = Variant::full;
    EvalReport test;
    double best_val_acc = 0.0;
    std::size_t best_epoch = 0;
};

struct AblateOptions {
    std::vector<Variant> variants{kAllVariants.begin(), kAllVariants.end()};
    std::filesystem::path out_dir;  // checkpoints, run logs and the table; nothing written when empty
    bool reuse = false;             // load <out_dir>/<variant>.ckpt when it exists instead of training
    std::function<void(Variant, const EpochRecord&)> on_epoch;
};

inline void write_ablation_table(const std::filesystem::path& path, const std::vector<AblationRow>& rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "variant,mean_accuracy,ci95,episodes,best_val_acc,best_epoch\n";
    for (const auto& r : rows)
        out << to_string(r.variant) << ',' << format_double(r.test.mean_accuracy) << ',' << format_double(r.test.ci95)
            << ',' << r.test.episodes << ',' << format_double(r.best_val_acc) << ',' << r.best_epoch << '\n';
}

/// Trains (or reloads) each variant from the same base configuration and seeds, then evaluates it on
/// the same test episodes.
inline std::vector<AblationRow> ablate(const TrainConfig& base, const Dataset& dataset, const AblateOptions& opts = {}) {
    std::vector<AblationRow> rows;
    for (Variant v : opts.variants) {
        TrainConfig cfg = base;
        cfg.variant = v;
        const std::filesystem::path ckpt_path =
            opts.out_dir.empty() ? std::filesystem::path() : opts.out_dir / (to_string(v) + ".ckpt");
        Checkpoint best;
        if (opts.reuse && !ckpt_path.empty() && std::filesystem::exists(ckpt_path)) {
            best = load_checkpoint(ckpt_path);
            if (best.config.variant != v) throw ConfigError(ckpt_path.string() + " holds a different variant");
        } else {
            TrainHooks hooks;
            if (!opts.out_dir.empty()) hooks.run_log = opts.out_dir / (to_string(v) + "_log.csv");
            if (opts.on_epoch) hooks.on_epoch = [&](const EpochRecord& r) { opts.on_epoch(v, r); };
            best = std::move(train(cfg, dataset, hooks).best);
            if (!ckpt_path.empty()) save_checkpoint(ckpt_path, best);
        }
        AblationRow row;
        row.variant = v;
        row.test = evaluate(best, dataset, test_options(cfg));
        row.best_val_acc = best.best_val_acc;
        row.best_epoch = best.best_epoch;
        rows.push_back(std::move(row));
    }
    if (!opts.out_dir.empty()) write_ablation_table(opts.out_dir / "ablation.csv", rows);
    return rows;
}

struct DumpOptions {
    std::size_t tasks = 10;
    std::size_t samples = 100;
    Split split = Split::test;
    std::uint64_t seed = 1;
};

namespace detail {

inline void write_values(std::ostream& out, std::span<const float> values) {
    char buf[32];
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (i) out.put(' ');
        auto [p, ec] = std::to_chars(buf, buf + sizeof buf, values[i]);
        out.write(buf, p - buf);
    }
}

inline void write_row(std::ostream& out, std::size_t task, long long sample, const std::string& name,
                      std::span<const float> values) {
    out << task << ',' << sample << ',' << name << ',';
    write_values(out, values);
    out << '\n';
}

}  // namespace detail

/// Writes `task_id,sample_id,tensor_name,values` rows (values space-separated). Every stochastic
/// generation contributes one row per generated tensor: attention (a^0..a^{N-1} concatenated, each
/// [h,w,128] flattened), conv, and fc (W followed by b). Every task also contributes mu_<n> and
/// sigma_<n> rows with sample_id -1.
inline void dump_weights(const Checkpoint& ck, const Dataset& dataset, const DumpOptions& opts,
                         const std::filesystem::path& out_path) {
    if (out_path.has_parent_path() && !std::filesystem::exists(out_path.parent_path()))
        throw std::runtime_error("output directory " + out_path.parent_path().string() + " does not exist");
    std::ofstream out(out_path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + out_path.string());
    out << "task_id,sample_id,tensor_name,values\n";
    const Model<float>& model = ck.model;
    const TrainConfig& cfg = ck.config;
    for (std::size_t task = 0; task < opts.tasks; ++task) {
        Rng ep_rng = make_rng(opts.seed, "dump.episode", task);
        Rng latent_rng = make_rng(opts.seed, "dump.latent", task);
        const Episode ep = sample_episode(dataset, opts.split, cfg.n, cfg.k, cfg.q, ep_rng);
        const EpisodeImages imgs = materialize(dataset, ep, false);
        Tape<float> tape;
        Binding<float> bind(tape, false);
        const EpisodeFeatures<float> feats = embed_episode(bind, model, imgs.support, imgs.query, false);
        const EpisodeLatent<float> latent = latent_stats(bind, model, feats.support, ep.n, ep.k, false);
        for (std::size_t c = 0; c < latent.stats.classes(); ++c) {
            detail::write_row(out, task, -1, "mu_" + std::to_string(c), latent.stats.mu[c].value().data());
            detail::write_row(out, task, -1, "sigma_" + std::to_string(c), latent.stats.sigma[c].value().data());
        }
        for (std::size_t s = 0; s < opts.samples; ++s) {
            const LatentSample<float> draw = draw_latent(latent, latent_rng, false);
            std::vector<float> fc;
            if (model.variant == Variant::matching_net) {
                const auto w = generate_transform(bind, draw, model.meta, model.dims);
                detail::write_row(out, task, (long long)s, "attention", w.attention.value().data());
                detail::write_row(out, task, (long long)s, "conv", w.conv_kernel.value().data());
                fc.assign(w.fc_weight.value().data().begin(), w.fc_weight.value().data().end());
                fc.insert(fc.end(), w.fc_bias.value().data().begin(), w.fc_bias.value().data().end());
            } else {
                const auto w = generate_weights(bind, draw, model.meta, model.dims,
                                                model.variant != Variant::no_attention);
                std::vector<float> att;
                for (const auto& a : w.attention) att.insert(att.end(), a.value().data().begin(), a.value().data().end());
                detail::write_row(out, task, (long long)s, "attention", att);
                detail::write_row(out, task, (long long)s, "conv", w.conv_kernel.value().data());
                fc.assign(w.fc_weight.value().data().begin(), w.fc_weight.value().data().end());
                fc.insert(fc.end(), w.fc_bias.value().data().begin(), w.fc_bias.value().data().end());
            }
            detail::write_row(out, task, (long long)s, "fc", fc);
        }
    }
    if (!out) throw std::runtime_error("failed while writing " + out_path.string());
}

}  // namespace dam
