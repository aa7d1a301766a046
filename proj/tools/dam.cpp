// dam: train, evaluate, ablate and inspect few-shot metric generators.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "dam/dam.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitNumeric = 2;

// File < DAM_SEED < --set.
dam::TrainConfig resolve_config(const std::string& path, const std::vector<std::string>& overrides) {
    dam::KeyValueConfig cfg = path.empty() ? dam::KeyValueConfig() : dam::KeyValueConfig::load(path);
    if (const char* env = std::getenv("DAM_SEED"); env && *env) cfg.set("seed", env);
    for (const auto& o : overrides) cfg.apply_override(o);
    return dam::TrainConfig::from(cfg);
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

void print_epoch(const std::string& tag, const dam::EpochRecord& r) {
    std::cout << tag << "epoch " << r.epoch << "  loss " << r.train_loss << "  val " << r.val_acc << "%  lr " << r.lr
              << "  " << r.wall_seconds << "s" << std::endl;
}

std::string percent(const dam::EvalReport& r) {
    std::ostringstream s;
    s.setf(std::ios::fixed);
    s.precision(2);
    s << r.mean_accuracy << "% +- " << r.ci95 << "% (" << r.episodes << " episodes)";
    return s.str();
}

std::vector<dam::Variant> parse_variants(const std::string& list) {
    std::vector<dam::Variant> out;
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(dam::parse_variant(item));
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    dam::tune_allocator();
    CLI::App app{"Few-shot classification with generated deep attentive metrics"};
    app.require_subcommand(1);

    std::string config_path, ckpt_path, out, split = "test", variants;
    std::vector<std::string> overrides;
    std::size_t episodes = 0, ensemble = 1, tasks = 10, samples = 100, workers = 0;
    std::uint64_t seed = 0;
    bool reuse = false;
    dam::SyntheticSpec synth;

    auto* train = app.add_subcommand("train", "Train a model episodically");
    train->add_option("--config", config_path, "key = value configuration file");
    train->add_option("--set", overrides, "Override a configuration key (key=value)");
    train->add_option("--out", out, "Output directory")->required();

    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on random episodes");
    eval->add_option("--ckpt", ckpt_path, "Checkpoint file")->required()->check(CLI::ExistingFile);
    eval->add_option("--split", split, "train, val or test");
    eval->add_option("--episodes", episodes, "Number of episodes (default: checkpoint's test_episodes)");
    eval->add_option("--ensemble", ensemble, "Average scores over this many sampled metrics (1 = deterministic)")
        ->check(CLI::PositiveNumber);
    eval->add_option("--seed", seed, "Episode seed (default: checkpoint seed, or DAM_SEED)");
    eval->add_option("--workers", workers, "Worker threads");
    eval->add_option("--out", out, "Write per-episode accuracies to this CSV");

    auto* abl = app.add_subcommand("ablate", "Train and evaluate every model variant");
    abl->add_option("--config", config_path, "key = value configuration file");
    abl->add_option("--set", overrides, "Override a configuration key (key=value)");
    abl->add_option("--out", out, "Output directory")->required();
    abl->add_option("--variants", variants, "Comma-separated subset of variants");
    abl->add_flag("--reuse", reuse, "Load existing variant checkpoints instead of retraining");

    auto* dump = app.add_subcommand("dump-weights", "Write sampled generated weights to CSV");
    dump->add_option("--ckpt", ckpt_path, "Checkpoint file")->required()->check(CLI::ExistingFile);
    dump->add_option("--tasks", tasks, "Number of random tasks");
    dump->add_option("--samples", samples, "Stochastic generations per task");
    dump->add_option("--split", split, "Split to draw tasks from");
    dump->add_option("--seed", seed, "Task seed (default: checkpoint seed, or DAM_SEED)");
    dump->add_option("--out", out, "Output CSV")->required();

    auto* make = app.add_subcommand("make-synthetic", "Write the synthetic dataset as an image directory");
    make->add_option("--classes", synth.classes, "Number of classes");
    make->add_option("--per-class", synth.per_class, "Images per class");
    make->add_option("--side", synth.side, "Image side in pixels");
    make->add_option("--seed", synth.seed, "Generator seed");
    make->add_option("--out", out, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitUsage;
    }

    auto checkpoint_seed = [&](const dam::Checkpoint& ck) -> std::uint64_t {
        if (seed != 0) return seed;
        if (const char* env = std::getenv("DAM_SEED"); env && *env) return std::stoull(env);
        return ck.config.seed;
    };

    try {
        if (*train) {
            const dam::TrainConfig cfg = resolve_config(config_path, overrides);
            const fs::path dir(out);
            write_text(dir / "config.txt", cfg.to_config().to_text());
            const dam::Dataset data = dam::load_dataset(cfg.data);
            dam::TrainHooks hooks;
            hooks.run_log = dir / "train_log.csv";
            hooks.on_epoch = [](const dam::EpochRecord& r) { print_epoch("", r); };
            dam::TrainOutcome result = dam::train(cfg, data, hooks);
            dam::save_checkpoint(dir / "best.ckpt", result.best);
            dam::save_checkpoint(dir / "last.ckpt", result.last);
            std::cout << "best val " << result.best.best_val_acc << "% at epoch " << result.best.best_epoch << "\n";
        } else if (*eval) {
            const dam::Checkpoint ck = dam::load_checkpoint(ckpt_path);
            const dam::Dataset data = dam::dataset_for(ck);
            dam::EvalOptions opts = dam::test_options(ck.config);
            opts.split = dam::parse_split(split);
            if (episodes) opts.episodes = episodes;
            if (workers) opts.workers = workers;
            opts.ensemble = ensemble;
            opts.seed = checkpoint_seed(ck);
            const dam::EvalReport report = dam::evaluate(ck, data, opts);
            std::cout << dam::to_string(opts.split) << " accuracy " << percent(report) << "\n";
            if (!out.empty()) {
                const fs::path path(out);
                if (path.has_parent_path()) fs::create_directories(path.parent_path());
                dam::write_eval_report(path, report);
                dam::KeyValueConfig resolved = ck.config.to_config();
                resolved.set("eval.checkpoint", ckpt_path);
                resolved.set("eval.split", dam::to_string(opts.split));
                resolved.set("eval.episodes", std::to_string(opts.episodes));
                resolved.set("eval.ensemble", std::to_string(opts.ensemble));
                resolved.set("eval.seed", std::to_string(opts.seed));
                write_text(fs::path(path).replace_extension(".config.txt"), resolved.to_text());
            }
        } else if (*abl) {
            const dam::TrainConfig cfg = resolve_config(config_path, overrides);
            const fs::path dir(out);
            write_text(dir / "config.txt", cfg.to_config().to_text());
            const dam::Dataset data = dam::load_dataset(cfg.data);
            dam::AblateOptions opts;
            if (!variants.empty()) opts.variants = parse_variants(variants);
            opts.out_dir = dir;
            opts.reuse = reuse;
            opts.on_epoch = [](dam::Variant v, const dam::EpochRecord& r) {
                print_epoch("[" + dam::to_string(v) + "] ", r);
            };
            for (const auto& row : dam::ablate(cfg, data, opts))
                std::cout << dam::to_string(row.variant) << ": " << percent(row.test) << "\n";
            std::cout << "table written to " << (dir / "ablation.csv").string() << "\n";
        } else if (*dump) {
            const dam::Checkpoint ck = dam::load_checkpoint(ckpt_path);
            const dam::Dataset data = dam::dataset_for(ck);
            dam::DumpOptions opts;
            opts.tasks = tasks;
            opts.samples = samples;
            opts.split = dam::parse_split(split);
            opts.seed = checkpoint_seed(ck);
            dam::dump_weights(ck, data, opts, out);
            dam::KeyValueConfig resolved = ck.config.to_config();
            resolved.set("dump.checkpoint", ckpt_path);
            resolved.set("dump.tasks", std::to_string(opts.tasks));
            resolved.set("dump.samples", std::to_string(opts.samples));
            resolved.set("dump.split", dam::to_string(opts.split));
            resolved.set("dump.seed", std::to_string(opts.seed));
            write_text(fs::path(out).replace_extension(".config.txt"), resolved.to_text());
            std::cout << "wrote " << opts.tasks * opts.samples << " generations to " << out << "\n";
        } else if (*make) {
            const dam::Dataset data = dam::make_synthetic(synth);
            dam::save_directory(data, out);
            dam::DataConfig d;
            d.source = "directory";
            d.root = fs::absolute(out).string();
            dam::KeyValueConfig resolved;
            d.write(resolved);
            resolved.set("synthetic.classes", std::to_string(synth.classes));
            resolved.set("synthetic.per_class", std::to_string(synth.per_class));
            resolved.set("synthetic.side", std::to_string(synth.side));
            resolved.set("synthetic.seed", std::to_string(synth.seed));
            write_text(fs::path(out) / "config.txt", resolved.to_text());
            std::cout << "wrote " << data.size() << " images in " << data.class_count() << " classes to " << out
                      << "\n";
        }
    } catch (const dam::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    return kExitOk;
}
