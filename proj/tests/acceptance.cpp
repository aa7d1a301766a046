// Acceptance run: one PASS/FAIL line per criterion. Long-running (two 10-epoch trainings).

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <thread>

#include "oracles.hpp"

using namespace dam;
using namespace dam::testing;

namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string fmt(double v, int precision = 3) {
    std::ostringstream s;
    s.precision(precision);
    s << v;
    return s.str();
}

int failures = 0;

void report(int id, const std::string& title, bool pass, const std::string& detail, double secs, double budget) {
    const bool in_time = budget <= 0.0 || secs <= budget;
    const bool ok = pass && in_time;
    if (!ok) ++failures;
    std::cout << (ok ? "PASS" : "FAIL") << "  " << id << ". " << title << ": " << detail << " [" << fmt(secs, 4)
              << " s" << (budget > 0.0 ? ", budget " + fmt(budget, 4) + " s" : "") << "]" << std::endl;
}

template <typename F>
void criterion(int id, const std::string& title, double budget, F&& body) {
    const auto start = Clock::now();
    std::string detail;
    bool pass = false;
    try {
        pass = body(detail);
    } catch (const std::exception& e) {
        detail += std::string(detail.empty() ? "" : "; ") + "exception: " + e.what();
        pass = false;
    }
    report(id, title, pass, detail, seconds_since(start), budget);
}

TrainConfig smoke_config() {
    TrainConfig c;
    c.epochs = 10;
    c.tasks_per_epoch = 200;
    c.data.synthetic = SyntheticSpec{30, 20, 32, 7};
    return c;
}

struct Trained {
    TrainOutcome outcome;
    double seconds = 0.0;
};

}  // namespace

int main(int argc, char** argv) {
    tune_allocator();
    const fs::path out_dir = argc > 1 ? fs::path(argv[1]) : fs::current_path() / "acceptance_out";
    const std::string cli = argc > 2 ? argv[2] : DAM_CLI;
    fs::create_directories(out_dir);
    std::cout << "output directory " << out_dir.string() << std::endl;

    criterion(1, "finite-difference gradients", 120.0, [](std::string& d) {
        double worst_primitive = 0.0;
        std::string worst_name;
        std::size_t cases = 0;
        for (const GradCase& c : primitive_gradient_cases()) {
            const GradCheck g = check_gradients(c.inputs, c.build);
            if (g.worst_relative() > worst_primitive) {
                worst_primitive = g.worst_relative();
                worst_name = c.name;
            }
            ++cases;
        }
        double worst_episode = 0.0;
        std::string worst_tensor;
        const std::size_t per_tensor = 6;
        std::size_t tensors = 0, checked = 0, straddling = 0, short_tensors = 0;
        for (Variant v : kAllVariants) {
            for (const TensorGradError& e : episode_gradient_errors(v, per_tensor)) {
                straddling += e.straddling;
                checked += e.checked;
                short_tensors += e.checked < std::min(per_tensor, e.entries);
                ++tensors;
                if (e.relative > worst_episode) {
                    worst_episode = e.relative;
                    worst_tensor = to_string(v) + "/" + e.name;
                }
            }
        }
        d = std::to_string(cases) + " primitive cases, worst rel " + fmt(worst_primitive) + " (" + worst_name + "); " +
            std::to_string(tensors) + " episode-loss tensors over 6 variants, worst rel " + fmt(worst_episode) + " (" +
            worst_tensor + "); " + std::to_string(checked) + " entries checked, " + std::to_string(straddling) +
            " of them across a ReLU/max-pool switch (differenced on the unperturbed branch), " +
            std::to_string(short_tensors) + " tensors short of " + std::to_string(per_tensor) + " checks; bound 1e-3";
        return worst_primitive <= 1e-3 && worst_episode <= 1e-3 && short_tensors == 0;
    });

    criterion(2, "pair construction oracle", 10.0, [](std::string& d) {
        const Outcome o = check_pair_oracle();
        d = o.detail;
        return o.pass;
    });

    criterion(3, "class statistics oracle", 10.0, [](std::string& d) {
        const StatsOracle o = check_stats_oracle();
        d = "max error " + fmt(o.max_error) + " (bound 1e-6); " + o.detail;
        return o.max_error <= 1e-6 && o.fallback_ok;
    });

    criterion(4, "generated weight normalization", 30.0, [](std::string& d) {
        const NormalizationOracle o = check_normalization(1000, ModelDims{});
        d = std::to_string(o.generations) + " generations; conv norm err " + fmt(o.max_conv_norm_error) +
            ", fc norm err " + fmt(o.max_fc_norm_error) + " (bound 1e-5); attention in [" + fmt(o.min_attention) +
            ", " + fmt(o.max_attention) + "]";
        return o.generations == 1000 && o.max_conv_norm_error <= 1e-5 && o.max_fc_norm_error <= 1e-5 &&
               o.min_attention >= 0.0 && o.max_attention <= 1.0;
    });

    criterion(5, "prediction invariants", 10.0, [](std::string& d) {
        const PredictionOracle o = check_predictions(100);
        d = std::to_string(o.matrices) + " matrices; row sum err " + fmt(o.max_row_sum_error) + ", shift mismatches " +
            std::to_string(o.shift_mismatches) + ", permutation mismatches " + std::to_string(o.permutation_mismatches) +
            ", hand case err " + fmt(o.hand_case_error);
        return o.matrices == 100 && o.max_row_sum_error <= 1e-6 && o.shift_mismatches == 0 &&
               o.permutation_mismatches == 0 && o.hand_case_error <= 1e-6;
    });

    const TrainConfig base = smoke_config();
    const Dataset dataset = load_dataset(base.data);
    const fs::path full_ckpt = out_dir / "full.ckpt";
    Trained full;

    auto train_variant = [&](const TrainConfig& cfg, const std::string& tag) {
        Trained t;
        const auto start = Clock::now();
        TrainHooks hooks;
        hooks.run_log = out_dir / (tag + "_log.csv");
        hooks.on_epoch = [&](const EpochRecord& r) {
            std::cout << "  [" << tag << "] epoch " << r.epoch << " loss " << fmt(r.train_loss) << " val "
                      << fmt(r.val_acc, 4) << "% " << fmt(r.wall_seconds, 4) << " s" << std::endl;
        };
        t.outcome = train(cfg, dataset, hooks);
        t.seconds = seconds_since(start);
        return t;
    };

    criterion(6, "learning smoke test", 0.0, [&](std::string& d) {
        full = train_variant(base, "full");
        save_checkpoint(full_ckpt, full.outcome.best);
        const auto& h = full.outcome.history;
        std::size_t decreases = 0;
        for (std::size_t i = 1; i < h.size(); ++i) decreases += h[i].train_loss < h[i - 1].train_loss;
        d = "best val " + fmt(full.outcome.best.best_val_acc, 4) + "% at epoch " +
            std::to_string(full.outcome.best.best_epoch) + " (bound 40%); epoch loss " + fmt(h.front().train_loss) +
            " -> " + fmt(h.back().train_loss) + ", decreased in " + std::to_string(decreases) + "/" +
            std::to_string(h.size() - 1) + " epochs; training " + fmt(full.seconds, 4) + " s on " +
            std::to_string(std::thread::hardware_concurrency()) + " core(s) (budget 1200 s on 4 cores)";
        return full.outcome.best.best_val_acc >= 40.0;
    });

    criterion(7, "ablation ordering: full vs matching_net", 0.0, [&](std::string& d) {
        if (full.outcome.history.empty()) throw std::runtime_error("criterion 6 produced no model");
        const Trained mn = train_variant(matching_net_variant(base), "matching_net");
        const EvalOptions opts = test_options(base);
        std::vector<AblationRow> rows(2);
        rows[0].variant = Variant::full;
        rows[0].test = evaluate(full.outcome.best, dataset, opts);
        rows[0].best_val_acc = full.outcome.best.best_val_acc;
        rows[0].best_epoch = full.outcome.best.best_epoch;
        rows[1].variant = Variant::matching_net;
        rows[1].test = evaluate(mn.outcome.best, dataset, opts);
        rows[1].best_val_acc = mn.outcome.best.best_val_acc;
        rows[1].best_epoch = mn.outcome.best.best_epoch;
        write_ablation_table(out_dir / "ablation.csv", rows);
        const EvalReport& f = rows[0].test;
        const EvalReport& m = rows[1].test;
        d = "full " + fmt(f.mean_accuracy, 4) + "% +- " + fmt(f.ci95) + ", matching_net " + fmt(m.mean_accuracy, 4) +
            "% +- " + fmt(m.ci95) + " over " + std::to_string(f.episodes) + " test episodes; need full >= " +
            fmt(m.mean_accuracy - m.ci95, 4) + "%";
        return f.mean_accuracy >= m.mean_accuracy - m.ci95;
    });

    criterion(8, "reproducibility", 0.0, [&](std::string& d) {
        const BatchResult a = run_batch(init_model<float>(base.dims(dataset), base.variant, base.seed), dataset, base,
                                        0, base.batch_tasks);
        const BatchResult b = run_batch(init_model<float>(base.dims(dataset), base.variant, base.seed), dataset, base,
                                        0, base.batch_tasks);
        const bool first_batch = a.loss == b.loss && full.outcome.first_batch_loss == a.loss;
        const Checkpoint loaded = load_checkpoint(full_ckpt);
        const Dataset reloaded = dataset_for(loaded);
        EvalOptions eo = test_options(base);
        eo.episodes = 200;
        const EvalReport r1 = evaluate(full.outcome.best, dataset, eo);
        const EvalReport r2 = evaluate(full.outcome.best, dataset, eo);
        const bool same_report =
            r1.per_episode == r2.per_episode && r1.mean_accuracy == r2.mean_accuracy && r1.ci95 == r2.ci95;
        const double val = evaluate(loaded, reloaded, validation_options(loaded.config)).mean_accuracy;
        const bool round_trip = val == full.outcome.best.best_val_acc;
        char loss_hex[64];
        std::snprintf(loss_hex, sizeof loss_hex, "%a", a.loss);
        d = std::string("first-batch loss ") + loss_hex + (first_batch ? " identical" : " DIFFERS") +
            " across runs; eval report " + (same_report ? "identical" : "DIFFERS") + "; reloaded val " + fmt(val, 6) +
            "% vs stored " + fmt(full.outcome.best.best_val_acc, 6) + "%";
        return first_batch && same_report && round_trip;
    });

    criterion(9, "dump contract", 300.0, [&](std::string& d) {
        const fs::path csv = out_dir / "dump.csv";
        const std::string cmd = cli + " dump-weights --ckpt " + full_ckpt.string() + " --tasks 10 --samples 100 --out " +
                                csv.string() + " > " + (out_dir / "dump.log").string() + " 2>&1";
        const int status = std::system(cmd.c_str());
        if (status != 0) {
            d = "dump-weights exited with status " + std::to_string(status);
            return false;
        }
        std::ifstream in(csv);
        std::string line;
        std::getline(in, line);
        const bool header = line == "task_id,sample_id,tensor_name,values";
        std::map<std::string, std::size_t> counts;
        std::size_t bad_stats = 0;
        while (std::getline(in, line)) {
            const auto c1 = line.find(','), c2 = line.find(',', c1 + 1), c3 = line.find(',', c2 + 1);
            const std::string name = line.substr(c2 + 1, c3 - c2 - 1);
            ++counts[name];
            if ((name.rfind("mu_", 0) == 0 || name.rfind("sigma_", 0) == 0) && line.substr(c1 + 1, c2 - c1 - 1) != "-1")
                ++bad_stats;
        }
        const std::size_t n = base.n;
        bool ok = header && bad_stats == 0 && counts["attention"] == 1000 && counts["conv"] == 1000 &&
                  counts["fc"] == 1000 && counts.size() == 3 + 2 * n;
        for (std::size_t c = 0; c < n; ++c)
            ok = ok && counts["mu_" + std::to_string(c)] == 10 && counts["sigma_" + std::to_string(c)] == 10;
        const auto bytes = fs::file_size(csv);
        d = "rows: attention " + std::to_string(counts["attention"]) + ", conv " + std::to_string(counts["conv"]) +
            ", fc " + std::to_string(counts["fc"]) + ", mu_0 " + std::to_string(counts["mu_0"]) + ", sigma_0 " +
            std::to_string(counts["sigma_0"]) + " (expected 1000/1000/1000/10/10); " + fmt(double(bytes) / 1e6, 4) +
            " MB";
        fs::remove(csv);
        return ok;
    });

    std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
    return failures == 0 ? 0 : 1;
}
