// Trains a small model on the synthetic dataset and reports test accuracy.

#include <iostream>

#include "dam/dam.hpp"

int main() {
    dam::tune_allocator();
    dam::TrainConfig cfg;
    cfg.epochs = 2;
    cfg.tasks_per_epoch = 50;
    cfg.val_episodes = 20;
    cfg.test_episodes = 50;

    const dam::Dataset data = dam::make_synthetic(cfg.data.synthetic);
    dam::TrainHooks hooks;
    hooks.on_epoch = [](const dam::EpochRecord& r) {
        std::cout << "epoch " << r.epoch << ": loss " << r.train_loss << ", val " << r.val_acc << "%\n";
    };
    const dam::TrainOutcome run = dam::train(cfg, data, hooks);
    const dam::EvalReport test = dam::evaluate(run.best, data, dam::test_options(cfg));
    std::cout << "test accuracy " << test.mean_accuracy << "% +- " << test.ci95 << "%\n";
}
