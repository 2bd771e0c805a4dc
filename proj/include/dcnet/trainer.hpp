#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dcnet/data_io.hpp"
#include "dcnet/metrics.hpp"
#include "dcnet/model.hpp"
#include "dcnet/tensor.hpp"

namespace dcnet::trainer {

struct TrainConfig {
    double learning_rate = 0.001;
    std::int64_t batch_size = 64;
    std::int64_t max_epochs = 500;
    std::int64_t patience = 300; // epochs without improvement before stopping
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t seed = 7;
    bool shuffle = true;
    bool best_by_accuracy = false; // default: best model by lowest val loss

    void validate() const; // throws ConfigError
};

// Flat key=value serialization, same conventions as the model config.
std::string train_config_to_text(const TrainConfig& config);
bool train_config_apply(TrainConfig& config, const std::string& key, const std::string& value);

// Mean cross-entropy of the true-class probabilities, floored at 1e-12
// before the log.
double loss(const Tensor& probs, std::span<const int> labels);

struct AdamState {
    std::vector<Tensor> m, v;
    std::int64_t step = 0;
};

// Standard bias-corrected Adam. Moments are lazily initialized to zeros on
// the first call; afterwards shapes must keep matching.
void adam_step(std::span<Tensor* const> params, std::span<Tensor* const> grads, AdamState& state,
               const TrainConfig& config);
void adam_step(model::ModelParams& params, model::ModelGrads& grads, AdamState& state,
               const TrainConfig& config);

// Eval-mode loss and confusion over a trial set. Predictions are the
// argmax of the averaged window probabilities, ties toward the lowest
// class index.
std::pair<double, metrics::ConfusionMatrix> evaluate(model::ModelParams& params,
                                                     const model::ModelConfig& model_config,
                                                     const data::TrialSet& trials,
                                                     std::int64_t batch_size = 64);

struct EpochStats {
    std::int64_t epoch = 0; // 1-based
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_accuracy = 0.0;
    double val_kappa = 0.0;
};

struct TrainResult {
    model::ModelParams best_params;
    model::ModelConfig model_config;
    std::vector<EpochStats> history;
    std::int64_t best_epoch = 0;
    double best_val_loss = 0.0;
    double best_val_accuracy = 0.0;
};

// Deterministic seeded training run: init, epoch loop with seeded shuffle,
// minibatch Adam, per-epoch validation, early stopping on the configured
// criterion. When `val` is null the last 20% of `trials` (original order)
// is held out.
TrainResult train(const data::TrialSet& trials, const data::TrialSet* val,
                  const model::ModelConfig& model_config, const TrainConfig& config);

// Line-delimited history: a header comment, then one
// "epoch train_loss val_loss val_acc val_kappa" record per epoch.
std::string history_to_text(const std::vector<EpochStats>& history);

} // namespace dcnet::trainer
