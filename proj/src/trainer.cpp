#include "dcnet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>

#include "dcnet/errors.hpp"

namespace dcnet::trainer {

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
    if (patience < 0 || patience > max_epochs) {
        throw ConfigError("patience must be in [0, max_epochs]");
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("beta1 must be in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("beta2 must be in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("eps must be > 0");
}

namespace {

std::int64_t parse_train_i64(const std::string& key, const std::string& value) {
    std::size_t pos = 0;
    std::int64_t out = 0;
    try {
        out = std::stoll(value, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos != value.size() || value.empty()) {
        throw ConfigError("config: " + key + ": not an integer: '" + value + "'");
    }
    return out;
}

double parse_train_double(const std::string& key, const std::string& value) {
    std::size_t pos = 0;
    double out = 0.0;
    try {
        out = std::stod(value, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos != value.size() || value.empty()) {
        throw ConfigError("config: " + key + ": not a number: '" + value + "'");
    }
    return out;
}

bool parse_train_bool(const std::string& key, const std::string& value) {
    if (value == "1" || value == "true") return true;
    if (value == "0" || value == "false") return false;
    throw ConfigError("config: " + key + ": not a boolean: '" + value + "'");
}

} // namespace

std::string train_config_to_text(const TrainConfig& c) {
    std::ostringstream out;
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", c.learning_rate);
    out << "learning_rate=" << buf << "\n";
    out << "batch_size=" << c.batch_size << "\n";
    out << "max_epochs=" << c.max_epochs << "\n";
    out << "patience=" << c.patience << "\n";
    std::snprintf(buf, sizeof(buf), "%.17g", c.beta1);
    out << "beta1=" << buf << "\n";
    std::snprintf(buf, sizeof(buf), "%.17g", c.beta2);
    out << "beta2=" << buf << "\n";
    std::snprintf(buf, sizeof(buf), "%.17g", c.eps);
    out << "eps=" << buf << "\n";
    out << "seed=" << c.seed << "\n";
    out << "shuffle=" << (c.shuffle ? 1 : 0) << "\n";
    out << "best_by_accuracy=" << (c.best_by_accuracy ? 1 : 0) << "\n";
    return out.str();
}

bool train_config_apply(TrainConfig& c, const std::string& key, const std::string& value) {
    if (key == "learning_rate") c.learning_rate = parse_train_double(key, value);
    else if (key == "batch_size") c.batch_size = parse_train_i64(key, value);
    else if (key == "max_epochs") c.max_epochs = parse_train_i64(key, value);
    else if (key == "patience") c.patience = parse_train_i64(key, value);
    else if (key == "beta1") c.beta1 = parse_train_double(key, value);
    else if (key == "beta2") c.beta2 = parse_train_double(key, value);
    else if (key == "eps") c.eps = parse_train_double(key, value);
    else if (key == "seed") {
        const std::int64_t s = parse_train_i64(key, value);
        if (s < 0) throw ConfigError("config: seed must be non-negative");
        c.seed = static_cast<std::uint64_t>(s);
    } else if (key == "shuffle") c.shuffle = parse_train_bool(key, value);
    else if (key == "best_by_accuracy") c.best_by_accuracy = parse_train_bool(key, value);
    else return false;
    return true;
}

double loss(const Tensor& probs, std::span<const int> labels) {
    if (probs.rank() != 2) {
        throw ShapeError("loss: probs must be [B, n_classes], got " + shape_str(probs.shape()));
    }
    const std::int64_t b = probs.extent(0);
    const std::int64_t n = probs.extent(1);
    if (static_cast<std::int64_t>(labels.size()) != b) {
        throw UsageError("loss: expected " + std::to_string(b) + " labels, got " +
                         std::to_string(labels.size()));
    }
    const double* p = probs.data();
    double total = 0.0;
    for (std::int64_t i = 0; i < b; ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        if (y < 0 || y >= n) {
            throw UsageError("loss: label " + std::to_string(y) + " outside [0, " +
                             std::to_string(n) + ")");
        }
        total += -std::log(std::max(p[i * n + y], 1e-12));
    }
    return total / static_cast<double>(b);
}

void adam_step(std::span<Tensor* const> params, std::span<Tensor* const> grads, AdamState& state,
               const TrainConfig& config) {
    // Only the optimizer hyperparameters matter here; a zero learning rate is a
    // legitimate no-op step, so this is weaker than TrainConfig::validate().
    if (!(config.learning_rate >= 0.0)) throw ConfigError("learning_rate must be >= 0");
    if (config.beta1 < 0.0 || config.beta1 >= 1.0) throw ConfigError("beta1 must be in [0, 1)");
    if (config.beta2 < 0.0 || config.beta2 >= 1.0) throw ConfigError("beta2 must be in [0, 1)");
    if (!(config.eps > 0.0)) throw ConfigError("eps must be > 0");
    if (params.size() != grads.size()) {
        throw UsageError("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                         std::to_string(params.size()) + " parameters");
    }
    if (state.m.empty()) {
        state.m.reserve(params.size());
        state.v.reserve(params.size());
        for (Tensor* p : params) {
            state.m.emplace_back(p->shape());
            state.v.emplace_back(p->shape());
        }
    }
    if (state.m.size() != params.size() || state.v.size() != params.size()) {
        throw UsageError("adam_step: moment count does not match parameters");
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        const Tensor& g = *grads[i];
        if (!p.same_shape(g) || !p.same_shape(state.m[i])) {
            throw ShapeError("adam_step: shape mismatch at parameter " + std::to_string(i) +
                             ": param " + shape_str(p.shape()) + ", grad " +
                             shape_str(g.shape()));
        }
        double* pp = p.data();
        const double* gp = g.data();
        double* mp = state.m[i].data();
        double* vp = state.v[i].data();
        for (std::int64_t j = 0; j < p.size(); ++j) {
            mp[j] = config.beta1 * mp[j] + (1.0 - config.beta1) * gp[j];
            vp[j] = config.beta2 * vp[j] + (1.0 - config.beta2) * gp[j] * gp[j];
            const double mhat = mp[j] / bc1;
            const double vhat = vp[j] / bc2;
            pp[j] -= config.learning_rate * mhat / (std::sqrt(vhat) + config.eps);
        }
    }
}

void adam_step(model::ModelParams& params, model::ModelGrads& grads, AdamState& state,
               const TrainConfig& config) {
    auto named = model::named_params(params);
    std::vector<Tensor*> p;
    p.reserve(named.size());
    for (auto& nt : named) p.push_back(nt.tensor);
    std::vector<Tensor*> g = grads.ordered();
    adam_step(std::span<Tensor* const>(p), std::span<Tensor* const>(g), state, config);
}

namespace {

// Macro recall over the classes actually present; equals metrics::accuracy
// when every class has true samples (a validation tail may miss one).
double present_class_accuracy(const metrics::ConfusionMatrix& cm) {
    double total = 0.0;
    int present = 0;
    for (int k = 0; k < cm.n; ++k) {
        const std::int64_t row = cm.row_sum(k);
        if (row == 0) continue;
        total += static_cast<double>(cm.at(k, k)) / static_cast<double>(row);
        ++present;
    }
    if (present == 0) throw UsageError("accuracy undefined: no true samples at all");
    return total / static_cast<double>(present);
}

void check_compatible(const data::TrialSet& set, const model::ModelConfig& mc,
                      const char* which) {
    if (set.channels != mc.channels || set.samples != mc.samples) {
        throw ConfigError(std::string(which) + " trials are " + std::to_string(set.channels) +
                          "x" + std::to_string(set.samples) + ", model expects " +
                          std::to_string(mc.channels) + "x" + std::to_string(mc.samples));
    }
    if (set.n_classes != mc.n_classes) {
        throw ConfigError(std::string(which) + " trials have " + std::to_string(set.n_classes) +
                          " classes, model expects " + std::to_string(mc.n_classes));
    }
}

} // namespace

std::pair<double, metrics::ConfusionMatrix> evaluate(model::ModelParams& params,
                                                     const model::ModelConfig& model_config,
                                                     const data::TrialSet& trials,
                                                     std::int64_t batch_size) {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    trials.validate();
    check_compatible(trials, model_config, "eval");
    if (trials.m == 0) throw UsageError("evaluate: empty trial set");
    const int n = model_config.n_classes;
    std::vector<int> predictions;
    predictions.reserve(static_cast<std::size_t>(trials.m));
    double total_loss = 0.0;
    for (std::int64_t start = 0; start < trials.m; start += batch_size) {
        const std::int64_t count = std::min(batch_size, trials.m - start);
        std::vector<std::int64_t> idx(static_cast<std::size_t>(count));
        std::iota(idx.begin(), idx.end(), start);
        Tensor xb = trials.batch_tensor(idx);
        model::ForwardTrace trace =
            model::model_forward(xb, params, model_config, false, nullptr);
        std::vector<int> yb(trials.labels.begin() + start, trials.labels.begin() + start + count);
        total_loss += loss(trace.probs, yb) * static_cast<double>(count);
        const double* p = trace.probs.data();
        for (std::int64_t i = 0; i < count; ++i) {
            int best = 0;
            for (int k = 1; k < n; ++k) {
                if (p[i * n + k] > p[i * n + best]) best = k;
            }
            predictions.push_back(best);
        }
    }
    metrics::ConfusionMatrix cm = metrics::confusion(predictions, trials.labels, n);
    return {total_loss / static_cast<double>(trials.m), cm};
}

TrainResult train(const data::TrialSet& trials, const data::TrialSet* val,
                  const model::ModelConfig& model_config, const TrainConfig& config) {
    model_config.validate();
    config.validate();
    trials.validate();
    if (trials.m == 0) throw UsageError("train: empty trial set");
    check_compatible(trials, model_config, "train");

    data::TrialSet train_set;
    data::TrialSet val_holdout;
    const data::TrialSet* train_ptr = &trials;
    const data::TrialSet* val_ptr = val;
    if (val == nullptr) {
        // hold out the last 20% in original order
        const std::int64_t n_val = std::max<std::int64_t>(1, trials.m / 5);
        if (trials.m - n_val < 1) {
            throw UsageError("train: too few trials to hold out a validation set");
        }
        auto take = [&trials](std::int64_t begin, std::int64_t count, data::TrialSet& out) {
            out.m = count;
            out.channels = trials.channels;
            out.samples = trials.samples;
            out.n_classes = trials.n_classes;
            out.metadata = trials.metadata;
            const std::int64_t per_trial = trials.channels * trials.samples;
            out.data.assign(trials.data.begin() + begin * per_trial,
                            trials.data.begin() + (begin + count) * per_trial);
            out.labels.assign(trials.labels.begin() + begin, trials.labels.begin() + begin + count);
        };
        take(0, trials.m - n_val, train_set);
        take(trials.m - n_val, n_val, val_holdout);
        train_ptr = &train_set;
        val_ptr = &val_holdout;
    } else {
        val->validate();
        check_compatible(*val, model_config, "val");
        if (val->m == 0) throw UsageError("train: empty validation set");
    }

    Rng rng(config.seed);
    model::ModelParams params = model::init_model(model_config, rng);
    AdamState adam;

    TrainResult result;
    result.model_config = model_config;
    result.best_params = params;
    double best_criterion = std::numeric_limits<double>::infinity();
    std::int64_t epochs_since_best = 0;

    const std::int64_t n_train = train_ptr->m;
    std::vector<std::int64_t> order(static_cast<std::size_t>(n_train));
    std::iota(order.begin(), order.end(), 0);
    for (std::int64_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
        if (config.shuffle) {
            for (std::int64_t i = n_train - 1; i > 0; --i) {
                const std::int64_t j = static_cast<std::int64_t>(
                    rng.below(static_cast<std::uint64_t>(i + 1)));
                std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
            }
        }
        double epoch_loss = 0.0;
        for (std::int64_t start = 0; start < n_train; start += config.batch_size) {
            const std::int64_t count = std::min(config.batch_size, n_train - start);
            std::span<const std::int64_t> idx(order.data() + start,
                                              static_cast<std::size_t>(count));
            Tensor xb = train_ptr->batch_tensor(idx);
            std::vector<int> yb(static_cast<std::size_t>(count));
            for (std::int64_t i = 0; i < count; ++i) {
                yb[static_cast<std::size_t>(i)] =
                    train_ptr->labels[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])];
            }
            model::ForwardTrace trace =
                model::model_forward(xb, params, model_config, true, &rng);
            const double batch_loss = loss(trace.probs, yb);
            if (!std::isfinite(batch_loss)) {
                throw NumericError("non-finite training loss at epoch " + std::to_string(epoch));
            }
            epoch_loss += batch_loss * static_cast<double>(count);
            model::ModelGrads grads = model::model_backward(trace, yb);
            adam_step(params, grads, adam, config);
        }
        epoch_loss /= static_cast<double>(n_train);

        auto [val_loss, cm] = evaluate(params, model_config, *val_ptr, config.batch_size);
        const double val_acc = present_class_accuracy(cm);
        const double val_kappa = metrics::kappa(cm);
        result.history.push_back({epoch, epoch_loss, val_loss, val_acc, val_kappa});

        const double criterion = config.best_by_accuracy ? -val_acc : val_loss;
        if (criterion < best_criterion) {
            best_criterion = criterion;
            result.best_params = params;
            result.best_epoch = epoch;
            result.best_val_loss = val_loss;
            result.best_val_accuracy = val_acc;
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
        }
        if (epochs_since_best >= config.patience) break;
    }
    return result;
}

std::string history_to_text(const std::vector<EpochStats>& history) {
    std::ostringstream out;
    out << "# epoch train_loss val_loss val_acc val_kappa\n";
    char buf[160];
    for (const EpochStats& e : history) {
        std::snprintf(buf, sizeof(buf), "%lld %.17g %.17g %.17g %.17g\n",
                      static_cast<long long>(e.epoch), e.train_loss, e.val_loss, e.val_accuracy,
                      e.val_kappa);
        out << buf;
    }
    return out.str();
}

} // namespace dcnet::trainer
