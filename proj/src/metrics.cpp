#include "dcnet/metrics.hpp"

#include <string>

#include "dcnet/errors.hpp"

namespace dcnet::metrics {

ConfusionMatrix::ConfusionMatrix(int n_classes) : n(n_classes) {
    if (n_classes < 1) throw UsageError("confusion matrix needs at least one class");
    counts.assign(static_cast<std::size_t>(n) * n, 0);
}

std::int64_t ConfusionMatrix::at(int true_class, int predicted) const {
    return counts[static_cast<std::size_t>(true_class) * n + predicted];
}

std::int64_t& ConfusionMatrix::at(int true_class, int predicted) {
    return counts[static_cast<std::size_t>(true_class) * n + predicted];
}

std::int64_t ConfusionMatrix::total() const {
    std::int64_t t = 0;
    for (std::int64_t c : counts) t += c;
    return t;
}

std::int64_t ConfusionMatrix::row_sum(int true_class) const {
    std::int64_t s = 0;
    for (int p = 0; p < n; ++p) s += at(true_class, p);
    return s;
}

std::int64_t ConfusionMatrix::col_sum(int predicted) const {
    std::int64_t s = 0;
    for (int t = 0; t < n; ++t) s += at(t, predicted);
    return s;
}

ConfusionMatrix confusion(std::span<const int> predictions, std::span<const int> labels, int n) {
    if (predictions.size() != labels.size()) {
        throw UsageError("confusion: " + std::to_string(predictions.size()) + " predictions vs " +
                         std::to_string(labels.size()) + " labels");
    }
    ConfusionMatrix cm(n);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const int l = labels[i], p = predictions[i];
        if (l < 0 || l >= n || p < 0 || p >= n) {
            throw UsageError("confusion: pair (" + std::to_string(l) + ", " + std::to_string(p) +
                             ") outside [0, " + std::to_string(n) + ")");
        }
        ++cm.at(l, p);
    }
    return cm;
}

std::vector<double> per_class_recall(const ConfusionMatrix& cm) {
    std::vector<double> recall(static_cast<std::size_t>(cm.n));
    for (int k = 0; k < cm.n; ++k) {
        const std::int64_t row = cm.row_sum(k);
        if (row == 0) {
            throw UsageError("accuracy undefined: class " + std::to_string(k) +
                             " has no true samples; exclude it before scoring");
        }
        recall[static_cast<std::size_t>(k)] =
            static_cast<double>(cm.at(k, k)) / static_cast<double>(row);
    }
    return recall;
}

double accuracy(const ConfusionMatrix& cm) {
    const std::vector<double> recall = per_class_recall(cm);
    double s = 0.0;
    for (double r : recall) s += r;
    return s / static_cast<double>(cm.n);
}

namespace {

double cohen_kappa(double p_o, double p_e) {
    if (p_e >= 1.0) return 0.0;
    return (p_o - p_e) / (1.0 - p_e);
}

} // namespace

double kappa(const ConfusionMatrix& cm, bool per_class) {
    const std::int64_t total = cm.total();
    if (cm.n < 1 || total == 0) throw UsageError("kappa undefined on an empty confusion matrix");
    const double nt = static_cast<double>(total);

    if (!per_class) {
        double trace = 0.0, chance = 0.0;
        for (int k = 0; k < cm.n; ++k) {
            trace += static_cast<double>(cm.at(k, k));
            chance += static_cast<double>(cm.row_sum(k)) * static_cast<double>(cm.col_sum(k));
        }
        return cohen_kappa(trace / nt, chance / (nt * nt));
    }

    // Literal per-class reading: binarize each class one-vs-rest and
    // average the resulting two-class kappas.
    double sum = 0.0;
    for (int k = 0; k < cm.n; ++k) {
        const double row = static_cast<double>(cm.row_sum(k));
        const double col = static_cast<double>(cm.col_sum(k));
        const double tp = static_cast<double>(cm.at(k, k));
        // Binary agreement: both say k, or both say not-k.
        const double p_o = (tp + (nt - row - col + tp)) / nt;
        const double p_e = (row * col + (nt - row) * (nt - col)) / (nt * nt);
        sum += cohen_kappa(p_o, p_e);
    }
    return sum / static_cast<double>(cm.n);
}

} // namespace dcnet::metrics
