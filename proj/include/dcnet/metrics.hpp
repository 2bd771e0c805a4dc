#pragma once

#include <cstdint>
#include <span>
#include <vector>

// Classification metrics. `accuracy` is the macro-averaged per-class
// recall; `kappa` is standard Cohen kappa by default with a literal
// per-class (one-vs-rest, averaged) variant behind a flag.
namespace dcnet::metrics {

struct ConfusionMatrix {
    int n = 0;
    std::vector<std::int64_t> counts; // n*n, row = true class, col = predicted

    ConfusionMatrix() = default;
    explicit ConfusionMatrix(int n_classes);

    std::int64_t at(int true_class, int predicted) const;
    std::int64_t& at(int true_class, int predicted);
    std::int64_t total() const;
    std::int64_t row_sum(int true_class) const;
    std::int64_t col_sum(int predicted) const;
};

// counts[label][prediction] incremented per pair.
ConfusionMatrix confusion(std::span<const int> predictions, std::span<const int> labels, int n);

// Mean over classes of diagonal / row-sum. Every class must appear at
// least once among the true labels.
double accuracy(const ConfusionMatrix& cm);

std::vector<double> per_class_recall(const ConfusionMatrix& cm);

// Cohen kappa; 0 when chance agreement saturates (p_e = 1). With
// per_class=true, each class is scored one-vs-rest and the kappas are
// averaged.
double kappa(const ConfusionMatrix& cm, bool per_class = false);

} // namespace dcnet::metrics
