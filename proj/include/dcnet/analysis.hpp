#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dcnet/model.hpp"
#include "dcnet/tensor.hpp"

// Architecture arithmetic from first principles: receptive fields, window
// lengths, parameter counts, and operation counts, independent of the
// tensors the model actually allocates. Used to cross-check the published
// EEG-DCNet figures.
namespace dcnet::analysis {

// Published EEG-DCNet reference figures for the default architecture.
inline constexpr std::int64_t kPublishedParams = 28640;
inline constexpr double kPublishedFlopsM = 49.0;
// The published description lists 17 for the dilation-2, kernel-8 branch;
// the dilation formula gives 22. The report prints both.
inline constexpr std::int64_t kPublishedRfDilation2Kernel8 = 17;

// Effective receptive field of a dilated kernel: 2(r-1)(k-1) + k.
std::int64_t receptive_field(std::int64_t dilation, std::int64_t kernel);

// Sliding-window length Tw = Tc - n + 1, requiring Tc > n >= 1.
std::int64_t window_length(std::int64_t tc, std::int64_t n);

// Window length from the raw trial length: Tc = floor(T / (8 * p2)).
std::int64_t window_length_pooled(std::int64_t samples, std::int64_t p2, std::int64_t n);

// MACs of a convolution: output elements x kernel taps x input channels
// (pass in_channels = 1 for depthwise).
std::int64_t conv_macs(std::int64_t out_elements, std::int64_t taps, std::int64_t in_channels);

struct LayerStat {
    std::string name;
    Shape out_shape;          // per-trial, no batch axis
    std::int64_t params = 0;  // trainable
    std::int64_t macs = 0;    // multiply-accumulates (convs and dense)
    std::int64_t ops = 0;     // elementwise ops (BN, activations, pooling)
};

struct BranchField {
    std::int64_t dilation = 0;
    std::int64_t kernel = 0;
    std::int64_t field = 0;
};

struct ModelReport {
    model::ModelConfig config;
    std::vector<LayerStat> layers;
    std::int64_t trainable_params = 0;
    std::int64_t state_values = 0; // BN running statistics, non-trainable
    std::int64_t macs = 0;
    std::int64_t elementwise_ops = 0;
    std::vector<BranchField> fields; // one per atrous branch
    std::int64_t window_length = 0;
    std::int64_t window_count = 0;

    // Convention: one multiply plus one add per MAC, one op per
    // elementwise-touched value.
    std::int64_t flops() const { return 2 * macs + elementwise_ops; }
};

// Full per-layer report; totals are sums over the layer rows. The two
// names exist because callers usually care about one side of the table.
ModelReport count_params(const model::ModelConfig& config);
ModelReport count_flops(const model::ModelConfig& config);

// Reference EEGNet parameter count (temporal conv, depthwise conv,
// separable conv, dense), reconstructed so the defaults reproduce the
// published 2 548 figure for 22 channels x 1125 samples, 4 classes.
struct EegnetConfig {
    std::int64_t channels = 22;
    std::int64_t samples = 1125;
    int n_classes = 4;
    std::int64_t f1 = 8;
    std::int64_t depth_mult = 2;
    std::int64_t temporal_kernel = 64;
    std::int64_t separable_kernel = 16;
    std::int64_t pool1 = 8;
    std::int64_t pool2 = 8;
};
std::int64_t eegnet_param_count(const EegnetConfig& config = {});

// Aligned plain-text table with totals, receptive fields, window line,
// and the comparison against the published reference figures.
std::string report_text(const ModelReport& report);

// The same content as "key=value" records for tooling.
std::string report_records(const ModelReport& report);

} // namespace dcnet::analysis
