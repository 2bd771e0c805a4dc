#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dcnet/ops.hpp"
#include "dcnet/tensor.hpp"

// The EEG-DCNet model: a convolutional feature block (CV), a multi-branch
// atrous spatial-pyramid block (SP), and a sliding-window head with a
// shared squeeze-and-excitation (SE) attention block and classifier.
// Probabilities of the n overlapping windows are averaged.
namespace dcnet::model {

struct ModelConfig {
    std::int64_t channels = 22;        // electrodes C
    std::int64_t samples = 1125;       // time samples T
    int n_classes = 4;
    std::int64_t f1 = 8;               // temporal filters
    std::int64_t depth_mult = 2;       // depth multiplier D; expanded width F2 = D*F1
    std::int64_t temporal_kernel = 64; // KC
    std::int64_t pool1 = 8;
    std::vector<int> dilations = {2, 4, 6};
    std::int64_t atrous_kernel = 8;
    std::int64_t fuse_width = 32;      // channels after the 1x1 fusion
    std::int64_t n_windows = 6;
    std::int64_t se_reduction = 4;
    double dropout_p = 0.25;
    bool enable_sp = true; // spatial-pyramid block
    bool enable_sw = true; // sliding windows (off -> single window)
    bool enable_at = true; // SE attention

    std::int64_t f2() const { return f1 * depth_mult; }
    std::int64_t conv_time() const { return samples / pool1; } // Tc
    std::int64_t fuse_in_channels() const {
        return (enable_sp ? static_cast<std::int64_t>(dilations.size()) : 1) * conv_time();
    }
    std::int64_t effective_windows() const { return enable_sw ? n_windows : 1; }
    std::int64_t window_rows() const { return fuse_width - effective_windows() + 1; } // Tw

    // Throws ConfigError with the offending field named.
    void validate() const;
};

// Canonical flat key=value serialization (one key per line, fixed order).
// Parsing applies full defaulting: absent keys keep their defaults,
// unknown keys are rejected.
std::string config_to_text(const ModelConfig& config);
ModelConfig config_from_text(const std::string& text);

// Assign one key. Returns false when the key is not a model-config key;
// throws ConfigError on an unparseable value. Does not validate().
bool config_apply(ModelConfig& config, const std::string& key, const std::string& value);

struct BnLayer {
    Tensor gamma, beta;
    ops::BnState state;
};

struct SpBranch {
    Tensor w;
    BnLayer bn;
};

struct ModelParams {
    Tensor cv_conv1_w;             // (KC, 1, 1, F1)
    BnLayer cv_bn1;
    Tensor cv_pw_w;                // (1, 1, F1, F2)
    BnLayer cv_bn2;
    Tensor cv_dw_w;                // (1, C, F2, 1)
    BnLayer cv_bn3;
    std::vector<SpBranch> sp_branches; // per dilation: (atrous_kernel, 1, F2, F2)
    Tensor sp_fuse_w, sp_fuse_b;   // (1, 1, fuse_in_channels, fuse_width), (fuse_width)
    BnLayer sp_fuse_bn;
    Tensor se_w1, se_b1;           // (F2, F2/r), (F2/r)
    Tensor se_w2, se_b2;           // (F2/r, F2), (F2)
    Tensor dense_w, dense_b;       // (F2, n_classes), (n_classes)
};

struct NamedTensor {
    std::string name;
    Tensor* tensor;
};

// Trainable parameters in canonical order (paths like "cv.conv1.w").
std::vector<NamedTensor> named_params(ModelParams& params);
// Batch-norm running statistics, canonical order ("cv.bn1.running_mean", ...).
std::vector<NamedTensor> named_state(ModelParams& params);

// Name/shape of every trainable parameter, derived from the config alone.
std::vector<std::pair<std::string, Shape>> param_shapes(const ModelConfig& config);
std::int64_t param_count(const ModelConfig& config);

// Glorot-uniform weights, zero biases, BN gamma=1/beta=0, running stats
// mean=0/var=1. Deterministic given the rng.
ModelParams init_model(const ModelConfig& config, Rng& rng);

struct CvTrace {
    ops::Conv2dCtx conv1;
    ops::BatchNormCtx bn1;
    ops::Conv2dCtx pw;
    ops::BatchNormCtx bn2;
    ops::DepthwiseCtx dw;
    ops::BatchNormCtx bn3;
    ops::EluCtx elu;
    ops::AvgPoolCtx pool;
    ops::DropoutCtx drop;
};

struct SpTrace {
    struct Branch {
        ops::Conv2dCtx conv;
        ops::BatchNormCtx bn;
        ops::EluCtx elu;
        ops::DropoutCtx drop;
    };
    std::vector<Branch> branches;  // empty when the block is bypassed
    std::int64_t concat_parts = 0; // time-axis blocks to split on backward
    ops::Conv2dCtx fuse;
    ops::BatchNormCtx fuse_bn;
    ops::EluCtx fuse_elu;
    ops::DropoutCtx fuse_drop;
};

struct SeCtx {
    ops::AvgPoolCtx pool;
    ops::DenseCtx fc1;
    ops::ReluCtx relu;
    ops::DenseCtx fc2;
    ops::SigmoidCtx sig;
    Tensor x, scale; // inputs of the broadcast scaling, saved for backward
    bool consumed = false;
};

struct SeGrads {
    Tensor dx, dw1, db1, dw2, db2;
};

// x: [..., Tw, F2] -> same shape. Channel weights from a time-mean squeeze
// followed by a two-layer bottleneck (ReLU then sigmoid); the input is
// rescaled per channel.
Tensor se_block(const Tensor& x, const Tensor& w1, const Tensor& b1, const Tensor& w2,
                const Tensor& b2, SeCtx* ctx = nullptr);
SeGrads se_block_vjp(SeCtx& ctx, const Tensor& upstream);

// x: [..., T, C, 1] -> [..., T/pool1, 1, F2]
Tensor cv_block(const Tensor& x, ModelParams& params, const ModelConfig& config, bool training,
                Rng* rng, CvTrace* trace = nullptr);

// x: [..., Tc, 1, F2] -> [..., 1, F2, fuse_width]. With enable_sp=false the
// branch/concat stage is bypassed and the same fusion layer maps the CV
// output directly.
Tensor sp_block(const Tensor& x, ModelParams& params, const ModelConfig& config, bool training,
                Rng* rng, SpTrace* trace = nullptr);

// x: [W, F2] -> n overlapping windows of shape [W-n+1, F2], 1-based window
// i covering rows [i, i+Tw-1].
std::vector<Tensor> sliding_windows(const Tensor& x, std::int64_t n);

struct WindowTrace {
    std::int64_t start = 0;
    SeCtx se;
    ops::DenseCtx dense;
    ops::SoftmaxCtx softmax;
    Tensor probs; // [B, n_classes]
};

struct ForwardTrace {
    bool training = false;
    ModelConfig config;
    std::int64_t batch = 0;
    CvTrace cv;
    SpTrace sp;
    Shape head_in_shape; // [B, fuse_width, F2]
    std::vector<WindowTrace> windows;
    Tensor probs; // averaged over windows, [B, n_classes]
    bool consumed = false;
};

// batch: [B, C, T] raw trial layout. Returns the trace; trace.probs holds
// the averaged per-class probabilities. Training mode updates BN running
// statistics in params and draws dropout masks from rng.
ForwardTrace model_forward(const Tensor& batch, ModelParams& params, const ModelConfig& config,
                           bool training, Rng* rng);

// Gradients mirror the trainable parameters; ordered() aligns with
// named_params. `input` is the loss gradient w.r.t. the [B, C, T] batch.
struct ModelGrads {
    Tensor cv_conv1_w, cv_bn1_gamma, cv_bn1_beta;
    Tensor cv_pw_w, cv_bn2_gamma, cv_bn2_beta;
    Tensor cv_dw_w, cv_bn3_gamma, cv_bn3_beta;
    struct Branch {
        Tensor w, gamma, beta;
    };
    std::vector<Branch> sp_branches;
    Tensor sp_fuse_w, sp_fuse_b, sp_fuse_bn_gamma, sp_fuse_bn_beta;
    Tensor se_w1, se_b1, se_w2, se_b2;
    Tensor dense_w, dense_b;
    Tensor input;

    std::vector<Tensor*> ordered();
};

// Backward of the mean cross-entropy over the averaged window
// probabilities (the trainer's loss). Requires a training-mode trace;
// each trace is consumable once.
ModelGrads model_backward(ForwardTrace& trace, std::span<const int> labels);

// Checkpoint: magic "DCNK", version, canonical config text, then every
// trainable parameter and BN running statistic as named float32 tensors.
void save_checkpoint(const ModelParams& params, const ModelConfig& config,
                     const std::string& path);
std::pair<ModelParams, ModelConfig> load_checkpoint(const std::string& path);

} // namespace dcnet::model
