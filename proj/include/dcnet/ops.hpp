#pragma once

#include <cstdint>

#include "dcnet/tensor.hpp"

// Layer primitives with analytic reverse-mode gradients.
//
// Convention: the last tensor axes carry the operation's structure and any
// leading axes are batch. conv2d/depthwise_conv2d read the last three axes
// as (H, W, C); batch_norm normalizes per last-axis channel over everything
// else; avg_pool pools the third-from-last axis; dense maps the last axis.
// Stride is always 1; downsampling happens through avg_pool.
//
// Each forward optionally fills a context; the matching *_vjp consumes it
// exactly once and requires an upstream gradient shaped like the forward
// output. All functions are pure given their inputs and explicit rng.
namespace dcnet::ops {

enum class Padding { same, valid };

struct ConvSpec {
    int dilation = 1;
    Padding padding = Padding::valid;
    bool bias = false;
};

struct ConvGrads {
    Tensor dx, dw, db; // db empty when the op has no bias
};

struct Conv2dCtx {
    Tensor x, w;
    ConvSpec spec;
    Shape out_shape;
    std::int64_t pad_h = 0, pad_w = 0;
    bool consumed = false;
};

// x: [..., H, W, Cin], w: [kh, kw, Cin, Cout], bias: [Cout] or null.
// Cross-correlation (no kernel flip) with input sampled at stride
// `dilation` inside the kernel window. Same-padding keeps the spatial
// extents and puts the extra zero of an even effective kernel on the
// trailing side.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor* bias, const ConvSpec& spec,
              Conv2dCtx* ctx = nullptr);
ConvGrads conv2d_vjp(Conv2dCtx& ctx, const Tensor& upstream);

struct DepthwiseCtx {
    Tensor x, w;
    ConvSpec spec;
    Shape out_shape;
    std::int64_t pad_h = 0, pad_w = 0;
    bool consumed = false;
};

// x: [..., H, W, C], w: [kh, kw, C, mult]. No cross-channel mixing;
// output channel index is c * mult + m.
Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, const Tensor* bias, const ConvSpec& spec,
                        DepthwiseCtx* ctx = nullptr);
ConvGrads depthwise_conv2d_vjp(DepthwiseCtx& ctx, const Tensor& upstream);

// Running statistics for one batch-norm layer (non-trainable state).
struct BnState {
    Tensor running_mean, running_var;
};

struct BatchNormCtx {
    Tensor xhat;    // normalized input (training) or x - running_mean (eval)
    Tensor inv_std; // per channel
    Tensor gamma;
    Shape out_shape;
    std::int64_t reduce_n = 0;
    bool training = false;
    bool consumed = false;
};

struct BatchNormGrads {
    Tensor dx, dgamma, dbeta;
};

// Channels are the last axis. Training mode normalizes by the biased batch
// statistics over all other axes and updates state as
// running = momentum * running + (1 - momentum) * batch.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BnState& state,
                  bool training, double momentum = 0.9, double eps = 1e-5,
                  BatchNormCtx* ctx = nullptr);
BatchNormGrads batch_norm_vjp(BatchNormCtx& ctx, const Tensor& upstream);

struct EluCtx {
    Tensor x;
    double alpha = 1.0;
    bool consumed = false;
};

Tensor elu(const Tensor& x, double alpha = 1.0, EluCtx* ctx = nullptr);
Tensor elu_vjp(EluCtx& ctx, const Tensor& upstream);

struct AvgPoolCtx {
    Shape in_shape, out_shape;
    std::int64_t pool = 1;
    bool consumed = false;
};

// Non-overlapping mean pooling of the third-from-last axis with stride =
// pool; a trailing remainder shorter than `pool` is discarded.
Tensor avg_pool(const Tensor& x, std::int64_t pool, AvgPoolCtx* ctx = nullptr);
Tensor avg_pool_vjp(AvgPoolCtx& ctx, const Tensor& upstream);

struct DropoutCtx {
    Tensor mask; // empty when the op was an identity
    Shape out_shape;
    bool consumed = false;
};

// Inverted dropout: each element zeroed with probability p and survivors
// scaled by 1/(1-p) in training mode; identity in eval mode. The mask is
// drawn from rng in flat element order.
Tensor dropout(const Tensor& x, double p, bool training, Rng* rng, DropoutCtx* ctx = nullptr);
Tensor dropout_vjp(DropoutCtx& ctx, const Tensor& upstream);

struct DenseCtx {
    Tensor x, w;
    Shape out_shape;
    bool consumed = false;
};

struct DenseGrads {
    Tensor dx, dw, db;
};

// Affine map on the last axis: x[..., k] * w[k, n] + b[n].
Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b, DenseCtx* ctx = nullptr);
DenseGrads dense_vjp(DenseCtx& ctx, const Tensor& upstream);

struct ReluCtx {
    Tensor x;
    bool consumed = false;
};

Tensor relu(const Tensor& x, ReluCtx* ctx = nullptr);
Tensor relu_vjp(ReluCtx& ctx, const Tensor& upstream);

struct SigmoidCtx {
    Tensor y;
    bool consumed = false;
};

Tensor sigmoid(const Tensor& x, SigmoidCtx* ctx = nullptr);
Tensor sigmoid_vjp(SigmoidCtx& ctx, const Tensor& upstream);

struct SoftmaxCtx {
    Tensor y;
    int axis = -1;
    bool consumed = false;
};

// Max-subtracted softmax along `axis`; output sums to 1 along that axis.
Tensor softmax(const Tensor& x, int axis, SoftmaxCtx* ctx = nullptr);
Tensor softmax_vjp(SoftmaxCtx& ctx, const Tensor& upstream);

} // namespace dcnet::ops
