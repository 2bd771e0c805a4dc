#include "dcnet/ops.hpp"

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "dcnet/errors.hpp"

namespace dcnet::ops {

namespace {

// Marks a context consumed and validates the upstream gradient against the
// recorded forward output shape.
void consume_ctx(bool& consumed, const Shape& out_shape, const Tensor& upstream, const char* op) {
    if (consumed) {
        throw UsageError(std::string(op) + ": context already consumed by a previous vjp call");
    }
    if (upstream.shape() != out_shape) {
        throw ShapeError(std::string(op) + ": upstream gradient shape " +
                         shape_str(upstream.shape()) + " does not match forward output " +
                         shape_str(out_shape));
    }
    consumed = true;
}

struct ConvGeom {
    std::int64_t batch, h, w, cin;   // input
    std::int64_t kh, kw;             // kernel spatial extents
    std::int64_t ho, wo;             // output spatial extents
    std::int64_t pad_h, pad_w;
    std::int64_t dil;
};

ConvGeom resolve_conv_geom(const Tensor& x, const Tensor& w, const ConvSpec& spec,
                           const char* op) {
    if (spec.dilation < 1) {
        throw ConfigError(std::string(op) + ": dilation must be >= 1, got " +
                          std::to_string(spec.dilation));
    }
    if (x.rank() < 3) {
        throw ShapeError(std::string(op) + ": input must have rank >= 3, got shape " +
                         shape_str(x.shape()));
    }
    if (w.rank() != 4) {
        throw ShapeError(std::string(op) + ": weight must have rank 4, got shape " +
                         shape_str(w.shape()));
    }
    ConvGeom g;
    g.h = x.extent(x.rank() - 3);
    g.w = x.extent(x.rank() - 2);
    g.cin = x.extent(x.rank() - 1);
    g.batch = 1;
    for (int a = 0; a < x.rank() - 3; ++a) g.batch *= x.extent(a);
    g.kh = w.extent(0);
    g.kw = w.extent(1);
    g.dil = spec.dilation;
    if (w.extent(2) != g.cin) {
        throw ShapeError(std::string(op) + ": weight expects " + std::to_string(w.extent(2)) +
                         " input channels but input has " + std::to_string(g.cin));
    }
    const std::int64_t ek_h = (g.kh - 1) * g.dil + 1;
    const std::int64_t ek_w = (g.kw - 1) * g.dil + 1;
    if (spec.padding == Padding::valid) {
        g.ho = g.h - ek_h + 1;
        g.wo = g.w - ek_w + 1;
        g.pad_h = g.pad_w = 0;
        if (g.ho <= 0 || g.wo <= 0) {
            throw ShapeError(std::string(op) + ": effective kernel (" + std::to_string(ek_h) +
                             ", " + std::to_string(ek_w) + ") exceeds input (" +
                             std::to_string(g.h) + ", " + std::to_string(g.w) +
                             ") under valid padding");
        }
    } else {
        g.ho = g.h;
        g.wo = g.w;
        g.pad_h = (ek_h - 1) / 2;
        g.pad_w = (ek_w - 1) / 2;
    }
    return g;
}

void check_conv_bias(const Tensor* bias, bool want_bias, std::int64_t cout, const char* op) {
    if (want_bias) {
        if (bias == nullptr) {
            throw ConfigError(std::string(op) + ": spec requests a bias but none was supplied");
        }
        if (bias->rank() != 1 || bias->extent(0) != cout) {
            throw ShapeError(std::string(op) + ": bias shape " + shape_str(bias->shape()) +
                             " does not match " + std::to_string(cout) + " output channels");
        }
    } else if (bias != nullptr && !bias->empty()) {
        throw ConfigError(std::string(op) + ": bias tensor supplied but spec.bias is false");
    }
}

Shape conv_out_shape(const Tensor& x, std::int64_t ho, std::int64_t wo, std::int64_t cout) {
    Shape out = x.shape();
    out[out.size() - 3] = ho;
    out[out.size() - 2] = wo;
    out[out.size() - 1] = cout;
    return out;
}

} // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor* bias, const ConvSpec& spec,
              Conv2dCtx* ctx) {
    const ConvGeom g = resolve_conv_geom(x, w, spec, "conv2d");
    const std::int64_t cout = w.extent(3);
    check_conv_bias(bias, spec.bias, cout, "conv2d");

    Tensor out(conv_out_shape(x, g.ho, g.wo, cout));
    const double* xp = x.data();
    const double* wp = w.data();
    double* op = out.data();

    const std::int64_t x_n = g.h * g.w * g.cin, x_h = g.w * g.cin;
    const std::int64_t o_n = g.ho * g.wo * cout, o_h = g.wo * cout;
    const std::int64_t w_u = g.kw * g.cin * cout, w_v = g.cin * cout;

    if (spec.bias) {
        const double* bp = bias->data();
        for (std::int64_t i = 0; i < out.size(); ++i) op[i] = bp[i % cout];
    }
    for (std::int64_t n = 0; n < g.batch; ++n) {
        for (std::int64_t i = 0; i < g.ho; ++i) {
            for (std::int64_t u = 0; u < g.kh; ++u) {
                const std::int64_t p = i + u * g.dil - g.pad_h;
                if (p < 0 || p >= g.h) continue;
                for (std::int64_t j = 0; j < g.wo; ++j) {
                    double* orow = op + n * o_n + i * o_h + j * cout;
                    for (std::int64_t v = 0; v < g.kw; ++v) {
                        const std::int64_t q = j + v * g.dil - g.pad_w;
                        if (q < 0 || q >= g.w) continue;
                        const double* xrow = xp + n * x_n + p * x_h + q * g.cin;
                        const double* wrow = wp + u * w_u + v * w_v;
                        for (std::int64_t ci = 0; ci < g.cin; ++ci) {
                            const double xv = xrow[ci];
                            const double* wc = wrow + ci * cout;
                            for (std::int64_t co = 0; co < cout; ++co) orow[co] += xv * wc[co];
                        }
                    }
                }
            }
        }
    }
    if (ctx != nullptr) {
        ctx->x = x;
        ctx->w = w;
        ctx->spec = spec;
        ctx->out_shape = out.shape();
        ctx->pad_h = g.pad_h;
        ctx->pad_w = g.pad_w;
        ctx->consumed = false;
    }
    return out;
}

ConvGrads conv2d_vjp(Conv2dCtx& ctx, const Tensor& upstream) {
    consume_ctx(ctx.consumed, ctx.out_shape, upstream, "conv2d_vjp");
    const ConvGeom g = resolve_conv_geom(ctx.x, ctx.w, ctx.spec, "conv2d_vjp");
    const std::int64_t cout = ctx.w.extent(3);

    ConvGrads grads;
    grads.dx = Tensor(ctx.x.shape());
    grads.dw = Tensor(ctx.w.shape());
    const double* xp = ctx.x.data();
    const double* wp = ctx.w.data();
    const double* up = upstream.data();
    double* dxp = grads.dx.data();
    double* dwp = grads.dw.data();

    const std::int64_t x_n = g.h * g.w * g.cin, x_h = g.w * g.cin;
    const std::int64_t o_n = g.ho * g.wo * cout, o_h = g.wo * cout;
    const std::int64_t w_u = g.kw * g.cin * cout, w_v = g.cin * cout;

    for (std::int64_t n = 0; n < g.batch; ++n) {
        for (std::int64_t i = 0; i < g.ho; ++i) {
            for (std::int64_t u = 0; u < g.kh; ++u) {
                const std::int64_t p = i + u * g.dil - g.pad_h;
                if (p < 0 || p >= g.h) continue;
                for (std::int64_t j = 0; j < g.wo; ++j) {
                    const double* urow = up + n * o_n + i * o_h + j * cout;
                    for (std::int64_t v = 0; v < g.kw; ++v) {
                        const std::int64_t q = j + v * g.dil - g.pad_w;
                        if (q < 0 || q >= g.w) continue;
                        const double* xrow = xp + n * x_n + p * x_h + q * g.cin;
                        double* dxrow = dxp + n * x_n + p * x_h + q * g.cin;
                        const std::int64_t w_off = u * w_u + v * w_v;
                        for (std::int64_t ci = 0; ci < g.cin; ++ci) {
                            const double* wc = wp + w_off + ci * cout;
                            double* dwc = dwp + w_off + ci * cout;
                            const double xv = xrow[ci];
                            double acc = 0.0;
                            for (std::int64_t co = 0; co < cout; ++co) {
                                acc += urow[co] * wc[co];
                                dwc[co] += xv * urow[co];
                            }
                            dxrow[ci] += acc;
                        }
                    }
                }
            }
        }
    }
    if (ctx.spec.bias) {
        grads.db = Tensor(Shape{cout});
        double* dbp = grads.db.data();
        for (std::int64_t i = 0; i < upstream.size(); ++i) dbp[i % cout] += up[i];
    }
    return grads;
}

Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, const Tensor* bias, const ConvSpec& spec,
                        DepthwiseCtx* ctx) {
    const ConvGeom g = resolve_conv_geom(x, w, spec, "depthwise_conv2d");
    const std::int64_t mult = w.extent(3);
    const std::int64_t cout = g.cin * mult;
    check_conv_bias(bias, spec.bias, cout, "depthwise_conv2d");

    Tensor out(conv_out_shape(x, g.ho, g.wo, cout));
    const double* xp = x.data();
    const double* wp = w.data();
    double* op = out.data();

    const std::int64_t x_n = g.h * g.w * g.cin, x_h = g.w * g.cin;
    const std::int64_t o_n = g.ho * g.wo * cout, o_h = g.wo * cout;
    const std::int64_t w_u = g.kw * g.cin * mult, w_v = g.cin * mult;

    if (spec.bias) {
        const double* bp = bias->data();
        for (std::int64_t i = 0; i < out.size(); ++i) op[i] = bp[i % cout];
    }
    for (std::int64_t n = 0; n < g.batch; ++n) {
        for (std::int64_t i = 0; i < g.ho; ++i) {
            for (std::int64_t u = 0; u < g.kh; ++u) {
                const std::int64_t p = i + u * g.dil - g.pad_h;
                if (p < 0 || p >= g.h) continue;
                for (std::int64_t j = 0; j < g.wo; ++j) {
                    double* orow = op + n * o_n + i * o_h + j * cout;
                    for (std::int64_t v = 0; v < g.kw; ++v) {
                        const std::int64_t q = j + v * g.dil - g.pad_w;
                        if (q < 0 || q >= g.w) continue;
                        const double* xrow = xp + n * x_n + p * x_h + q * g.cin;
                        const double* wrow = wp + u * w_u + v * w_v;
                        for (std::int64_t c = 0; c < g.cin; ++c) {
                            const double xv = xrow[c];
                            for (std::int64_t m = 0; m < mult; ++m) {
                                orow[c * mult + m] += xv * wrow[c * mult + m];
                            }
                        }
                    }
                }
            }
        }
    }
    if (ctx != nullptr) {
        ctx->x = x;
        ctx->w = w;
        ctx->spec = spec;
        ctx->out_shape = out.shape();
        ctx->pad_h = g.pad_h;
        ctx->pad_w = g.pad_w;
        ctx->consumed = false;
    }
    return out;
}

ConvGrads depthwise_conv2d_vjp(DepthwiseCtx& ctx, const Tensor& upstream) {
    consume_ctx(ctx.consumed, ctx.out_shape, upstream, "depthwise_conv2d_vjp");
    const ConvGeom g = resolve_conv_geom(ctx.x, ctx.w, ctx.spec, "depthwise_conv2d_vjp");
    const std::int64_t mult = ctx.w.extent(3);
    const std::int64_t cout = g.cin * mult;

    ConvGrads grads;
    grads.dx = Tensor(ctx.x.shape());
    grads.dw = Tensor(ctx.w.shape());
    const double* xp = ctx.x.data();
    const double* wp = ctx.w.data();
    const double* up = upstream.data();
    double* dxp = grads.dx.data();
    double* dwp = grads.dw.data();

    const std::int64_t x_n = g.h * g.w * g.cin, x_h = g.w * g.cin;
    const std::int64_t o_n = g.ho * g.wo * cout, o_h = g.wo * cout;
    const std::int64_t w_u = g.kw * g.cin * mult, w_v = g.cin * mult;

    for (std::int64_t n = 0; n < g.batch; ++n) {
        for (std::int64_t i = 0; i < g.ho; ++i) {
            for (std::int64_t u = 0; u < g.kh; ++u) {
                const std::int64_t p = i + u * g.dil - g.pad_h;
                if (p < 0 || p >= g.h) continue;
                for (std::int64_t j = 0; j < g.wo; ++j) {
                    const double* urow = up + n * o_n + i * o_h + j * cout;
                    for (std::int64_t v = 0; v < g.kw; ++v) {
                        const std::int64_t q = j + v * g.dil - g.pad_w;
                        if (q < 0 || q >= g.w) continue;
                        const double* xrow = xp + n * x_n + p * x_h + q * g.cin;
                        double* dxrow = dxp + n * x_n + p * x_h + q * g.cin;
                        const std::int64_t w_off = u * w_u + v * w_v;
                        for (std::int64_t c = 0; c < g.cin; ++c) {
                            const double xv = xrow[c];
                            double acc = 0.0;
                            for (std::int64_t m = 0; m < mult; ++m) {
                                const double uv = urow[c * mult + m];
                                acc += uv * wp[w_off + c * mult + m];
                                dwp[w_off + c * mult + m] += xv * uv;
                            }
                            dxrow[c] += acc;
                        }
                    }
                }
            }
        }
    }
    if (ctx.spec.bias) {
        grads.db = Tensor(Shape{cout});
        double* dbp = grads.db.data();
        for (std::int64_t i = 0; i < upstream.size(); ++i) dbp[i % cout] += up[i];
    }
    return grads;
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BnState& state,
                  bool training, double momentum, double eps, BatchNormCtx* ctx) {
    if (x.rank() < 1 || x.size() == 0) {
        throw ShapeError("batch_norm: input must be non-empty, got shape " + shape_str(x.shape()));
    }
    const std::int64_t c = x.extent(x.rank() - 1);
    if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
        throw ShapeError("batch_norm: gamma/beta must have shape [" + std::to_string(c) +
                         "], got " + shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
    }
    if (momentum < 0.0 || momentum >= 1.0) {
        throw ConfigError("batch_norm: momentum must be in [0, 1), got " + std::to_string(momentum));
    }
    if (eps <= 0.0) {
        throw ConfigError("batch_norm: eps must be positive, got " + std::to_string(eps));
    }
    if (state.running_mean.empty()) state.running_mean = Tensor::zeros(Shape{c});
    if (state.running_var.empty()) state.running_var = Tensor::ones(Shape{c});
    if (state.running_mean.shape() != Shape{c} || state.running_var.shape() != Shape{c}) {
        throw ShapeError("batch_norm: running statistics do not match " + std::to_string(c) +
                         " channels");
    }

    const std::int64_t n = x.size() / c;
    const double* xp = x.data();
    Tensor out(x.shape());
    double* op = out.data();
    Tensor xhat(x.shape());
    double* hp = xhat.data();
    Tensor inv_std(Shape{c});
    double* ip = inv_std.data();
    const double* gp = gamma.data();
    const double* bp = beta.data();

    if (training) {
        std::vector<double> mean(static_cast<std::size_t>(c), 0.0);
        std::vector<double> var(static_cast<std::size_t>(c), 0.0);
        for (std::int64_t i = 0; i < x.size(); ++i) mean[i % c] += xp[i];
        for (std::int64_t k = 0; k < c; ++k) mean[k] /= static_cast<double>(n);
        for (std::int64_t i = 0; i < x.size(); ++i) {
            const double d = xp[i] - mean[i % c];
            var[i % c] += d * d;
        }
        for (std::int64_t k = 0; k < c; ++k) {
            var[k] /= static_cast<double>(n);
            ip[k] = 1.0 / std::sqrt(var[k] + eps);
        }
        for (std::int64_t i = 0; i < x.size(); ++i) {
            const std::int64_t k = i % c;
            hp[i] = (xp[i] - mean[k]) * ip[k];
            op[i] = gp[k] * hp[i] + bp[k];
        }
        double* rm = state.running_mean.data();
        double* rv = state.running_var.data();
        for (std::int64_t k = 0; k < c; ++k) {
            rm[k] = momentum * rm[k] + (1.0 - momentum) * mean[k];
            rv[k] = momentum * rv[k] + (1.0 - momentum) * var[k];
        }
    } else {
        const double* rm = state.running_mean.data();
        const double* rv = state.running_var.data();
        for (std::int64_t k = 0; k < c; ++k) ip[k] = 1.0 / std::sqrt(rv[k] + eps);
        for (std::int64_t i = 0; i < x.size(); ++i) {
            const std::int64_t k = i % c;
            hp[i] = (xp[i] - rm[k]) * ip[k];
            op[i] = gp[k] * hp[i] + bp[k];
        }
    }
    if (ctx != nullptr) {
        ctx->xhat = std::move(xhat);
        ctx->inv_std = std::move(inv_std);
        ctx->gamma = gamma;
        ctx->out_shape = out.shape();
        ctx->reduce_n = n;
        ctx->training = training;
        ctx->consumed = false;
    }
    return out;
}

BatchNormGrads batch_norm_vjp(BatchNormCtx& ctx, const Tensor& upstream) {
    consume_ctx(ctx.consumed, ctx.out_shape, upstream, "batch_norm_vjp");
    const std::int64_t c = ctx.gamma.extent(0);
    const double n = static_cast<double>(ctx.reduce_n);
    const double* up = upstream.data();
    const double* hp = ctx.xhat.data();
    const double* ip = ctx.inv_std.data();
    const double* gp = ctx.gamma.data();

    BatchNormGrads grads;
    grads.dx = Tensor(ctx.xhat.shape());
    grads.dgamma = Tensor(Shape{c});
    grads.dbeta = Tensor(Shape{c});
    double* dxp = grads.dx.data();
    double* dgp = grads.dgamma.data();
    double* dbp = grads.dbeta.data();

    for (std::int64_t i = 0; i < upstream.size(); ++i) {
        const std::int64_t k = i % c;
        dbp[k] += up[i];
        dgp[k] += up[i] * hp[i];
    }
    if (ctx.training) {
        // dx = gamma * inv_std * (up - mean(up) - xhat * mean(up * xhat)), per channel.
        for (std::int64_t i = 0; i < upstream.size(); ++i) {
            const std::int64_t k = i % c;
            dxp[i] = gp[k] * ip[k] * (up[i] - dbp[k] / n - hp[i] * dgp[k] / n);
        }
    } else {
        for (std::int64_t i = 0; i < upstream.size(); ++i) {
            const std::int64_t k = i % c;
            dxp[i] = gp[k] * ip[k] * up[i];
        }
    }
    return grads;
}

Tensor elu(const Tensor& x, double alpha, EluCtx* ctx) {
    Tensor out(x.shape());
    const double* xp = x.data();
    double* op = out.data();
    for (std::int64_t i = 0; i < x.size(); ++i) {
        op[i] = xp[i] > 0.0 ? xp[i] : alpha * std::expm1(xp[i]);
    }
    if (ctx != nullptr) {
        ctx->x = x;
        ctx->alpha = alpha;
        ctx->consumed = false;
    }
    return out;
}

Tensor elu_vjp(EluCtx& ctx, const Tensor& upstream) {
    consume_ctx(ctx.consumed, ctx.x.shape(), upstream, "elu_vjp");
    Tensor dx(ctx.x.shape());
    const double* xp = ctx.x.data();
    const double* up = upstream.data();
    double* dp = dx.data();
    for (std::int64_t i = 0; i < dx.size(); ++i) {
        dp[i] = up[i] * (xp[i] > 0.0 ? 1.0 : ctx.alpha * std::exp(xp[i]));
    }
    return dx;
}

Tensor avg_pool(const Tensor& x, std::int64_t pool, AvgPoolCtx* ctx) {
    if (pool < 1) {
        throw ConfigError("avg_pool: pool size must be >= 1, got " + std::to_string(pool));
    }
    if (x.rank() < 3) {
        throw ShapeError("avg_pool: input must have rank >= 3, got shape " + shape_str(x.shape()));
    }
    const int h_axis = x.rank() - 3;
    const std::int64_t h = x.extent(h_axis);
    if (h < pool) {
        throw ShapeError("avg_pool: pooled axis extent " + std::to_string(h) +
                         " is smaller than pool size " + std::to_string(pool));
    }
    const std::int64_t ho = h / pool;
    Shape out_shape = x.shape();
    out_shape[h_axis] = ho;
    Tensor out(out_shape);

    std::int64_t batch = 1;
    for (int a = 0; a < h_axis; ++a) batch *= x.extent(a);
    const std::int64_t inner = x.extent(x.rank() - 2) * x.extent(x.rank() - 1);
    const double* xp = x.data();
    double* op = out.data();
    const double scale = 1.0 / static_cast<double>(pool);
    for (std::int64_t n = 0; n < batch; ++n) {
        for (std::int64_t t = 0; t < ho; ++t) {
            double* orow = op + (n * ho + t) * inner;
            for (std::int64_t s = 0; s < pool; ++s) {
                const double* xrow = xp + (n * h + t * pool + s) * inner;
                for (std::int64_t i = 0; i < inner; ++i) orow[i] += xrow[i];
            }
            for (std::int64_t i = 0; i < inner; ++i) orow[i] *= scale;
        }
    }
    if (ctx != nullptr) {
        ctx->in_shape = x.shape();
        ctx->out_shape = out_shape;
        ctx->pool = pool;
        ctx->consumed = false;
    }
    return out;
}

Tensor avg_pool_vjp(AvgPoolCtx& ctx, const Tensor& upstream) {
    consume_ctx(ctx.consumed, ctx.out_shape, upstream, "avg_pool_vjp");
    Tensor dx(ctx.in_shape);
    const int h_axis = static_cast<int>(ctx.in_shape.size()) - 3;
    const std::int64_t h = ctx.in_shape[h_axis];
    const std::int64_t ho = ctx.out_shape[h_axis];
    std::int64_t batch = 1;
    for (int a = 0; a < h_axis; ++a) batch *= ctx.in_shape[a];
    const std::int64_t inner =
        ctx.in_shape[ctx.in_shape.size() - 2] * ctx.in_shape[ctx.in_shape.size() - 1];
    const double* up = upstream.data();
    double* dp = dx.data();
    const double scale = 1.0 / static_cast<double>(ctx.pool);
    for (std::int64_t n = 0; n < batch; ++n) {
        for (std::int64_t t = 0; t < ho; ++t) {
            const double* urow = up + (n * ho + t) * inner;
            for (std::int64_t s = 0; s < ctx.pool; ++s) {
                double* drow = dp + (n * h + t * ctx.pool + s) * inner;
                for (std::int64_t i = 0; i < inner; ++i) drow[i] = urow[i] * scale;
            }
        }
    }
    return dx;
}

Tensor dropout(const Tensor& x, double p, bool training, Rng* rng, DropoutCtx* ctx) {
    if (p < 0.0 || p >= 1.0) {
        throw ConfigError("dropout: probability must be in [0, 1), got " + std::to_string(p));
    }
    if (!training || p == 0.0) {
        if (ctx != nullptr) {
            ctx->mask = Tensor();
            ctx->out_shape = x.shape();
            ctx->consumed = false;
        }
        return x;
    }
    if (rng == nullptr) {
        throw UsageError("dropout: training mode with p > 0 requires an rng");
    }
    Tensor mask(x.shape());
    double* mp = mask.data();
    const double keep_scale = 1.0 / (1.0 - p);
    for (std::int64_t i = 0; i < mask.size(); ++i) {
        mp[i] = rng->next_double() < p ? 0.0 : keep_scale;
    }
    Tensor out(x.shape());
    const double* xp = x.data();
    double* op = out.data();
    for (std::int64_t i = 0; i < out.size(); ++i) op[i] = xp[i] * mp[i];
    if (ctx != nullptr) {
        ctx->mask = std::move(mask);
        ctx->out_shape = x.shape();
        ctx->consumed = false;
    }
    return out;
}

Tensor dropout_vjp(DropoutCtx& ctx, const Tensor& upstream) {
    consume_ctx(ctx.consumed, ctx.out_shape, upstream, "dropout_vjp");
    if (ctx.mask.empty()) return upstream;
    return ew_mul(upstream, ctx.mask);
}

Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b, DenseCtx* ctx) {
    if (x.rank() < 1) {
        throw ShapeError("dense: input must have rank >= 1");
    }
    if (w.rank() != 2) {
        throw ShapeError("dense: weight must have rank 2, got shape " + shape_str(w.shape()));
    }
    const std::int64_t k = x.extent(x.rank() - 1);
    const std::int64_t n = w.extent(1);
    if (w.extent(0) != k) {
        throw ShapeError("dense: weight expects " + std::to_string(w.extent(0)) +
                         " inputs but input has " + std::to_string(k));
    }
    if (b.shape() != Shape{n}) {
        throw ShapeError("dense: bias shape " + shape_str(b.shape()) + " does not match " +
                         std::to_string(n) + " outputs");
    }
    Shape out_shape = x.shape();
    out_shape[out_shape.size() - 1] = n;
    Tensor out(out_shape);
    const std::int64_t m = x.size() / k;
    const double* xp = x.data();
    const double* wp = w.data();
    const double* bp = b.data();
    double* op = out.data();
    for (std::int64_t r = 0; r < m; ++r) {
        double* orow = op + r * n;
        for (std::int64_t j = 0; j < n; ++j) orow[j] = bp[j];
        const double* xrow = xp + r * k;
        for (std::int64_t i = 0; i < k; ++i) {
            const double xv = xrow[i];
            const double* wrow = wp + i * n;
            for (std::int64_t j = 0; j < n; ++j) orow[j] += xv * wrow[j];
        }
    }
    if (ctx != nullptr) {
        ctx->x = x;
        ctx->w = w;
        ctx->out_shape = out_shape;
        ctx->consumed = false;
    }
    return out;
}

DenseGrads dense_vjp(DenseCtx& ctx, const Tensor& upstream) {
    consume_ctx(ctx.consumed, ctx.out_shape, upstream, "dense_vjp");
    const std::int64_t k = ctx.w.extent(0);
    const std::int64_t n = ctx.w.extent(1);
    const std::int64_t m = ctx.x.size() / k;

    DenseGrads grads;
    grads.dx = Tensor(ctx.x.shape());
    grads.dw = Tensor(ctx.w.shape());
    grads.db = Tensor(Shape{n});
    const double* xp = ctx.x.data();
    const double* wp = ctx.w.data();
    const double* up = upstream.data();
    double* dxp = grads.dx.data();
    double* dwp = grads.dw.data();
    double* dbp = grads.db.data();

    for (std::int64_t r = 0; r < m; ++r) {
        const double* urow = up + r * n;
        const double* xrow = xp + r * k;
        double* dxrow = dxp + r * k;
        for (std::int64_t j = 0; j < n; ++j) dbp[j] += urow[j];
        for (std::int64_t i = 0; i < k; ++i) {
            const double* wrow = wp + i * n;
            double* dwrow = dwp + i * n;
            double acc = 0.0;
            for (std::int64_t j = 0; j < n; ++j) {
                acc += urow[j] * wrow[j];
                dwrow[j] += xrow[i] * urow[j];
            }
            dxrow[i] = acc;
        }
    }
    return grads;
}

Tensor relu(const Tensor& x, ReluCtx* ctx) {
    Tensor out(x.shape());
    const double* xp = x.data();
    double* op = out.data();
    for (std::int64_t i = 0; i < x.size(); ++i) op[i] = xp[i] > 0.0 ? xp[i] : 0.0;
    if (ctx != nullptr) {
        ctx->x = x;
        ctx->consumed = false;
    }
    return out;
}

Tensor relu_vjp(ReluCtx& ctx, const Tensor& upstream) {
    consume_ctx(ctx.consumed, ctx.x.shape(), upstream, "relu_vjp");
    Tensor dx(ctx.x.shape());
    const double* xp = ctx.x.data();
    const double* up = upstream.data();
    double* dp = dx.data();
    for (std::int64_t i = 0; i < dx.size(); ++i) dp[i] = xp[i] > 0.0 ? up[i] : 0.0;
    return dx;
}

Tensor sigmoid(const Tensor& x, SigmoidCtx* ctx) {
    Tensor out(x.shape());
    const double* xp = x.data();
    double* op = out.data();
    for (std::int64_t i = 0; i < x.size(); ++i) {
        const double v = xp[i];
        if (v >= 0.0) {
            op[i] = 1.0 / (1.0 + std::exp(-v));
        } else {
            const double e = std::exp(v);
            op[i] = e / (1.0 + e);
        }
    }
    if (ctx != nullptr) {
        ctx->y = out;
        ctx->consumed = false;
    }
    return out;
}

Tensor sigmoid_vjp(SigmoidCtx& ctx, const Tensor& upstream) {
    consume_ctx(ctx.consumed, ctx.y.shape(), upstream, "sigmoid_vjp");
    Tensor dx(ctx.y.shape());
    const double* yp = ctx.y.data();
    const double* up = upstream.data();
    double* dp = dx.data();
    for (std::int64_t i = 0; i < dx.size(); ++i) dp[i] = up[i] * yp[i] * (1.0 - yp[i]);
    return dx;
}

Tensor softmax(const Tensor& x, int axis, SoftmaxCtx* ctx) {
    const int rank = x.rank();
    const int a = axis < 0 ? rank + axis : axis;
    if (a < 0 || a >= rank) {
        throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(x.shape()));
    }
    const std::int64_t e = x.extent(a);
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < a; ++i) outer *= x.extent(i);
    for (int i = a + 1; i < rank; ++i) inner *= x.extent(i);

    Tensor out(x.shape());
    const double* xp = x.data();
    double* op = out.data();
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t i = 0; i < inner; ++i) {
            const std::int64_t base = o * e * inner + i;
            double mx = xp[base];
            for (std::int64_t k = 1; k < e; ++k) mx = std::max(mx, xp[base + k * inner]);
            double sum = 0.0;
            for (std::int64_t k = 0; k < e; ++k) {
                const double v = std::exp(xp[base + k * inner] - mx);
                op[base + k * inner] = v;
                sum += v;
            }
            for (std::int64_t k = 0; k < e; ++k) op[base + k * inner] /= sum;
        }
    }
    if (ctx != nullptr) {
        ctx->y = out;
        ctx->axis = a;
        ctx->consumed = false;
    }
    return out;
}

Tensor softmax_vjp(SoftmaxCtx& ctx, const Tensor& upstream) {
    consume_ctx(ctx.consumed, ctx.y.shape(), upstream, "softmax_vjp");
    const Tensor& y = ctx.y;
    const int a = ctx.axis;
    const std::int64_t e = y.extent(a);
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < a; ++i) outer *= y.extent(i);
    for (int i = a + 1; i < y.rank(); ++i) inner *= y.extent(i);

    Tensor dx(y.shape());
    const double* yp = y.data();
    const double* up = upstream.data();
    double* dp = dx.data();
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t i = 0; i < inner; ++i) {
            const std::int64_t base = o * e * inner + i;
            double dot = 0.0;
            for (std::int64_t k = 0; k < e; ++k) dot += up[base + k * inner] * yp[base + k * inner];
            for (std::int64_t k = 0; k < e; ++k) {
                const std::int64_t idx = base + k * inner;
                dp[idx] = yp[idx] * (up[idx] - dot);
            }
        }
    }
    return dx;
}

} // namespace dcnet::ops
