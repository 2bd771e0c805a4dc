#include "dcnet/gradcheck.hpp"

#include <cmath>
#include <string>
#include <vector>

#include "dcnet/model.hpp"
#include "dcnet/ops.hpp"
#include "dcnet/trainer.hpp"

namespace dcnet::gradcheck {

namespace {

double dot(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (std::int64_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

// Uniform draw that stays away from the kink of piecewise activations.
Tensor uniform_off_zero(Rng& rng, Shape shape, double margin = 0.1) {
    Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < t.size(); ++i) {
        const double mag = rng.uniform(margin, 1.5);
        t[i] = rng.below(2) == 0 ? mag : -mag;
    }
    return t;
}

constexpr double kOpTol = 1e-4;

} // namespace

Tensor fd_gradient(const std::function<double(const Tensor&)>& f, Tensor x, double eps) {
    Tensor g(x.shape());
    for (std::int64_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + eps;
        const double fp = f(x);
        x[i] = orig - eps;
        const double fm = f(x);
        x[i] = orig;
        g[i] = (fp - fm) / (2.0 * eps);
    }
    return g;
}

double max_rel_err(const Tensor& analytic, const Tensor& fd) {
    double m = 0.0;
    for (std::int64_t i = 0; i < analytic.size(); ++i) {
        const double a = analytic[i], f = fd[i];
        const double denom = std::max({std::abs(a), std::abs(f), 1e-6});
        m = std::max(m, std::abs(a - f) / denom);
    }
    return m;
}

std::vector<CheckResult> check_ops(std::uint64_t seed) {
    using namespace ops;
    std::vector<CheckResult> results;
    Rng rng(seed);

    auto push = [&results](const std::string& name, const Tensor& analytic, const Tensor& fd) {
        results.push_back({name, max_rel_err(analytic, fd), kOpTol});
    };

    // conv2d over the model's dilation rates and both paddings, with bias.
    for (int r : {1, 2, 4, 6}) {
        for (Padding pad : {Padding::same, Padding::valid}) {
            const ConvSpec spec{.dilation = r, .padding = pad, .bias = true};
            Tensor x = Tensor::uniform(rng, {20, 1, 2}, -1.0, 1.0);
            Tensor w = Tensor::uniform(rng, {3, 1, 2, 2}, -1.0, 1.0);
            Tensor b = Tensor::uniform(rng, {2}, -0.5, 0.5);
            Conv2dCtx ctx;
            Tensor out = conv2d(x, w, &b, spec, &ctx);
            Tensor c = Tensor::uniform(rng, out.shape(), -1.0, 1.0);
            ConvGrads g = conv2d_vjp(ctx, c);

            const std::string tag = "conv2d[r=" + std::to_string(r) +
                                    (pad == Padding::same ? ",same]" : ",valid]");
            push(tag + "/dx", g.dx,
                 fd_gradient([&](const Tensor& v) { return dot(c, conv2d(v, w, &b, spec)); }, x));
            push(tag + "/dw", g.dw,
                 fd_gradient([&](const Tensor& v) { return dot(c, conv2d(x, v, &b, spec)); }, w));
            push(tag + "/db", g.db,
                 fd_gradient([&](const Tensor& v) { return dot(c, conv2d(x, w, &v, spec)); }, b));
        }
    }

    // depthwise_conv2d: dilated temporal kernel and an electrode-collapsing kernel.
    {
        const ConvSpec spec{.dilation = 2, .padding = Padding::same, .bias = false};
        Tensor x = Tensor::uniform(rng, {10, 2, 2}, -1.0, 1.0);
        Tensor w = Tensor::uniform(rng, {3, 1, 2, 2}, -1.0, 1.0);
        DepthwiseCtx ctx;
        Tensor out = depthwise_conv2d(x, w, nullptr, spec, &ctx);
        Tensor c = Tensor::uniform(rng, out.shape(), -1.0, 1.0);
        ConvGrads g = depthwise_conv2d_vjp(ctx, c);
        push("depthwise[r=2,same]/dx", g.dx,
             fd_gradient([&](const Tensor& v) { return dot(c, depthwise_conv2d(v, w, nullptr, spec)); }, x));
        push("depthwise[r=2,same]/dw", g.dw,
             fd_gradient([&](const Tensor& v) { return dot(c, depthwise_conv2d(x, v, nullptr, spec)); }, w));
    }
    {
        const ConvSpec spec{.dilation = 1, .padding = Padding::valid, .bias = false};
        Tensor x = Tensor::uniform(rng, {6, 3, 2}, -1.0, 1.0);
        Tensor w = Tensor::uniform(rng, {1, 3, 2, 2}, -1.0, 1.0);
        DepthwiseCtx ctx;
        Tensor out = depthwise_conv2d(x, w, nullptr, spec, &ctx);
        Tensor c = Tensor::uniform(rng, out.shape(), -1.0, 1.0);
        ConvGrads g = depthwise_conv2d_vjp(ctx, c);
        push("depthwise[width,valid]/dx", g.dx,
             fd_gradient([&](const Tensor& v) { return dot(c, depthwise_conv2d(v, w, nullptr, spec)); }, x));
        push("depthwise[width,valid]/dw", g.dw,
             fd_gradient([&](const Tensor& v) { return dot(c, depthwise_conv2d(x, v, nullptr, spec)); }, w));
    }

    // batch_norm, training mode: gradient flows through the batch statistics.
    {
        Tensor x = Tensor::uniform(rng, {6, 3}, -1.0, 1.0);
        Tensor gamma = Tensor::uniform(rng, {3}, 0.5, 1.5);
        Tensor beta = Tensor::uniform(rng, {3}, -0.5, 0.5);
        BnState state;
        BatchNormCtx ctx;
        Tensor out = batch_norm(x, gamma, beta, state, true, 0.9, 1e-5, &ctx);
        Tensor c = Tensor::uniform(rng, out.shape(), -1.0, 1.0);
        BatchNormGrads g = batch_norm_vjp(ctx, c);
        auto run = [&](const Tensor& xv, const Tensor& gv, const Tensor& bv) {
            BnState fresh;
            return dot(c, batch_norm(xv, gv, bv, fresh, true, 0.9, 1e-5));
        };
        push("batch_norm[train]/dx", g.dx,
             fd_gradient([&](const Tensor& v) { return run(v, gamma, beta); }, x));
        push("batch_norm[train]/dgamma", g.dgamma,
             fd_gradient([&](const Tensor& v) { return run(x, v, beta); }, gamma));
        push("batch_norm[train]/dbeta", g.dbeta,
             fd_gradient([&](const Tensor& v) { return run(x, gamma, v); }, beta));
    }

    // elu (inputs kept away from the origin where FD is ill-conditioned).
    {
        Tensor x = uniform_off_zero(rng, {4, 3});
        EluCtx ctx;
        Tensor out = elu(x, 1.0, &ctx);
        Tensor c = Tensor::uniform(rng, out.shape(), -1.0, 1.0);
        Tensor g = elu_vjp(ctx, c);
        push("elu/dx", g,
             fd_gradient([&](const Tensor& v) { return dot(c, elu(v, 1.0)); }, x));
    }

    // relu
    {
        Tensor x = uniform_off_zero(rng, {4, 3});
        ReluCtx ctx;
        Tensor out = relu(x, &ctx);
        Tensor c = Tensor::uniform(rng, out.shape(), -1.0, 1.0);
        Tensor g = relu_vjp(ctx, c);
        push("relu/dx", g, fd_gradient([&](const Tensor& v) { return dot(c, relu(v)); }, x));
    }

    // avg_pool with a discarded remainder row.
    {
        Tensor x = Tensor::uniform(rng, {9, 2, 2}, -1.0, 1.0);
        AvgPoolCtx ctx;
        Tensor out = avg_pool(x, 4, &ctx);
        Tensor c = Tensor::uniform(rng, out.shape(), -1.0, 1.0);
        Tensor g = avg_pool_vjp(ctx, c);
        push("avg_pool[p=4]/dx", g,
             fd_gradient([&](const Tensor& v) { return dot(c, avg_pool(v, 4)); }, x));
    }

    // dropout with the mask pinned by a fixed seed.
    {
        Tensor x = Tensor::uniform(rng, {5, 4}, -1.0, 1.0);
        const double p = 0.4;
        Rng mask_rng(12345);
        DropoutCtx ctx;
        Tensor out = dropout(x, p, true, &mask_rng, &ctx);
        Tensor c = Tensor::uniform(rng, out.shape(), -1.0, 1.0);
        Tensor g = dropout_vjp(ctx, c);
        push("dropout[p=0.4]/dx", g, fd_gradient(
                                         [&](const Tensor& v) {
                                             Rng r(12345);
                                             return dot(c, dropout(v, p, true, &r));
                                         },
                                         x));
    }

    // dense
    {
        Tensor x = Tensor::uniform(rng, {4, 3}, -1.0, 1.0);
        Tensor w = Tensor::uniform(rng, {3, 5}, -1.0, 1.0);
        Tensor b = Tensor::uniform(rng, {5}, -0.5, 0.5);
        DenseCtx ctx;
        Tensor out = dense(x, w, b, &ctx);
        Tensor c = Tensor::uniform(rng, out.shape(), -1.0, 1.0);
        DenseGrads g = dense_vjp(ctx, c);
        push("dense/dx", g.dx,
             fd_gradient([&](const Tensor& v) { return dot(c, dense(v, w, b)); }, x));
        push("dense/dw", g.dw,
             fd_gradient([&](const Tensor& v) { return dot(c, dense(x, v, b)); }, w));
        push("dense/db", g.db,
             fd_gradient([&](const Tensor& v) { return dot(c, dense(x, w, v)); }, b));
    }

    // sigmoid
    {
        Tensor x = Tensor::uniform(rng, {3, 4}, -2.0, 2.0);
        SigmoidCtx ctx;
        Tensor out = sigmoid(x, &ctx);
        Tensor c = Tensor::uniform(rng, out.shape(), -1.0, 1.0);
        Tensor g = sigmoid_vjp(ctx, c);
        push("sigmoid/dx", g, fd_gradient([&](const Tensor& v) { return dot(c, sigmoid(v)); }, x));
    }

    // softmax composed with a cross-entropy-style loss, its use in the model.
    {
        Tensor x = Tensor::uniform(rng, {5, 4}, -2.0, 2.0);
        Tensor t({5, 4});
        for (std::int64_t row = 0; row < 5; ++row) {
            double s = 0.0;
            for (std::int64_t k = 0; k < 4; ++k) {
                t.at({row, k}) = rng.uniform(0.1, 1.0);
                s += t.at({row, k});
            }
            for (std::int64_t k = 0; k < 4; ++k) t.at({row, k}) /= s;
        }
        auto loss = [&t](const Tensor& y) {
            double l = 0.0;
            for (std::int64_t i = 0; i < y.size(); ++i) l -= t[i] * std::log(y[i]);
            return l;
        };
        SoftmaxCtx ctx;
        Tensor y = softmax(x, 1, &ctx);
        Tensor up(y.shape());
        for (std::int64_t i = 0; i < y.size(); ++i) up[i] = -t[i] / y[i];
        Tensor g = softmax_vjp(ctx, up);
        push("softmax+loss/dx", g,
             fd_gradient([&](const Tensor& v) { return loss(softmax(v, 1)); }, x));
    }

    return results;
}

std::vector<CheckResult> check_model(std::uint64_t seed) {
    // Small but structurally complete: every block enabled, dropout off
    // so the loss is a deterministic function of parameters and input.
    model::ModelConfig cfg;
    cfg.channels = 3;
    cfg.samples = 64;
    cfg.n_classes = 2;
    cfg.f1 = 2;
    cfg.depth_mult = 2;
    cfg.temporal_kernel = 8;
    cfg.pool1 = 8;
    cfg.dilations = {1, 2, 3};
    cfg.atrous_kernel = 4;
    cfg.fuse_width = 8;
    cfg.n_windows = 2;
    cfg.se_reduction = 2;
    cfg.dropout_p = 0.0;

    Rng rng(seed);
    model::ModelParams params = model::init_model(cfg, rng);
    Tensor batch = Tensor::uniform(rng, {2, cfg.channels, cfg.samples}, -1.0, 1.0);
    const std::vector<int> labels = {0, 1};

    auto run_loss = [&]() {
        model::ForwardTrace trace = model::model_forward(batch, params, cfg, true, nullptr);
        return trainer::loss(trace.probs, labels);
    };

    model::ForwardTrace trace = model::model_forward(batch, params, cfg, true, nullptr);
    model::ModelGrads grads = model::model_backward(trace, labels);
    std::vector<Tensor*> analytic = grads.ordered();
    auto named = model::named_params(params);

    const double tolerance = 1e-3;
    std::vector<CheckResult> results;
    for (std::size_t i = 0; i < named.size(); ++i) {
        Tensor* slot = named[i].tensor;
        const Tensor saved = *slot;
        Tensor fd = fd_gradient(
            [&](const Tensor& v) {
                *slot = v;
                return run_loss();
            },
            saved);
        *slot = saved;
        results.push_back({"model/" + named[i].name, max_rel_err(*analytic[i], fd), tolerance});
    }
    {
        const Tensor saved = batch;
        Tensor fd = fd_gradient(
            [&](const Tensor& v) {
                batch = v;
                return run_loss();
            },
            saved);
        batch = saved;
        results.push_back({"model/input", max_rel_err(grads.input, fd), tolerance});
    }
    return results;
}

} // namespace dcnet::gradcheck
