#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dcnet/errors.hpp"
#include "dcnet/gradcheck.hpp"
#include "dcnet/model.hpp"
#include "dcnet/trainer.hpp"

using namespace dcnet;
using namespace dcnet::model;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.channels = 3;
    c.samples = 64;
    c.n_classes = 2;
    c.f1 = 2;
    c.depth_mult = 2;
    c.temporal_kernel = 8;
    c.pool1 = 8;
    c.dilations = {1, 2, 3};
    c.atrous_kernel = 4;
    c.fuse_width = 8;
    c.n_windows = 2;
    c.se_reduction = 2;
    c.dropout_p = 0.0;
    return c;
}

double elu_scalar(double v) { return v > 0.0 ? v : std::expm1(v); }

bool tensors_equal(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    for (std::int64_t i = 0; i < a.size(); ++i) {
        if (a[i] != b[i]) return false;
    }
    return true;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.same_shape(b));
    double m = 0.0;
    for (std::int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

double grad_norm(ModelGrads& g) {
    double s = 0.0;
    for (Tensor* t : g.ordered()) {
        for (std::int64_t i = 0; i < t->size(); ++i) s += (*t)[i] * (*t)[i];
    }
    return std::sqrt(s);
}

std::filesystem::path temp_file(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "dcnet_model_tests";
    std::filesystem::create_directories(dir);
    return dir / name;
}

} // namespace

TEST_SUITE("model") {

TEST_CASE("config validation names the offending field") {
    ModelConfig c;
    CHECK_NOTHROW(c.validate());

    auto expect_bad = [](ModelConfig bad, const char* needle) {
        try {
            bad.validate();
            FAIL_CHECK("expected ConfigError for ", needle);
        } catch (const ConfigError& e) {
            CHECK(std::string(e.what()).find(needle) != std::string::npos);
        }
    };
    { ModelConfig b = c; b.channels = 0; expect_bad(b, "channels"); }
    { ModelConfig b = c; b.samples = 0; expect_bad(b, "samples"); }
    { ModelConfig b = c; b.n_classes = 1; expect_bad(b, "n_classes"); }
    { ModelConfig b = c; b.f1 = 0; expect_bad(b, "f1"); }
    { ModelConfig b = c; b.depth_mult = 0; expect_bad(b, "depth_mult"); }
    { ModelConfig b = c; b.temporal_kernel = 0; expect_bad(b, "temporal_kernel"); }
    { ModelConfig b = c; b.pool1 = 0; expect_bad(b, "pool1"); }
    { ModelConfig b = c; b.pool1 = b.samples + 1; expect_bad(b, "pool1"); }
    { ModelConfig b = c; b.dilations = {}; expect_bad(b, "dilations"); }
    { ModelConfig b = c; b.dilations = {2, 0}; expect_bad(b, "dilations"); }
    { ModelConfig b = c; b.atrous_kernel = 0; expect_bad(b, "atrous_kernel"); }
    { ModelConfig b = c; b.fuse_width = 0; expect_bad(b, "fuse_width"); }
    { ModelConfig b = c; b.n_windows = 0; expect_bad(b, "n_windows"); }
    { ModelConfig b = c; b.n_windows = b.fuse_width + 1; expect_bad(b, "n_windows"); }
    { ModelConfig b = c; b.se_reduction = 0; expect_bad(b, "se_reduction"); }
    { ModelConfig b = c; b.se_reduction = 3; expect_bad(b, "se_reduction"); } // 16 % 3 != 0
    { ModelConfig b = c; b.dropout_p = 1.0; expect_bad(b, "dropout_p"); }
    { ModelConfig b = c; b.dropout_p = -0.1; expect_bad(b, "dropout_p"); }
}

TEST_CASE("config text round trip is exact") {
    ModelConfig c;
    c.channels = 5;
    c.samples = 200;
    c.n_classes = 3;
    c.f1 = 4;
    c.depth_mult = 3;
    c.temporal_kernel = 16;
    c.pool1 = 4;
    c.dilations = {1, 5};
    c.atrous_kernel = 3;
    c.fuse_width = 10;
    c.n_windows = 4;
    c.se_reduction = 6;
    c.dropout_p = 0.1;
    c.enable_sp = false;
    c.enable_sw = false;
    c.enable_at = true;

    ModelConfig back = config_from_text(config_to_text(c));
    CHECK(back.channels == c.channels);
    CHECK(back.samples == c.samples);
    CHECK(back.n_classes == c.n_classes);
    CHECK(back.f1 == c.f1);
    CHECK(back.depth_mult == c.depth_mult);
    CHECK(back.temporal_kernel == c.temporal_kernel);
    CHECK(back.pool1 == c.pool1);
    CHECK(back.dilations == c.dilations);
    CHECK(back.atrous_kernel == c.atrous_kernel);
    CHECK(back.fuse_width == c.fuse_width);
    CHECK(back.n_windows == c.n_windows);
    CHECK(back.se_reduction == c.se_reduction);
    CHECK(back.dropout_p == c.dropout_p); // bit-exact via %.17g
    CHECK(back.enable_sp == c.enable_sp);
    CHECK(back.enable_sw == c.enable_sw);
    CHECK(back.enable_at == c.enable_at);

    SUBCASE("absent keys keep defaults") {
        ModelConfig d = config_from_text("f1=4\n\n# comment\npool1=5\n");
        CHECK(d.f1 == 4);
        CHECK(d.pool1 == 5);
        CHECK(d.channels == 22);
        CHECK(d.n_windows == 6);
        CHECK(d.enable_sp);
    }
    SUBCASE("later duplicates win") {
        ModelConfig d = config_from_text("f1=4\nf1=2\n");
        CHECK(d.f1 == 2);
    }
    SUBCASE("rejects malformed input") {
        CHECK_THROWS_AS(config_from_text("unknown_key=1\n"), ConfigError);
        CHECK_THROWS_AS(config_from_text("f1=abc\n"), ConfigError);
        CHECK_THROWS_AS(config_from_text("enable_sp=maybe\n"), ConfigError);
        CHECK_THROWS_AS(config_from_text("just a line\n"), ConfigError);
        CHECK_THROWS_AS(config_from_text("dropout_p=0.5extra\n"), ConfigError);
        CHECK_THROWS_AS(config_from_text("f1=0\n"), ConfigError); // fails validation
    }
}

TEST_CASE("parameter inventory matches the config arithmetic") {
    ModelConfig c;
    CHECK(param_count(c) == 21064);
    CHECK(param_count(c) >= 20000);
    CHECK(param_count(c) <= 37000);

    // per-block subtotals, derived by hand from the shape rules
    auto shapes = param_shapes(c);
    std::int64_t cv = 0, sp = 0, se = 0, dense = 0;
    for (const auto& [name, shape] : shapes) {
        const std::int64_t n = shape_size(shape);
        if (name.starts_with("cv.")) cv += n;
        else if (name.starts_with("sp.")) sp += n;
        else if (name.starts_with("head.se.")) se += n;
        else dense += n;
    }
    CHECK(cv == 1072);    // 512 + 16 + 128 + 32 + 352 + 32
    CHECK(sp == 19776);   // 3*(2048+32) + 13440 + 32 + 64
    CHECK(se == 148);     // 64 + 4 + 64 + 16
    CHECK(dense == 68);   // 64 + 4

    SUBCASE("named params mirror param_shapes one to one") {
        Rng rng(11);
        ModelParams p = init_model(c, rng);
        auto named = named_params(p);
        REQUIRE(named.size() == shapes.size());
        for (std::size_t i = 0; i < named.size(); ++i) {
            CHECK(named[i].name == shapes[i].first);
            CHECK(named[i].tensor->shape() == shapes[i].second);
        }
    }
    SUBCASE("ablation flags change which parameters exist") {
        ModelConfig no_sp = c;
        no_sp.enable_sp = false;
        // branches gone, fusion input shrinks from 3*140 to 140 channels
        CHECK(param_count(no_sp) == 21064 - 3 * (2048 + 32) - (420 - 140) * 32);
        ModelConfig no_at = c;
        no_at.enable_at = false;
        CHECK(param_count(no_at) == 21064 - 148);
        ModelConfig bare = c;
        bare.enable_sp = false;
        bare.enable_at = false;
        CHECK(param_count(bare) == 5716);
        Rng rng(3);
        ModelParams p = init_model(bare, rng);
        CHECK(p.sp_branches.empty());
        CHECK(p.se_w1.empty());
        std::int64_t total = 0;
        for (auto& nt : named_params(p)) total += nt.tensor->size();
        CHECK(total == 5716);
    }
}

TEST_CASE("init_model is deterministic and bounded") {
    ModelConfig c;
    Rng a(99), b(99), d(100);
    ModelParams pa = init_model(c, a);
    ModelParams pb = init_model(c, b);
    ModelParams pd = init_model(c, d);
    auto na = named_params(pa), nb = named_params(pb), nd = named_params(pd);
    bool all_equal = true, any_differs_across_seeds = false;
    for (std::size_t i = 0; i < na.size(); ++i) {
        if (!tensors_equal(*na[i].tensor, *nb[i].tensor)) all_equal = false;
        if (!tensors_equal(*na[i].tensor, *nd[i].tensor)) any_differs_across_seeds = true;
    }
    CHECK(all_equal);
    CHECK(any_differs_across_seeds);

    // BN init: gamma 1, beta 0, running mean 0, running var 1
    for (std::int64_t i = 0; i < pa.cv_bn1.gamma.size(); ++i) {
        CHECK(pa.cv_bn1.gamma[i] == 1.0);
        CHECK(pa.cv_bn1.beta[i] == 0.0);
        CHECK(pa.cv_bn1.state.running_mean[i] == 0.0);
        CHECK(pa.cv_bn1.state.running_var[i] == 1.0);
    }
    // biases start at zero
    for (std::int64_t i = 0; i < pa.dense_b.size(); ++i) CHECK(pa.dense_b[i] == 0.0);
    for (std::int64_t i = 0; i < pa.sp_fuse_b.size(); ++i) CHECK(pa.sp_fuse_b[i] == 0.0);

    // Glorot bounds: conv1 fans are (64*1, 64*8), dense fans (16, 4)
    const double conv1_bound = std::sqrt(6.0 / (64.0 + 512.0));
    const double dense_bound = std::sqrt(6.0 / (16.0 + 4.0));
    double conv1_max = 0.0, dense_max = 0.0;
    for (std::int64_t i = 0; i < pa.cv_conv1_w.size(); ++i)
        conv1_max = std::max(conv1_max, std::abs(pa.cv_conv1_w[i]));
    for (std::int64_t i = 0; i < pa.dense_w.size(); ++i)
        dense_max = std::max(dense_max, std::abs(pa.dense_w[i]));
    CHECK(conv1_max <= conv1_bound);
    CHECK(conv1_max > 0.5 * conv1_bound); // 512 draws should come close to the bound
    CHECK(dense_max <= dense_bound);
}

TEST_CASE("cv_block reproduces the published shape row") {
    ModelConfig c;
    Rng rng(7);
    ModelParams p = init_model(c, rng);
    Tensor x = Tensor::uniform(rng, {1125, 22, 1}, -1.0, 1.0);
    Tensor out = cv_block(x, p, c, false, nullptr);
    CHECK(out.shape() == Shape{140, 1, 16});

    SUBCASE("zero input stays zero through conv, BN, ELU") {
        Tensor zero({1125, 22, 1});
        Tensor eval_out = cv_block(zero, p, c, false, nullptr);
        for (std::int64_t i = 0; i < eval_out.size(); ++i) CHECK(eval_out[i] == 0.0);
        Rng drop_rng(5);
        ModelParams fresh = init_model(c, rng);
        Tensor train_out = cv_block(zero, fresh, c, true, &drop_rng);
        for (std::int64_t i = 0; i < train_out.size(); ++i) CHECK(train_out[i] == 0.0);
    }
    SUBCASE("eval mode treats batched trials independently") {
        Tensor two = Tensor::uniform(rng, {2, 1125, 22, 1}, -1.0, 1.0);
        Tensor batched = cv_block(two, p, c, false, nullptr);
        Tensor first = cv_block(two.slice_axis(0, 0, 1).reshape({1125, 22, 1}), p, c, false,
                                nullptr);
        CHECK(batched.shape() == Shape{2, 140, 1, 16});
        CHECK(tensors_equal(batched.slice_axis(0, 0, 1).reshape({140, 1, 16}), first));
    }
    SUBCASE("wrong input shape is rejected") {
        CHECK_THROWS_AS(cv_block(Tensor({22, 1125, 1}), p, c, false, nullptr), ShapeError);
    }
}

TEST_CASE("sp_block fuses the atrous branches") {
    ModelConfig c;
    Rng rng(13);
    ModelParams p = init_model(c, rng);
    Tensor x = Tensor::uniform(rng, {140, 1, 16}, -1.0, 1.0);
    SpTrace tr;
    Tensor out = sp_block(x, p, c, false, nullptr, &tr);
    CHECK(out.shape() == Shape{1, 16, 32});
    // the fusion conv consumed the time-axis concat of 3 branches
    CHECK(tr.fuse.x.shape() == Shape{1, 16, 420});
    CHECK(tr.concat_parts == 3);

    SUBCASE("zeroed kernels leave only the fusion bias") {
        ModelParams zp = init_model(c, rng);
        for (auto& b : zp.sp_branches) b.w = Tensor(b.w.shape());
        zp.sp_fuse_w = Tensor(zp.sp_fuse_w.shape());
        Rng brng(21);
        zp.sp_fuse_b = Tensor::uniform(brng, {32}, -1.0, 1.0);
        // eval: BN maps b to b/sqrt(1+eps) with fresh running stats
        Tensor eo = sp_block(x, zp, c, false, nullptr);
        for (std::int64_t i = 0; i < 16; ++i) {
            for (std::int64_t j = 0; j < 32; ++j) {
                const double expected = elu_scalar(zp.sp_fuse_b[j] / std::sqrt(1.0 + 1e-5));
                CHECK(std::abs(eo.at({0, i, j}) - expected) <= 1e-12);
            }
        }
        // training: BN of a per-channel constant collapses to beta = 0, up to
        // the mean-cancellation residue amplified by 1/sqrt(var + eps)
        Rng drng(3);
        Tensor to = sp_block(x, zp, c, true, &drng);
        for (std::int64_t i = 0; i < to.size(); ++i) CHECK(std::abs(to[i]) <= 1e-9);
    }
    SUBCASE("bypass keeps the fusion layer on the CV output") {
        ModelConfig nc = c;
        nc.enable_sp = false;
        Rng r2(17);
        ModelParams np = init_model(nc, r2);
        SpTrace bt;
        Tensor bo = sp_block(x, np, nc, false, nullptr, &bt);
        CHECK(bo.shape() == Shape{1, 16, 32});
        CHECK(bt.fuse.x.shape() == Shape{1, 16, 140});
        CHECK(bt.branches.empty());
        CHECK(np.sp_fuse_w.shape() == Shape{1, 1, 140, 32});
    }
    SUBCASE("wrong input shape is rejected") {
        CHECK_THROWS_AS(sp_block(Tensor({141, 1, 16}), p, c, false, nullptr), ShapeError);
    }
}

TEST_CASE("sliding windows slice per the worked example") {
    // fuse_width=5, n=3: windows cover rows [1..3], [2..4], [3..5]
    Tensor x({5, 2});
    for (std::int64_t i = 0; i < 5; ++i) {
        x.at({i, 0}) = static_cast<double>(i + 1);
        x.at({i, 1}) = 10.0 * static_cast<double>(i + 1);
    }
    auto wins = sliding_windows(x, 3);
    REQUIRE(wins.size() == 3);
    for (std::size_t w = 0; w < 3; ++w) {
        CHECK(wins[w].shape() == Shape{3, 2});
        for (std::int64_t t = 0; t < 3; ++t) {
            CHECK(wins[w].at({t, 0}) == static_cast<double>(w + 1 + t));
        }
    }
    auto one = sliding_windows(x, 1);
    REQUIRE(one.size() == 1);
    CHECK(tensors_equal(one[0], x));
    auto all = sliding_windows(x, 5);
    CHECK(all.size() == 5);
    CHECK(all[4].shape() == Shape{1, 2});
    CHECK(all[4].at({0, 1}) == 50.0);
    CHECK_THROWS_AS(sliding_windows(x, 0), UsageError);
    CHECK_THROWS_AS(sliding_windows(x, 6), UsageError);
    CHECK_THROWS_AS(sliding_windows(Tensor({5}), 2), ShapeError);
}

TEST_CASE("se_block matches a straight-line oracle") {
    Rng rng(31);
    auto oracle = [](const Tensor& x, const Tensor& w1, const Tensor& b1, const Tensor& w2,
                     const Tensor& b2) {
        const int r = x.rank();
        const std::int64_t f2 = x.extent(r - 1);
        const std::int64_t tw = x.extent(r - 2);
        const std::int64_t lead = x.size() / (tw * f2);
        const std::int64_t hidden = w1.extent(1);
        Tensor out(x.shape());
        for (std::int64_t l = 0; l < lead; ++l) {
            std::vector<double> z(static_cast<std::size_t>(f2), 0.0);
            for (std::int64_t t = 0; t < tw; ++t)
                for (std::int64_t cc = 0; cc < f2; ++cc)
                    z[static_cast<std::size_t>(cc)] += x[(l * tw + t) * f2 + cc];
            for (auto& v : z) v /= static_cast<double>(tw);
            std::vector<double> h(static_cast<std::size_t>(hidden), 0.0);
            for (std::int64_t j = 0; j < hidden; ++j) {
                double s = b1[j];
                for (std::int64_t cc = 0; cc < f2; ++cc)
                    s += z[static_cast<std::size_t>(cc)] * w1.at({cc, j});
                h[static_cast<std::size_t>(j)] = std::max(0.0, s);
            }
            for (std::int64_t cc = 0; cc < f2; ++cc) {
                double s = b2[cc];
                for (std::int64_t j = 0; j < hidden; ++j)
                    s += h[static_cast<std::size_t>(j)] * w2.at({j, cc});
                const double gate = 1.0 / (1.0 + std::exp(-s));
                for (std::int64_t t = 0; t < tw; ++t)
                    out[(l * tw + t) * f2 + cc] = x[(l * tw + t) * f2 + cc] * gate;
            }
        }
        return out;
    };

    for (Shape shape : {Shape{7, 6}, Shape{2, 5, 4}}) {
        const std::int64_t f2 = shape[shape.size() - 1];
        const std::int64_t hidden = f2 / 2;
        Tensor x = Tensor::uniform(rng, shape, -2.0, 2.0);
        Tensor w1 = Tensor::uniform(rng, {f2, hidden}, -1.0, 1.0);
        Tensor b1 = Tensor::uniform(rng, {hidden}, -0.5, 0.5);
        Tensor w2 = Tensor::uniform(rng, {hidden, f2}, -1.0, 1.0);
        Tensor b2 = Tensor::uniform(rng, {f2}, -0.5, 0.5);
        SeCtx ctx;
        Tensor got = se_block(x, w1, b1, w2, b2, &ctx);
        Tensor want = oracle(x, w1, b1, w2, b2);
        CHECK(max_abs_diff(got, want) <= 1e-12);
        // gates strictly inside (0,1)
        for (std::int64_t i = 0; i < ctx.scale.size(); ++i) {
            CHECK(ctx.scale[i] > 0.0);
            CHECK(ctx.scale[i] < 1.0);
        }
    }

    SUBCASE("zero excitation weights halve the input") {
        Tensor x = Tensor::uniform(rng, {4, 6}, -2.0, 2.0);
        Tensor w1 = Tensor::uniform(rng, {6, 3}, -1.0, 1.0);
        Tensor b1 = Tensor::uniform(rng, {3}, -0.5, 0.5);
        Tensor w2({3, 6}), b2({6});
        Tensor out = se_block(x, w1, b1, w2, b2);
        for (std::int64_t i = 0; i < x.size(); ++i) CHECK(out[i] == 0.5 * x[i]);
    }
    SUBCASE("zero input and zero biases give zero output") {
        Tensor x({4, 6});
        Tensor w1 = Tensor::uniform(rng, {6, 3}, -1.0, 1.0);
        Tensor w2 = Tensor::uniform(rng, {3, 6}, -1.0, 1.0);
        Tensor out = se_block(x, w1, Tensor({3}), w2, Tensor({6}));
        for (std::int64_t i = 0; i < out.size(); ++i) CHECK(out[i] == 0.0);
    }
}

TEST_CASE("se_block_vjp passes finite differences") {
    Rng rng(41);
    Tensor x = Tensor::uniform(rng, {3, 4}, -1.5, 1.5);
    Tensor w1 = Tensor::uniform(rng, {4, 2}, -1.0, 1.0);
    Tensor b1 = Tensor::uniform(rng, {2}, -0.5, 0.5);
    Tensor w2 = Tensor::uniform(rng, {2, 4}, -1.0, 1.0);
    Tensor b2 = Tensor::uniform(rng, {4}, -0.5, 0.5);
    Tensor c = Tensor::uniform(rng, {3, 4}, -1.0, 1.0);
    auto score = [&c](const Tensor& out) {
        double s = 0.0;
        for (std::int64_t i = 0; i < out.size(); ++i) s += c[i] * out[i];
        return s;
    };
    SeCtx ctx;
    Tensor out = se_block(x, w1, b1, w2, b2, &ctx);
    SeGrads g = se_block_vjp(ctx, c);

    using gradcheck::fd_gradient;
    using gradcheck::max_rel_err;
    auto fd_for = [&](Tensor* slot, const Tensor& base) {
        return fd_gradient(
            [&, slot](const Tensor& v) {
                *slot = v;
                const double s = score(se_block(x, w1, b1, w2, b2));
                return s;
            },
            base);
    };
    { Tensor base = x; CHECK(max_rel_err(g.dx, fd_for(&x, base)) <= 1e-4); x = base; }
    { Tensor base = w1; CHECK(max_rel_err(g.dw1, fd_for(&w1, base)) <= 1e-4); w1 = base; }
    { Tensor base = b1; CHECK(max_rel_err(g.db1, fd_for(&b1, base)) <= 1e-4); b1 = base; }
    { Tensor base = w2; CHECK(max_rel_err(g.dw2, fd_for(&w2, base)) <= 1e-4); w2 = base; }
    { Tensor base = b2; CHECK(max_rel_err(g.db2, fd_for(&b2, base)) <= 1e-4); b2 = base; }

    SUBCASE("context misuse is caught") {
        SeCtx c2;
        Tensor out2 = se_block(x, w1, b1, w2, b2, &c2);
        CHECK_THROWS_AS(se_block_vjp(c2, Tensor({4, 4})), ShapeError);
        se_block_vjp(c2, c);
        CHECK_THROWS_AS(se_block_vjp(c2, c), UsageError);
    }
}

TEST_CASE("model_forward averages window probabilities") {
    ModelConfig c;
    Rng rng(51);
    ModelParams p = init_model(c, rng);
    Tensor batch = Tensor::uniform(rng, {3, 22, 1125}, -1.0, 1.0);
    ForwardTrace tr = model_forward(batch, p, c, false, nullptr);
    CHECK(tr.probs.shape() == Shape{3, 4});
    REQUIRE(tr.windows.size() == 6);
    for (std::int64_t b = 0; b < 3; ++b) {
        double row = 0.0;
        for (std::int64_t k = 0; k < 4; ++k) {
            const double v = tr.probs.at({b, k});
            CHECK(v > 0.0);
            row += v;
            // convex combination of the per-window softmaxes
            double lo = 1.0, hi = 0.0, mean = 0.0;
            for (const auto& wt : tr.windows) {
                const double w = wt.probs.at({b, k});
                lo = std::min(lo, w);
                hi = std::max(hi, w);
                mean += w / 6.0;
            }
            CHECK(v >= lo - 1e-12);
            CHECK(v <= hi + 1e-12);
            CHECK(std::abs(v - mean) <= 1e-12);
        }
        CHECK(std::abs(row - 1.0) <= 1e-6);
    }
    SUBCASE("batch shape is checked") {
        CHECK_THROWS_AS(model_forward(Tensor({3, 1125, 22}), p, c, false, nullptr), ShapeError);
        CHECK_THROWS_AS(model_forward(Tensor({22, 1125}), p, c, false, nullptr), ShapeError);
    }
}

TEST_CASE("eval forward is pure and permutation-equivariant") {
    ModelConfig c;
    Rng rng(61);
    ModelParams p = init_model(c, rng);
    Tensor batch = Tensor::uniform(rng, {3, 22, 1125}, -1.0, 1.0);

    Tensor mean_before = p.cv_bn1.state.running_mean;
    ForwardTrace a = model_forward(batch, p, c, false, nullptr);
    ForwardTrace b = model_forward(batch, p, c, false, nullptr);
    CHECK(tensors_equal(a.probs, b.probs));
    CHECK(tensors_equal(p.cv_bn1.state.running_mean, mean_before));

    // rotate the trials: outputs rotate identically
    Tensor rotated = Tensor::concat(
        std::vector<Tensor>{batch.slice_axis(0, 2, 1), batch.slice_axis(0, 0, 2)}, 0);
    ForwardTrace r = model_forward(rotated, p, c, false, nullptr);
    CHECK(tensors_equal(r.probs.slice_axis(0, 0, 1), a.probs.slice_axis(0, 2, 1)));
    CHECK(tensors_equal(r.probs.slice_axis(0, 1, 2), a.probs.slice_axis(0, 0, 2)));

    SUBCASE("training mode moves the running statistics") {
        Rng drop_rng(1);
        model_forward(batch, p, c, true, &drop_rng);
        CHECK_FALSE(tensors_equal(p.cv_bn1.state.running_mean, mean_before));
    }
}

TEST_CASE("a single window means no averaging") {
    ModelConfig c = tiny_config();
    c.n_windows = 1;
    Rng rng(71);
    ModelParams p = init_model(c, rng);
    Tensor batch = Tensor::uniform(rng, {2, c.channels, c.samples}, -1.0, 1.0);
    ForwardTrace tr = model_forward(batch, p, c, false, nullptr);
    REQUIRE(tr.windows.size() == 1);
    CHECK(tensors_equal(tr.probs, tr.windows[0].probs));

    SUBCASE("enable_sw=false behaves as one full-width window") {
        ModelConfig sw = tiny_config();
        sw.enable_sw = false; // n_windows stays 2 but is ignored
        Rng r2(71);
        ModelParams p2 = init_model(sw, r2);
        ForwardTrace t2 = model_forward(batch, p2, sw, false, nullptr);
        REQUIRE(t2.windows.size() == 1);
        CHECK(sw.window_rows() == sw.fuse_width);
        CHECK(tensors_equal(t2.probs, t2.windows[0].probs));
    }
}

TEST_CASE("non-finite activations name the offending layer") {
    ModelConfig c = tiny_config();
    Rng rng(81);
    ModelParams p = init_model(c, rng);
    Tensor batch = Tensor::uniform(rng, {2, c.channels, c.samples}, -1.0, 1.0);

    auto expect_numeric = [&](ModelParams& bad, Tensor& input, const char* layer) {
        try {
            model_forward(input, bad, c, false, nullptr);
            FAIL_CHECK("expected NumericError naming ", layer);
        } catch (const NumericError& e) {
            CHECK(std::string(e.what()).find(layer) != std::string::npos);
        }
    };
    {
        ModelParams bad = p;
        bad.cv_conv1_w[0] = std::nan("");
        expect_numeric(bad, batch, "cv.conv1");
    }
    {
        ModelParams bad = p;
        bad.sp_branches[1].w[3] = std::nan("");
        expect_numeric(bad, batch, "sp.branch2.conv");
    }
    {
        ModelParams bad = p;
        bad.dense_w[0] = std::nan("");
        expect_numeric(bad, batch, "head.window1.dense");
    }
    {
        Tensor bad_input = batch;
        bad_input[5] = std::nan("");
        expect_numeric(p, bad_input, "input");
    }
}

TEST_CASE("ablation flags rewire the graph") {
    Rng rng(91);
    Tensor batch = Tensor::uniform(rng, {2, 3, 64}, -1.0, 1.0);

    ModelConfig full = tiny_config();
    Rng r1(5);
    ModelParams pf = init_model(full, r1);
    ForwardTrace tf = model_forward(batch, pf, full, false, nullptr);

    ModelConfig no_sp = tiny_config();
    no_sp.enable_sp = false;
    Rng r2(5);
    ModelParams ps = init_model(no_sp, r2);
    ForwardTrace ts = model_forward(batch, ps, no_sp, false, nullptr);
    CHECK(ps.sp_branches.empty());
    CHECK(ts.sp.fuse.x.shape() == Shape{2, 1, 4, 8}); // Tc=8 input channels, not 24
    CHECK(ts.probs.shape() == Shape{2, 2});

    ModelConfig no_at = tiny_config();
    no_at.enable_at = false;
    Rng r3(5);
    ModelParams pa = init_model(no_at, r3);
    ForwardTrace ta = model_forward(batch, pa, no_at, false, nullptr);
    CHECK(pa.se_w1.empty());
    CHECK(ta.probs.shape() == Shape{2, 2});
    // attention off produces different probabilities than attention on
    CHECK_FALSE(tensors_equal(ta.probs, tf.probs));
}

TEST_CASE("model_backward demands a training trace used once") {
    ModelConfig c = tiny_config();
    Rng rng(101);
    ModelParams p = init_model(c, rng);
    Tensor batch = Tensor::uniform(rng, {2, c.channels, c.samples}, -1.0, 1.0);
    const std::vector<int> labels = {0, 1};

    ForwardTrace eval_tr = model_forward(batch, p, c, false, nullptr);
    CHECK_THROWS_AS(model_backward(eval_tr, labels), UsageError);

    ForwardTrace tr = model_forward(batch, p, c, true, nullptr);
    const std::vector<int> bad_count = {0};
    CHECK_THROWS_AS(model_backward(tr, bad_count), UsageError);
    const std::vector<int> bad_label = {0, 2};
    CHECK_THROWS_AS(model_backward(tr, bad_label), UsageError);
    ModelGrads g = model_backward(tr, labels);
    CHECK_THROWS_AS(model_backward(tr, labels), UsageError); // consumed

    SUBCASE("gradients align with named parameters") {
        auto named = named_params(p);
        auto ordered = g.ordered();
        REQUIRE(ordered.size() == named.size());
        for (std::size_t i = 0; i < named.size(); ++i) {
            CHECK(ordered[i]->shape() == named[i].tensor->shape());
        }
        CHECK(g.input.shape() == batch.shape());
    }
}

TEST_CASE("whole-model gradients match finite differences") {
    auto results = gradcheck::check_model(20240901);
    CHECK(results.size() >= 25);
    for (const auto& r : results) {
        INFO(r.name, ": rel err ", r.max_rel_err, " tol ", r.tolerance);
        CHECK(r.pass());
    }
}

TEST_CASE("duplicated trials double their summed contribution") {
    // Mean-normalized gradients are unchanged when every trial is repeated,
    // i.e. each duplicate adds an identical term to the batch sum.
    ModelConfig c = tiny_config();
    Rng rng(111);
    ModelParams p = init_model(c, rng);
    Tensor t1 = Tensor::uniform(rng, {1, c.channels, c.samples}, -1.0, 1.0);
    Tensor t2 = Tensor::uniform(rng, {1, c.channels, c.samples}, -1.0, 1.0);
    Tensor once = Tensor::concat(std::vector<Tensor>{t1, t2}, 0);
    Tensor twice = Tensor::concat(std::vector<Tensor>{t1, t1, t2, t2}, 0);

    ModelParams pa = p;
    ForwardTrace tra = model_forward(once, pa, c, true, nullptr);
    const std::vector<int> la = {0, 1};
    ModelGrads ga = model_backward(tra, la);

    ModelParams pb = p;
    ForwardTrace trb = model_forward(twice, pb, c, true, nullptr);
    const std::vector<int> lb = {0, 0, 1, 1};
    ModelGrads gb = model_backward(trb, lb);

    // equality is mathematical; numerically the reordered batch sums leave
    // ~1e-8 relative noise after BN's variance normalization (a missing 1/B
    // would instead show up as a clean factor of two)
    auto oa = ga.ordered();
    auto ob = gb.ordered();
    REQUIRE(oa.size() == ob.size());
    for (std::size_t i = 0; i < oa.size(); ++i) {
        for (std::int64_t j = 0; j < oa[i]->size(); ++j) {
            const double ref = std::max({std::abs((*oa[i])[j]), std::abs((*ob[i])[j]), 1e-6});
            CHECK(std::abs((*oa[i])[j] - (*ob[i])[j]) / ref <= 1e-6);
        }
    }
    // and the per-trial input gradient halves when the trial is counted twice
    const double g1 = ga.input.at({0, 0, 0});
    const double g2 = gb.input.at({0, 0, 0}) + gb.input.at({1, 0, 0});
    CHECK(std::abs(g1 - g2) <= 1e-9 * std::max(1.0, std::abs(g1)));
}

TEST_CASE("saturated predictions shrink the gradient") {
    ModelConfig c = tiny_config();
    Rng rng(121);
    Tensor batch = Tensor::uniform(rng, {2, c.channels, c.samples}, -1.0, 1.0);
    const std::vector<int> labels = {0, 0};

    ModelParams random_p = init_model(c, rng);
    ForwardTrace tr1 = model_forward(batch, random_p, c, true, nullptr);
    ModelGrads g1 = model_backward(tr1, labels);
    const double random_norm = grad_norm(g1);

    ModelParams saturated = init_model(c, rng);
    saturated.dense_b.at({0}) = 30.0;
    saturated.dense_b.at({1}) = -30.0;
    ForwardTrace tr2 = model_forward(batch, saturated, c, true, nullptr);
    CHECK(tr2.probs.at({0, 0}) > 0.999999);
    ModelGrads g2 = model_backward(tr2, labels);
    const double saturated_norm = grad_norm(g2);

    CHECK(saturated_norm < 0.01 * random_norm);
}

TEST_CASE("checkpoint round trip preserves eval behavior") {
    ModelConfig c = tiny_config();
    c.dropout_p = 0.25;
    Rng rng(131);
    ModelParams p = init_model(c, rng);
    Tensor batch = Tensor::uniform(rng, {2, c.channels, c.samples}, -1.0, 1.0);
    // perturb the running statistics so state round-tripping matters
    Rng drop_rng(3);
    model_forward(batch, p, c, true, &drop_rng);

    const auto path = temp_file("roundtrip.dcnk");
    save_checkpoint(p, c, path.string());
    auto [lp, lc] = load_checkpoint(path.string());
    CHECK(config_to_text(lc) == config_to_text(c));

    // float32 storage: parameters agree to single precision
    auto orig = named_params(p);
    auto loaded = named_params(lp);
    REQUIRE(orig.size() == loaded.size());
    for (std::size_t i = 0; i < orig.size(); ++i) {
        CHECK(orig[i].name == loaded[i].name);
        for (std::int64_t j = 0; j < orig[i].tensor->size(); ++j) {
            const double a = (*orig[i].tensor)[j];
            const double b = (*loaded[i].tensor)[j];
            CHECK(std::abs(a - b) <= 1e-6 * std::max(1.0, std::abs(a)));
        }
    }
    ForwardTrace ta = model_forward(batch, p, c, false, nullptr);
    ForwardTrace tb = model_forward(batch, lp, lc, false, nullptr);
    CHECK(max_abs_diff(ta.probs, tb.probs) <= 1e-5);

    SUBCASE("a second save of the loaded params is byte-identical") {
        const auto path2 = temp_file("roundtrip2.dcnk");
        save_checkpoint(lp, lc, path2.string());
        std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
        std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
        std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
        CHECK(s1 == s2);
        CHECK(s1.size() > 0);
    }
}

TEST_CASE("checkpoint rejects corruption") {
    ModelConfig c = tiny_config();
    Rng rng(141);
    ModelParams p = init_model(c, rng);
    const auto path = temp_file("corrupt.dcnk");
    save_checkpoint(p, c, path.string());
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    REQUIRE(bytes.size() > 64);

    auto write_variant = [&](const std::string& data, const char* name) {
        const auto vp = temp_file(name);
        std::ofstream out(vp, std::ios::binary);
        out.write(data.data(), static_cast<std::streamsize>(data.size()));
        return vp;
    };
    {
        std::string bad = bytes;
        bad[0] = 'X';
        CHECK_THROWS_AS(load_checkpoint(write_variant(bad, "bad_magic.dcnk").string()),
                        FormatError);
    }
    {
        std::string bad = bytes;
        bad[4] = 9; // version
        CHECK_THROWS_AS(load_checkpoint(write_variant(bad, "bad_version.dcnk").string()),
                        FormatError);
    }
    {
        std::string bad = bytes.substr(0, bytes.size() / 2);
        CHECK_THROWS_AS(load_checkpoint(write_variant(bad, "truncated.dcnk").string()),
                        FormatError);
    }
    {
        std::string bad = bytes + "x";
        CHECK_THROWS_AS(load_checkpoint(write_variant(bad, "trailing.dcnk").string()),
                        FormatError);
    }
    {
        // flip a byte inside the first parameter name ("cv.conv1.w")
        const std::size_t name_pos = bytes.find("cv.conv1.w");
        REQUIRE(name_pos != std::string::npos);
        std::string bad = bytes;
        bad[name_pos] = 'z';
        CHECK_THROWS_AS(load_checkpoint(write_variant(bad, "bad_name.dcnk").string()),
                        FormatError);
    }
    CHECK_THROWS_AS(load_checkpoint(temp_file("missing.dcnk").string()), ConfigError);
}

} // TEST_SUITE
