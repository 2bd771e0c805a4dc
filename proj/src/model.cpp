#include "dcnet/model.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "dcnet/errors.hpp"

namespace dcnet::model {

using ops::BatchNormGrads;
using ops::ConvGrads;
using ops::ConvSpec;
using ops::DenseGrads;
using ops::Padding;

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;
constexpr double kBnMomentum = 0.9;
constexpr double kBnEps = 1e-5;
constexpr double kProbFloor = 1e-12;

void add_into(Tensor& dst, const Tensor& src) {
    if (!dst.same_shape(src)) {
        throw ShapeError("gradient accumulation shape mismatch: " + shape_str(dst.shape()) +
                         " vs " + shape_str(src.shape()));
    }
    double* d = dst.data();
    const double* s = src.data();
    for (std::int64_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

} // namespace

void ModelConfig::validate() const {
    if (channels < 1) throw ConfigError("channels must be >= 1");
    if (samples < 1) throw ConfigError("samples must be >= 1");
    if (n_classes < 2) throw ConfigError("n_classes must be >= 2");
    if (f1 < 1) throw ConfigError("f1 must be >= 1");
    if (depth_mult < 1) throw ConfigError("depth_mult must be >= 1");
    if (temporal_kernel < 1) throw ConfigError("temporal_kernel must be >= 1");
    if (pool1 < 1) throw ConfigError("pool1 must be >= 1");
    if (pool1 > samples) throw ConfigError("pool1 must not exceed samples");
    if (dilations.empty()) throw ConfigError("dilations must be non-empty");
    for (int d : dilations) {
        if (d < 1) throw ConfigError("dilations must all be >= 1");
    }
    if (atrous_kernel < 1) throw ConfigError("atrous_kernel must be >= 1");
    if (fuse_width < 1) throw ConfigError("fuse_width must be >= 1");
    if (n_windows < 1 || n_windows > fuse_width) {
        throw ConfigError("n_windows must be in [1, fuse_width]");
    }
    if (se_reduction < 1) throw ConfigError("se_reduction must be >= 1");
    if (f2() % se_reduction != 0) throw ConfigError("se_reduction must divide f2");
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) {
        throw ConfigError("dropout_p must be in [0, 1)");
    }
}

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

std::int64_t parse_config_i64(const std::string& key, const std::string& value) {
    std::int64_t out = 0;
    const char* begin = value.data();
    const char* end = begin + value.size();
    auto [ptr, ec] = std::from_chars(begin, end, out);
    if (ec != std::errc{} || ptr != end) {
        throw ConfigError("config: " + key + ": not an integer: '" + value + "'");
    }
    return out;
}

double parse_config_double(const std::string& key, const std::string& value) {
    double out = 0.0;
    const char* begin = value.data();
    const char* end = begin + value.size();
    auto [ptr, ec] = std::from_chars(begin, end, out);
    if (ec != std::errc{} || ptr != end) {
        throw ConfigError("config: " + key + ": not a number: '" + value + "'");
    }
    return out;
}

bool parse_config_bool(const std::string& key, const std::string& value) {
    if (value == "1" || value == "true") return true;
    if (value == "0" || value == "false") return false;
    throw ConfigError("config: " + key + ": not a boolean: '" + value + "'");
}

std::vector<int> parse_config_dilations(const std::string& key, const std::string& value) {
    std::vector<int> out;
    std::string item;
    std::istringstream ss(value);
    while (std::getline(ss, item, ',')) {
        out.push_back(static_cast<int>(parse_config_i64(key, trim(item))));
    }
    return out;
}

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

} // namespace

std::string config_to_text(const ModelConfig& c) {
    std::ostringstream out;
    out << "channels=" << c.channels << '\n';
    out << "samples=" << c.samples << '\n';
    out << "n_classes=" << c.n_classes << '\n';
    out << "f1=" << c.f1 << '\n';
    out << "depth_mult=" << c.depth_mult << '\n';
    out << "temporal_kernel=" << c.temporal_kernel << '\n';
    out << "pool1=" << c.pool1 << '\n';
    out << "dilations=";
    for (std::size_t i = 0; i < c.dilations.size(); ++i) {
        if (i > 0) out << ',';
        out << c.dilations[i];
    }
    out << '\n';
    out << "atrous_kernel=" << c.atrous_kernel << '\n';
    out << "fuse_width=" << c.fuse_width << '\n';
    out << "n_windows=" << c.n_windows << '\n';
    out << "se_reduction=" << c.se_reduction << '\n';
    out << "dropout_p=" << format_double(c.dropout_p) << '\n';
    out << "enable_sp=" << (c.enable_sp ? 1 : 0) << '\n';
    out << "enable_sw=" << (c.enable_sw ? 1 : 0) << '\n';
    out << "enable_at=" << (c.enable_at ? 1 : 0) << '\n';
    return out.str();
}

bool config_apply(ModelConfig& c, const std::string& key, const std::string& value) {
    if (key == "channels") c.channels = parse_config_i64(key, value);
    else if (key == "samples") c.samples = parse_config_i64(key, value);
    else if (key == "n_classes") c.n_classes = static_cast<int>(parse_config_i64(key, value));
    else if (key == "f1") c.f1 = parse_config_i64(key, value);
    else if (key == "depth_mult") c.depth_mult = parse_config_i64(key, value);
    else if (key == "temporal_kernel") c.temporal_kernel = parse_config_i64(key, value);
    else if (key == "pool1") c.pool1 = parse_config_i64(key, value);
    else if (key == "dilations") c.dilations = parse_config_dilations(key, value);
    else if (key == "atrous_kernel") c.atrous_kernel = parse_config_i64(key, value);
    else if (key == "fuse_width") c.fuse_width = parse_config_i64(key, value);
    else if (key == "n_windows") c.n_windows = parse_config_i64(key, value);
    else if (key == "se_reduction") c.se_reduction = parse_config_i64(key, value);
    else if (key == "dropout_p") c.dropout_p = parse_config_double(key, value);
    else if (key == "enable_sp") c.enable_sp = parse_config_bool(key, value);
    else if (key == "enable_sw") c.enable_sw = parse_config_bool(key, value);
    else if (key == "enable_at") c.enable_at = parse_config_bool(key, value);
    else return false;
    return true;
}

ModelConfig config_from_text(const std::string& text) {
    ModelConfig c;
    std::istringstream ss(text);
    std::string line;
    while (std::getline(ss, line)) {
        line = trim(line);
        if (line.empty() || line[0] == '#') continue;
        std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config: expected key=value, got '" + line + "'");
        }
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (!config_apply(c, key, value)) {
            throw ConfigError("config: unknown key '" + key + "'");
        }
    }
    c.validate();
    return c;
}

std::vector<std::pair<std::string, Shape>> param_shapes(const ModelConfig& c) {
    c.validate();
    const std::int64_t f2 = c.f2();
    std::vector<std::pair<std::string, Shape>> v;
    v.emplace_back("cv.conv1.w", Shape{c.temporal_kernel, 1, 1, c.f1});
    v.emplace_back("cv.bn1.gamma", Shape{c.f1});
    v.emplace_back("cv.bn1.beta", Shape{c.f1});
    v.emplace_back("cv.pw.w", Shape{1, 1, c.f1, f2});
    v.emplace_back("cv.bn2.gamma", Shape{f2});
    v.emplace_back("cv.bn2.beta", Shape{f2});
    v.emplace_back("cv.dw.w", Shape{1, c.channels, f2, 1});
    v.emplace_back("cv.bn3.gamma", Shape{f2});
    v.emplace_back("cv.bn3.beta", Shape{f2});
    if (c.enable_sp) {
        for (std::size_t i = 0; i < c.dilations.size(); ++i) {
            const std::string base = "sp.branch" + std::to_string(i + 1);
            v.emplace_back(base + ".w", Shape{c.atrous_kernel, 1, f2, f2});
            v.emplace_back(base + ".bn.gamma", Shape{f2});
            v.emplace_back(base + ".bn.beta", Shape{f2});
        }
    }
    v.emplace_back("sp.fuse.w", Shape{1, 1, c.fuse_in_channels(), c.fuse_width});
    v.emplace_back("sp.fuse.b", Shape{c.fuse_width});
    v.emplace_back("sp.fuse.bn.gamma", Shape{c.fuse_width});
    v.emplace_back("sp.fuse.bn.beta", Shape{c.fuse_width});
    if (c.enable_at) {
        const std::int64_t hidden = f2 / c.se_reduction;
        v.emplace_back("head.se.w1", Shape{f2, hidden});
        v.emplace_back("head.se.b1", Shape{hidden});
        v.emplace_back("head.se.w2", Shape{hidden, f2});
        v.emplace_back("head.se.b2", Shape{f2});
    }
    v.emplace_back("head.dense.w", Shape{f2, c.n_classes});
    v.emplace_back("head.dense.b", Shape{c.n_classes});
    return v;
}

std::int64_t param_count(const ModelConfig& c) {
    std::int64_t total = 0;
    for (const auto& [name, shape] : param_shapes(c)) total += shape_size(shape);
    return total;
}

std::vector<NamedTensor> named_params(ModelParams& p) {
    std::vector<NamedTensor> v;
    v.push_back({"cv.conv1.w", &p.cv_conv1_w});
    v.push_back({"cv.bn1.gamma", &p.cv_bn1.gamma});
    v.push_back({"cv.bn1.beta", &p.cv_bn1.beta});
    v.push_back({"cv.pw.w", &p.cv_pw_w});
    v.push_back({"cv.bn2.gamma", &p.cv_bn2.gamma});
    v.push_back({"cv.bn2.beta", &p.cv_bn2.beta});
    v.push_back({"cv.dw.w", &p.cv_dw_w});
    v.push_back({"cv.bn3.gamma", &p.cv_bn3.gamma});
    v.push_back({"cv.bn3.beta", &p.cv_bn3.beta});
    for (std::size_t i = 0; i < p.sp_branches.size(); ++i) {
        const std::string base = "sp.branch" + std::to_string(i + 1);
        v.push_back({base + ".w", &p.sp_branches[i].w});
        v.push_back({base + ".bn.gamma", &p.sp_branches[i].bn.gamma});
        v.push_back({base + ".bn.beta", &p.sp_branches[i].bn.beta});
    }
    v.push_back({"sp.fuse.w", &p.sp_fuse_w});
    v.push_back({"sp.fuse.b", &p.sp_fuse_b});
    v.push_back({"sp.fuse.bn.gamma", &p.sp_fuse_bn.gamma});
    v.push_back({"sp.fuse.bn.beta", &p.sp_fuse_bn.beta});
    if (!p.se_w1.empty()) {
        v.push_back({"head.se.w1", &p.se_w1});
        v.push_back({"head.se.b1", &p.se_b1});
        v.push_back({"head.se.w2", &p.se_w2});
        v.push_back({"head.se.b2", &p.se_b2});
    }
    v.push_back({"head.dense.w", &p.dense_w});
    v.push_back({"head.dense.b", &p.dense_b});
    return v;
}

std::vector<NamedTensor> named_state(ModelParams& p) {
    std::vector<NamedTensor> v;
    auto add_bn = [&v](const std::string& base, BnLayer& bn) {
        v.push_back({base + ".running_mean", &bn.state.running_mean});
        v.push_back({base + ".running_var", &bn.state.running_var});
    };
    add_bn("cv.bn1", p.cv_bn1);
    add_bn("cv.bn2", p.cv_bn2);
    add_bn("cv.bn3", p.cv_bn3);
    for (std::size_t i = 0; i < p.sp_branches.size(); ++i) {
        add_bn("sp.branch" + std::to_string(i + 1) + ".bn", p.sp_branches[i].bn);
    }
    add_bn("sp.fuse.bn", p.sp_fuse_bn);
    return v;
}

namespace {

BnLayer make_bn(std::int64_t n) {
    BnLayer bn;
    bn.gamma = Tensor::ones(Shape{n});
    bn.beta = Tensor(Shape{n});
    bn.state.running_mean = Tensor(Shape{n});
    bn.state.running_var = Tensor::ones(Shape{n});
    return bn;
}

ModelParams make_params(const ModelConfig& c) {
    c.validate();
    const std::int64_t f2 = c.f2();
    ModelParams p;
    p.cv_conv1_w = Tensor(Shape{c.temporal_kernel, 1, 1, c.f1});
    p.cv_bn1 = make_bn(c.f1);
    p.cv_pw_w = Tensor(Shape{1, 1, c.f1, f2});
    p.cv_bn2 = make_bn(f2);
    p.cv_dw_w = Tensor(Shape{1, c.channels, f2, 1});
    p.cv_bn3 = make_bn(f2);
    if (c.enable_sp) {
        p.sp_branches.resize(c.dilations.size());
        for (auto& b : p.sp_branches) {
            b.w = Tensor(Shape{c.atrous_kernel, 1, f2, f2});
            b.bn = make_bn(f2);
        }
    }
    p.sp_fuse_w = Tensor(Shape{1, 1, c.fuse_in_channels(), c.fuse_width});
    p.sp_fuse_b = Tensor(Shape{c.fuse_width});
    p.sp_fuse_bn = make_bn(c.fuse_width);
    if (c.enable_at) {
        const std::int64_t hidden = f2 / c.se_reduction;
        p.se_w1 = Tensor(Shape{f2, hidden});
        p.se_b1 = Tensor(Shape{hidden});
        p.se_w2 = Tensor(Shape{hidden, f2});
        p.se_b2 = Tensor(Shape{f2});
    }
    p.dense_w = Tensor(Shape{f2, c.n_classes});
    p.dense_b = Tensor(Shape{c.n_classes});
    return p;
}

// Glorot-uniform bound for a weight tensor. Depthwise kernels see a single
// input channel per filter, so their fans exclude the channel count.
double glorot_bound(const std::string& name, const Tensor& w) {
    double fan_in = 0.0, fan_out = 0.0;
    if (w.rank() == 4) {
        const double window = static_cast<double>(w.extent(0) * w.extent(1));
        if (name == "cv.dw.w") {
            fan_in = window;
            fan_out = window * static_cast<double>(w.extent(3));
        } else {
            fan_in = window * static_cast<double>(w.extent(2));
            fan_out = window * static_cast<double>(w.extent(3));
        }
    } else {
        fan_in = static_cast<double>(w.extent(0));
        fan_out = static_cast<double>(w.extent(1));
    }
    return std::sqrt(6.0 / (fan_in + fan_out));
}

} // namespace

ModelParams init_model(const ModelConfig& c, Rng& rng) {
    ModelParams p = make_params(c);
    for (const auto& [name, tensor] : named_params(p)) {
        const bool is_weight = name.ends_with(".w") || name.ends_with(".w1") || name.ends_with(".w2");
        if (!is_weight) continue;
        const double bound = glorot_bound(name, *tensor);
        *tensor = Tensor::uniform(rng, tensor->shape(), -bound, bound);
    }
    return p;
}

Tensor cv_block(const Tensor& x, ModelParams& p, const ModelConfig& c, bool training, Rng* rng,
                CvTrace* tr) {
    const int r = x.rank();
    if (r < 3 || x.extent(r - 1) != 1 || x.extent(r - 2) != c.channels ||
        x.extent(r - 3) != c.samples) {
        throw ShapeError("cv_block: input must be [..., " + std::to_string(c.samples) + ", " +
                         std::to_string(c.channels) + ", 1], got " + shape_str(x.shape()));
    }
    const ConvSpec same{1, Padding::same, false};
    const ConvSpec valid{1, Padding::valid, false};
    Tensor a = ops::conv2d(x, p.cv_conv1_w, nullptr, same, tr ? &tr->conv1 : nullptr);
    require_finite(a, "cv.conv1");
    a = ops::batch_norm(a, p.cv_bn1.gamma, p.cv_bn1.beta, p.cv_bn1.state, training, kBnMomentum,
                        kBnEps, tr ? &tr->bn1 : nullptr);
    require_finite(a, "cv.bn1");
    a = ops::conv2d(a, p.cv_pw_w, nullptr, same, tr ? &tr->pw : nullptr);
    require_finite(a, "cv.pw");
    a = ops::batch_norm(a, p.cv_bn2.gamma, p.cv_bn2.beta, p.cv_bn2.state, training, kBnMomentum,
                        kBnEps, tr ? &tr->bn2 : nullptr);
    require_finite(a, "cv.bn2");
    a = ops::depthwise_conv2d(a, p.cv_dw_w, nullptr, valid, tr ? &tr->dw : nullptr);
    require_finite(a, "cv.dw");
    a = ops::batch_norm(a, p.cv_bn3.gamma, p.cv_bn3.beta, p.cv_bn3.state, training, kBnMomentum,
                        kBnEps, tr ? &tr->bn3 : nullptr);
    require_finite(a, "cv.bn3");
    a = ops::elu(a, 1.0, tr ? &tr->elu : nullptr);
    require_finite(a, "cv.elu");
    a = ops::avg_pool(a, c.pool1, tr ? &tr->pool : nullptr);
    require_finite(a, "cv.pool");
    a = ops::dropout(a, c.dropout_p, training, rng, tr ? &tr->drop : nullptr);
    require_finite(a, "cv.dropout");
    return a;
}

Tensor sp_block(const Tensor& x, ModelParams& p, const ModelConfig& c, bool training, Rng* rng,
                SpTrace* tr) {
    const int r = x.rank();
    if (r < 3 || x.extent(r - 1) != c.f2() || x.extent(r - 2) != 1 ||
        x.extent(r - 3) != c.conv_time()) {
        throw ShapeError("sp_block: input must be [..., " + std::to_string(c.conv_time()) +
                         ", 1, " + std::to_string(c.f2()) + "], got " + shape_str(x.shape()));
    }
    Tensor pre;
    if (c.enable_sp) {
        if (p.sp_branches.size() != c.dilations.size()) {
            throw UsageError("sp_block: params have " + std::to_string(p.sp_branches.size()) +
                             " branches, config expects " + std::to_string(c.dilations.size()));
        }
        if (tr) tr->branches.resize(c.dilations.size());
        std::vector<Tensor> outs;
        outs.reserve(c.dilations.size());
        for (std::size_t i = 0; i < c.dilations.size(); ++i) {
            const std::string base = "sp.branch" + std::to_string(i + 1);
            SpTrace::Branch* bt = tr ? &tr->branches[i] : nullptr;
            const ConvSpec spec{c.dilations[i], Padding::same, false};
            Tensor b = ops::conv2d(x, p.sp_branches[i].w, nullptr, spec, bt ? &bt->conv : nullptr);
            require_finite(b, base + ".conv");
            b = ops::batch_norm(b, p.sp_branches[i].bn.gamma, p.sp_branches[i].bn.beta,
                                p.sp_branches[i].bn.state, training, kBnMomentum, kBnEps,
                                bt ? &bt->bn : nullptr);
            require_finite(b, base + ".bn");
            b = ops::elu(b, 1.0, bt ? &bt->elu : nullptr);
            require_finite(b, base + ".elu");
            b = ops::dropout(b, c.dropout_p, training, rng, bt ? &bt->drop : nullptr);
            require_finite(b, base + ".dropout");
            outs.push_back(std::move(b));
        }
        pre = Tensor::concat(outs, r - 3);
        if (tr) tr->concat_parts = static_cast<std::int64_t>(outs.size());
    } else {
        pre = x;
        if (tr) tr->concat_parts = 1;
    }
    // [..., IN, 1, F2] -> [..., 1, F2, IN]
    std::vector<int> perm(r);
    std::iota(perm.begin(), perm.end(), 0);
    perm[r - 3] = r - 2;
    perm[r - 2] = r - 1;
    perm[r - 1] = r - 3;
    Tensor q = pre.permute(perm);
    const ConvSpec fuse_spec{1, Padding::valid, true};
    Tensor f = ops::conv2d(q, p.sp_fuse_w, &p.sp_fuse_b, fuse_spec, tr ? &tr->fuse : nullptr);
    require_finite(f, "sp.fuse");
    f = ops::batch_norm(f, p.sp_fuse_bn.gamma, p.sp_fuse_bn.beta, p.sp_fuse_bn.state, training,
                        kBnMomentum, kBnEps, tr ? &tr->fuse_bn : nullptr);
    require_finite(f, "sp.fuse.bn");
    f = ops::elu(f, 1.0, tr ? &tr->fuse_elu : nullptr);
    require_finite(f, "sp.fuse.elu");
    f = ops::dropout(f, c.dropout_p, training, rng, tr ? &tr->fuse_drop : nullptr);
    require_finite(f, "sp.fuse.dropout");
    return f;
}

std::vector<Tensor> sliding_windows(const Tensor& x, std::int64_t n) {
    if (x.rank() != 2) {
        throw ShapeError("sliding_windows: input must have rank 2, got " + shape_str(x.shape()));
    }
    const std::int64_t w = x.extent(0);
    if (n < 1 || n > w) {
        throw UsageError("sliding_windows: n must be in [1, " + std::to_string(w) + "], got " +
                         std::to_string(n));
    }
    const std::int64_t tw = w - n + 1;
    std::vector<Tensor> out;
    out.reserve(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) out.push_back(x.slice_axis(0, i, tw));
    return out;
}

Tensor se_block(const Tensor& x, const Tensor& w1, const Tensor& b1, const Tensor& w2,
                const Tensor& b2, SeCtx* ctx) {
    const int r = x.rank();
    if (r < 2) {
        throw ShapeError("se_block: input must have rank >= 2, got " + shape_str(x.shape()));
    }
    const std::int64_t f2 = x.extent(r - 1);
    const std::int64_t tw = x.extent(r - 2);
    // squeeze: mean over the time rows
    Shape pool_in = x.shape();
    pool_in.insert(pool_in.end() - 1, 1); // [..., Tw, 1, F2]
    Tensor z4 = ops::avg_pool(x.reshape(pool_in), tw, ctx ? &ctx->pool : nullptr);
    Shape zshape(x.shape().begin(), x.shape().end() - 2);
    zshape.push_back(f2);
    Tensor z = z4.reshape(zshape);
    // excitation: bottleneck with ReLU then sigmoid gates
    Tensor h = ops::relu(ops::dense(z, w1, b1, ctx ? &ctx->fc1 : nullptr),
                         ctx ? &ctx->relu : nullptr);
    Tensor s = ops::sigmoid(ops::dense(h, w2, b2, ctx ? &ctx->fc2 : nullptr),
                            ctx ? &ctx->sig : nullptr);
    // rescale each channel
    Tensor out(x.shape());
    const std::int64_t lead = x.size() / (tw * f2);
    const double* xp = x.data();
    const double* sp = s.data();
    double* op = out.data();
    for (std::int64_t l = 0; l < lead; ++l) {
        for (std::int64_t t = 0; t < tw; ++t) {
            for (std::int64_t cch = 0; cch < f2; ++cch) {
                op[(l * tw + t) * f2 + cch] = xp[(l * tw + t) * f2 + cch] * sp[l * f2 + cch];
            }
        }
    }
    if (ctx) {
        ctx->x = x;
        ctx->scale = std::move(s);
        ctx->consumed = false;
    }
    return out;
}

SeGrads se_block_vjp(SeCtx& ctx, const Tensor& upstream) {
    if (ctx.consumed) throw UsageError("se_block_vjp: context already consumed");
    if (!upstream.same_shape(ctx.x)) {
        throw ShapeError("se_block_vjp: upstream shape " + shape_str(upstream.shape()) +
                         " does not match output shape " + shape_str(ctx.x.shape()));
    }
    ctx.consumed = true;
    const int r = ctx.x.rank();
    const std::int64_t f2 = ctx.x.extent(r - 1);
    const std::int64_t tw = ctx.x.extent(r - 2);
    const std::int64_t lead = ctx.x.size() / (tw * f2);
    // through the rescale: out = x * s
    Tensor dx(ctx.x.shape());
    Tensor dscale(ctx.scale.shape());
    {
        const double* up = upstream.data();
        const double* xp = ctx.x.data();
        const double* sp = ctx.scale.data();
        double* dxp = dx.data();
        double* dsp = dscale.data();
        for (std::int64_t l = 0; l < lead; ++l) {
            for (std::int64_t t = 0; t < tw; ++t) {
                for (std::int64_t cch = 0; cch < f2; ++cch) {
                    const std::int64_t i = (l * tw + t) * f2 + cch;
                    dxp[i] = up[i] * sp[l * f2 + cch];
                    dsp[l * f2 + cch] += up[i] * xp[i];
                }
            }
        }
    }
    SeGrads g;
    Tensor d = ops::sigmoid_vjp(ctx.sig, dscale);
    DenseGrads d2 = ops::dense_vjp(ctx.fc2, d);
    g.dw2 = std::move(d2.dw);
    g.db2 = std::move(d2.db);
    d = ops::relu_vjp(ctx.relu, d2.dx);
    DenseGrads d1 = ops::dense_vjp(ctx.fc1, d);
    g.dw1 = std::move(d1.dw);
    g.db1 = std::move(d1.db);
    // through the mean squeeze
    Tensor dz4 = d1.dx.reshape(ctx.pool.out_shape);
    Tensor dpool = ops::avg_pool_vjp(ctx.pool, dz4);
    add_into(dx, dpool.reshape(ctx.x.shape()));
    g.dx = std::move(dx);
    return g;
}

ForwardTrace model_forward(const Tensor& batch, ModelParams& params, const ModelConfig& config,
                           bool training, Rng* rng) {
    config.validate();
    if (batch.rank() != 3 || batch.extent(1) != config.channels ||
        batch.extent(2) != config.samples) {
        throw ShapeError("model_forward: batch must be [B, " + std::to_string(config.channels) +
                         ", " + std::to_string(config.samples) + "], got " +
                         shape_str(batch.shape()));
    }
    const std::int64_t b = batch.extent(0);
    ForwardTrace tr;
    tr.training = training;
    tr.config = config;
    tr.batch = b;
    require_finite(batch, "input");
    // raw [B, C, T] -> per-trial (T, C, 1) layout
    Tensor x0 = batch.permute({0, 2, 1}).reshape({b, config.samples, config.channels, 1});
    Tensor cv = cv_block(x0, params, config, training, rng, &tr.cv);
    Tensor sp = sp_block(cv, params, config, training, rng, &tr.sp);
    const std::int64_t f2 = config.f2();
    const std::int64_t width = config.fuse_width;
    // [B, 1, F2, W] -> [B, W, F2]
    Tensor hin = sp.reshape({b, f2, width}).permute({0, 2, 1});
    tr.head_in_shape = hin.shape();
    const std::int64_t n = config.effective_windows();
    const std::int64_t tw = config.window_rows();
    tr.windows.resize(static_cast<std::size_t>(n));
    Tensor acc(Shape{b, config.n_classes});
    for (std::int64_t w = 0; w < n; ++w) {
        WindowTrace& wt = tr.windows[static_cast<std::size_t>(w)];
        wt.start = w;
        const std::string base = "head.window" + std::to_string(w + 1);
        Tensor win = hin.slice_axis(1, w, tw);
        if (config.enable_at) {
            win = se_block(win, params.se_w1, params.se_b1, params.se_w2, params.se_b2, &wt.se);
            require_finite(win, base + ".se");
        }
        Tensor last = win.slice_axis(1, tw - 1, 1).reshape({b, f2});
        Tensor logits = ops::dense(last, params.dense_w, params.dense_b, &wt.dense);
        require_finite(logits, base + ".dense");
        wt.probs = ops::softmax(logits, 1, &wt.softmax);
        require_finite(wt.probs, base + ".softmax");
        const double* pp = wt.probs.data();
        double* ap = acc.data();
        for (std::int64_t i = 0; i < acc.size(); ++i) ap[i] += pp[i] / static_cast<double>(n);
    }
    tr.probs = std::move(acc);
    require_finite(tr.probs, "head.mean");
    return tr;
}

std::vector<Tensor*> ModelGrads::ordered() {
    std::vector<Tensor*> v = {&cv_conv1_w, &cv_bn1_gamma, &cv_bn1_beta,
                              &cv_pw_w,    &cv_bn2_gamma, &cv_bn2_beta,
                              &cv_dw_w,    &cv_bn3_gamma, &cv_bn3_beta};
    for (auto& b : sp_branches) {
        v.push_back(&b.w);
        v.push_back(&b.gamma);
        v.push_back(&b.beta);
    }
    v.push_back(&sp_fuse_w);
    v.push_back(&sp_fuse_b);
    v.push_back(&sp_fuse_bn_gamma);
    v.push_back(&sp_fuse_bn_beta);
    if (!se_w1.empty()) {
        v.push_back(&se_w1);
        v.push_back(&se_b1);
        v.push_back(&se_w2);
        v.push_back(&se_b2);
    }
    v.push_back(&dense_w);
    v.push_back(&dense_b);
    return v;
}

ModelGrads model_backward(ForwardTrace& tr, std::span<const int> labels) {
    if (!tr.training) {
        throw UsageError("model_backward: trace was recorded in eval mode");
    }
    if (tr.consumed) throw UsageError("model_backward: trace already consumed");
    const ModelConfig& c = tr.config;
    const std::int64_t b = tr.batch;
    const std::int64_t ncls = c.n_classes;
    if (static_cast<std::int64_t>(labels.size()) != b) {
        throw UsageError("model_backward: expected " + std::to_string(b) + " labels, got " +
                         std::to_string(labels.size()));
    }
    for (int y : labels) {
        if (y < 0 || y >= ncls) {
            throw UsageError("model_backward: label " + std::to_string(y) + " outside [0, " +
                             std::to_string(ncls) + ")");
        }
    }
    tr.consumed = true;
    ModelGrads g;
    const std::int64_t f2 = c.f2();
    const std::int64_t width = c.fuse_width;
    const std::int64_t tw = c.window_rows();
    const std::int64_t k = static_cast<std::int64_t>(tr.windows.size());
    // mean cross-entropy over averaged probabilities, then the window mean
    Tensor dwin_up(Shape{b, ncls});
    {
        const double* pp = tr.probs.data();
        double* dp = dwin_up.data();
        for (std::int64_t i = 0; i < b; ++i) {
            const double pv = pp[i * ncls + labels[static_cast<std::size_t>(i)]];
            if (pv > kProbFloor) {
                dp[i * ncls + labels[static_cast<std::size_t>(i)]] =
                    -1.0 / (static_cast<double>(b) * pv * static_cast<double>(k));
            }
        }
    }
    Tensor d_head_in(tr.head_in_shape); // [B, W, F2]
    g.dense_w = Tensor(Shape{f2, ncls});
    g.dense_b = Tensor(Shape{ncls});
    if (c.enable_at) {
        const std::int64_t hidden = f2 / c.se_reduction;
        g.se_w1 = Tensor(Shape{f2, hidden});
        g.se_b1 = Tensor(Shape{hidden});
        g.se_w2 = Tensor(Shape{hidden, f2});
        g.se_b2 = Tensor(Shape{f2});
    }
    for (auto& wt : tr.windows) {
        Tensor dlogits = ops::softmax_vjp(wt.softmax, dwin_up);
        DenseGrads dg = ops::dense_vjp(wt.dense, dlogits);
        add_into(g.dense_w, dg.dw);
        add_into(g.dense_b, dg.db);
        // the classifier reads only the last time row of the window
        Tensor d_win(Shape{b, tw, f2});
        {
            const double* src = dg.dx.data();
            double* dst = d_win.data();
            for (std::int64_t i = 0; i < b; ++i) {
                std::memcpy(dst + (i * tw + tw - 1) * f2, src + i * f2,
                            static_cast<std::size_t>(f2) * sizeof(double));
            }
        }
        if (c.enable_at) {
            SeGrads sg = se_block_vjp(wt.se, d_win);
            add_into(g.se_w1, sg.dw1);
            add_into(g.se_b1, sg.db1);
            add_into(g.se_w2, sg.dw2);
            add_into(g.se_b2, sg.db2);
            d_win = std::move(sg.dx);
        }
        // windows overlap, so contributions accumulate
        {
            const double* src = d_win.data();
            double* dst = d_head_in.data();
            for (std::int64_t i = 0; i < b; ++i) {
                for (std::int64_t t = 0; t < tw; ++t) {
                    const std::int64_t row = wt.start + t;
                    for (std::int64_t cch = 0; cch < f2; ++cch) {
                        dst[(i * width + row) * f2 + cch] += src[(i * tw + t) * f2 + cch];
                    }
                }
            }
        }
    }
    // back through the head view: [B, W, F2] -> [B, 1, F2, W]
    Tensor d = d_head_in.permute({0, 2, 1}).reshape({b, 1, f2, width});
    // sp block
    d = ops::dropout_vjp(tr.sp.fuse_drop, d);
    d = ops::elu_vjp(tr.sp.fuse_elu, d);
    BatchNormGrads bng = ops::batch_norm_vjp(tr.sp.fuse_bn, d);
    g.sp_fuse_bn_gamma = std::move(bng.dgamma);
    g.sp_fuse_bn_beta = std::move(bng.dbeta);
    ConvGrads cg = ops::conv2d_vjp(tr.sp.fuse, bng.dx);
    g.sp_fuse_w = std::move(cg.dw);
    g.sp_fuse_b = std::move(cg.db);
    // undo the [..., IN, 1, F2] -> [..., 1, F2, IN] permute
    d = cg.dx.permute({0, 3, 1, 2});
    Tensor d_cv;
    if (c.enable_sp) {
        const std::int64_t tc = c.conv_time();
        g.sp_branches.resize(tr.sp.branches.size());
        d_cv = Tensor(Shape{b, tc, 1, f2});
        for (std::size_t i = 0; i < tr.sp.branches.size(); ++i) {
            Tensor di = d.slice_axis(1, static_cast<std::int64_t>(i) * tc, tc);
            di = ops::dropout_vjp(tr.sp.branches[i].drop, di);
            di = ops::elu_vjp(tr.sp.branches[i].elu, di);
            BatchNormGrads bg = ops::batch_norm_vjp(tr.sp.branches[i].bn, di);
            g.sp_branches[i].gamma = std::move(bg.dgamma);
            g.sp_branches[i].beta = std::move(bg.dbeta);
            ConvGrads bcg = ops::conv2d_vjp(tr.sp.branches[i].conv, bg.dx);
            g.sp_branches[i].w = std::move(bcg.dw);
            add_into(d_cv, bcg.dx);
        }
    } else {
        d_cv = std::move(d);
    }
    // cv block
    d = ops::dropout_vjp(tr.cv.drop, d_cv);
    d = ops::avg_pool_vjp(tr.cv.pool, d);
    d = ops::elu_vjp(tr.cv.elu, d);
    bng = ops::batch_norm_vjp(tr.cv.bn3, d);
    g.cv_bn3_gamma = std::move(bng.dgamma);
    g.cv_bn3_beta = std::move(bng.dbeta);
    cg = ops::depthwise_conv2d_vjp(tr.cv.dw, bng.dx);
    g.cv_dw_w = std::move(cg.dw);
    bng = ops::batch_norm_vjp(tr.cv.bn2, cg.dx);
    g.cv_bn2_gamma = std::move(bng.dgamma);
    g.cv_bn2_beta = std::move(bng.dbeta);
    cg = ops::conv2d_vjp(tr.cv.pw, bng.dx);
    g.cv_pw_w = std::move(cg.dw);
    bng = ops::batch_norm_vjp(tr.cv.bn1, cg.dx);
    g.cv_bn1_gamma = std::move(bng.dgamma);
    g.cv_bn1_beta = std::move(bng.dbeta);
    cg = ops::conv2d_vjp(tr.cv.conv1, bng.dx);
    g.cv_conv1_w = std::move(cg.dw);
    // undo the input permute: [B, T, C, 1] -> [B, C, T]
    g.input = cg.dx.reshape({b, c.samples, c.channels}).permute({0, 2, 1});
    return g;
}

namespace {

void write_bytes(std::ofstream& f, const void* p, std::size_t n) {
    f.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void write_u32(std::ofstream& f, std::uint32_t v) {
    static_assert(std::endian::native == std::endian::little);
    write_bytes(f, &v, sizeof(v));
}

void write_u16(std::ofstream& f, std::uint16_t v) {
    write_bytes(f, &v, sizeof(v));
}

void read_exact(std::ifstream& f, void* p, std::size_t n) {
    f.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(f.gcount()) != n) {
        throw FormatError("checkpoint truncated");
    }
}

std::uint32_t read_u32(std::ifstream& f) {
    static_assert(std::endian::native == std::endian::little);
    std::uint32_t v = 0;
    read_exact(f, &v, sizeof(v));
    return v;
}

std::uint16_t read_u16(std::ifstream& f) {
    std::uint16_t v = 0;
    read_exact(f, &v, sizeof(v));
    return v;
}

void write_named_tensor(std::ofstream& f, const std::string& name, const Tensor& t) {
    write_u16(f, static_cast<std::uint16_t>(name.size()));
    write_bytes(f, name.data(), name.size());
    const std::uint8_t rank = static_cast<std::uint8_t>(t.rank());
    write_bytes(f, &rank, 1);
    for (int a = 0; a < t.rank(); ++a) {
        write_u32(f, static_cast<std::uint32_t>(t.extent(a)));
    }
    std::vector<float> buf(static_cast<std::size_t>(t.size()));
    const double* src = t.data();
    for (std::int64_t i = 0; i < t.size(); ++i) {
        buf[static_cast<std::size_t>(i)] = static_cast<float>(src[i]);
    }
    write_bytes(f, buf.data(), buf.size() * sizeof(float));
}

void read_named_tensor(std::ifstream& f, const std::string& expected_name, Tensor& t) {
    const std::uint16_t name_len = read_u16(f);
    std::string name(name_len, '\0');
    read_exact(f, name.data(), name_len);
    if (name != expected_name) {
        throw FormatError("checkpoint: expected parameter '" + expected_name + "', found '" +
                          name + "'");
    }
    std::uint8_t rank = 0;
    read_exact(f, &rank, 1);
    if (rank != t.rank()) {
        throw FormatError("checkpoint: parameter '" + name + "' has rank " +
                          std::to_string(rank) + ", expected " + std::to_string(t.rank()));
    }
    for (int a = 0; a < t.rank(); ++a) {
        const std::uint32_t e = read_u32(f);
        if (static_cast<std::int64_t>(e) != t.extent(a)) {
            throw FormatError("checkpoint: parameter '" + name + "' has shape mismatch on axis " +
                              std::to_string(a));
        }
    }
    std::vector<float> buf(static_cast<std::size_t>(t.size()));
    read_exact(f, buf.data(), buf.size() * sizeof(float));
    double* dst = t.data();
    for (std::int64_t i = 0; i < t.size(); ++i) {
        dst[i] = static_cast<double>(buf[static_cast<std::size_t>(i)]);
    }
}

} // namespace

void save_checkpoint(const ModelParams& params, const ModelConfig& config,
                     const std::string& path) {
    config.validate();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot open checkpoint for writing: " + path);
    write_bytes(f, "DCNK", 4);
    write_u32(f, kCheckpointVersion);
    const std::string cfg = config_to_text(config);
    write_u32(f, static_cast<std::uint32_t>(cfg.size()));
    write_bytes(f, cfg.data(), cfg.size());
    ModelParams& p = const_cast<ModelParams&>(params);
    for (const auto& [name, tensor] : named_params(p)) write_named_tensor(f, name, *tensor);
    for (const auto& [name, tensor] : named_state(p)) write_named_tensor(f, name, *tensor);
    if (!f) throw ConfigError("failed writing checkpoint: " + path);
}

std::pair<ModelParams, ModelConfig> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot open checkpoint: " + path);
    char magic[4] = {};
    read_exact(f, magic, 4);
    if (std::memcmp(magic, "DCNK", 4) != 0) {
        throw FormatError("not a DCNK checkpoint: " + path);
    }
    const std::uint32_t version = read_u32(f);
    if (version != kCheckpointVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    }
    const std::uint32_t cfg_len = read_u32(f);
    if (cfg_len > (1u << 20)) throw FormatError("checkpoint config block too large");
    std::string cfg_text(cfg_len, '\0');
    read_exact(f, cfg_text.data(), cfg_len);
    ModelConfig config;
    try {
        config = config_from_text(cfg_text);
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint config: ") + e.what());
    }
    ModelParams params = make_params(config);
    for (const auto& [name, tensor] : named_params(params)) read_named_tensor(f, name, *tensor);
    for (const auto& [name, tensor] : named_state(params)) read_named_tensor(f, name, *tensor);
    if (f.peek() != std::ifstream::traits_type::eof()) {
        throw FormatError("trailing bytes after checkpoint payload");
    }
    return {std::move(params), config};
}

} // namespace dcnet::model
