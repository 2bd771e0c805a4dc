#include "dcnet/analysis.hpp"

#include <cstdio>
#include <sstream>

#include "dcnet/errors.hpp"

namespace dcnet::analysis {

std::int64_t receptive_field(std::int64_t dilation, std::int64_t kernel) {
    if (dilation < 1 || kernel < 1) {
        throw UsageError("receptive_field: dilation and kernel must be >= 1");
    }
    return 2 * (dilation - 1) * (kernel - 1) + kernel;
}

std::int64_t window_length(std::int64_t tc, std::int64_t n) {
    if (n < 1 || tc <= n) {
        throw UsageError("window_length: need Tc > n >= 1, got Tc=" + std::to_string(tc) +
                         " n=" + std::to_string(n));
    }
    return tc - n + 1;
}

std::int64_t window_length_pooled(std::int64_t samples, std::int64_t p2, std::int64_t n) {
    if (samples < 1 || p2 < 1) {
        throw UsageError("window_length_pooled: samples and p2 must be >= 1");
    }
    return window_length(samples / (8 * p2), n);
}

std::int64_t conv_macs(std::int64_t out_elements, std::int64_t taps, std::int64_t in_channels) {
    if (out_elements < 0 || taps < 0 || in_channels < 0) {
        throw UsageError("conv_macs: counts must be non-negative");
    }
    return out_elements * taps * in_channels;
}

namespace {

ModelReport build_report(const model::ModelConfig& c) {
    c.validate();
    ModelReport r;
    r.config = c;
    const std::int64_t t = c.samples;
    const std::int64_t ch = c.channels;
    const std::int64_t f1 = c.f1;
    const std::int64_t f2 = c.f2();
    const std::int64_t tc = c.conv_time();
    const std::int64_t width = c.fuse_width;
    const std::int64_t fuse_in = c.fuse_in_channels();
    const std::int64_t hidden = f2 / c.se_reduction;
    const std::int64_t n_win = c.effective_windows();
    const std::int64_t tw = c.window_rows();
    const std::int64_t k = c.n_classes;

    auto layer = [&r](std::string name, Shape shape, std::int64_t params, std::int64_t macs,
                      std::int64_t ops) {
        r.layers.push_back({std::move(name), std::move(shape), params, macs, ops});
    };
    auto bn = [&](std::string name, Shape shape, std::int64_t channels) {
        layer(std::move(name), shape, 2 * channels, 0, shape_size(shape));
        r.state_values += 2 * channels;
    };

    layer("cv.conv1", {t, ch, f1}, c.temporal_kernel * f1,
          conv_macs(t * ch * f1, c.temporal_kernel, 1), 0);
    bn("cv.bn1", {t, ch, f1}, f1);
    layer("cv.pw", {t, ch, f2}, f1 * f2, conv_macs(t * ch * f2, 1, f1), 0);
    bn("cv.bn2", {t, ch, f2}, f2);
    layer("cv.dw", {t, 1, f2}, ch * f2, conv_macs(t * f2, ch, 1), 0);
    bn("cv.bn3", {t, 1, f2}, f2);
    layer("cv.elu", {t, 1, f2}, 0, 0, t * f2);
    layer("cv.pool", {tc, 1, f2}, 0, 0, tc * f2);

    if (c.enable_sp) {
        for (std::size_t i = 0; i < c.dilations.size(); ++i) {
            const std::string base = "sp.branch" + std::to_string(i + 1);
            layer(base + ".conv", {tc, 1, f2}, c.atrous_kernel * f2 * f2,
                  conv_macs(tc * f2, c.atrous_kernel, f2), 0);
            bn(base + ".bn", {tc, 1, f2}, f2);
            layer(base + ".elu", {tc, 1, f2}, 0, 0, tc * f2);
            r.fields.push_back(
                {c.dilations[i], c.atrous_kernel, receptive_field(c.dilations[i], c.atrous_kernel)});
        }
        layer("sp.concat", {fuse_in, 1, f2}, 0, 0, 0);
    }
    layer("sp.fuse", {1, f2, width}, fuse_in * width + width, conv_macs(f2 * width, 1, fuse_in),
          0);
    bn("sp.fuse.bn", {1, f2, width}, width);
    layer("sp.fuse.elu", {1, f2, width}, 0, 0, f2 * width);

    if (c.enable_at) {
        // shared weights, applied once per window: squeeze pool, two dense
        // maps, sigmoid, and the broadcast rescale
        layer("head.se", {tw, f2}, f2 * hidden + hidden + hidden * f2 + f2,
              n_win * (f2 * hidden + hidden * f2),
              n_win * (f2 + hidden + f2 + tw * f2));
    }
    layer("head.dense", {k}, f2 * k + k, n_win * f2 * k, 0);
    layer("head.softmax", {k}, 0, 0, n_win * k);
    layer("head.mean", {k}, 0, 0, k);

    for (const LayerStat& l : r.layers) {
        r.trainable_params += l.params;
        r.macs += l.macs;
        r.elementwise_ops += l.ops;
    }
    r.window_length = tw;
    r.window_count = n_win;
    return r;
}

} // namespace

ModelReport count_params(const model::ModelConfig& config) { return build_report(config); }

ModelReport count_flops(const model::ModelConfig& config) { return build_report(config); }

std::int64_t eegnet_param_count(const EegnetConfig& c) {
    if (c.channels < 1 || c.samples < 1 || c.n_classes < 2 || c.f1 < 1 || c.depth_mult < 1 ||
        c.temporal_kernel < 1 || c.separable_kernel < 1 || c.pool1 < 1 || c.pool2 < 1) {
        throw UsageError("eegnet_param_count: all extents must be positive");
    }
    const std::int64_t f2 = c.f1 * c.depth_mult;
    const std::int64_t flat = f2 * (c.samples / c.pool1 / c.pool2);
    std::int64_t total = 0;
    total += c.temporal_kernel * c.f1; // temporal conv, no bias
    total += 2 * c.f1;                 // BN
    total += c.channels * c.f1 * c.depth_mult;
    total += 2 * f2;
    total += c.separable_kernel * f2; // separable: depthwise then pointwise
    total += f2 * f2;
    total += 2 * f2;
    total += flat * c.n_classes + c.n_classes; // dense with bias
    return total;
}

std::string report_text(const ModelReport& r) {
    std::ostringstream out;
    char buf[160];
    out << "layer              output shape      params        MACs         ops\n";
    for (const LayerStat& l : r.layers) {
        std::snprintf(buf, sizeof(buf), "%-18s %-15s %9lld %11lld %11lld\n", l.name.c_str(),
                      shape_str(l.out_shape).c_str(), static_cast<long long>(l.params),
                      static_cast<long long>(l.macs), static_cast<long long>(l.ops));
        out << buf;
    }
    std::snprintf(buf, sizeof(buf),
                  "totals: %lld trainable params, %lld running-stat values, %lld MACs, "
                  "%lld elementwise ops\n",
                  static_cast<long long>(r.trainable_params),
                  static_cast<long long>(r.state_values), static_cast<long long>(r.macs),
                  static_cast<long long>(r.elementwise_ops));
    out << buf;
    std::snprintf(buf, sizeof(buf), "flops (2*MACs + ops): %lld  [%.2f M]\n",
                  static_cast<long long>(r.flops()), static_cast<double>(r.flops()) / 1e6);
    out << buf;
    for (std::size_t i = 0; i < r.fields.size(); ++i) {
        const BranchField& f = r.fields[i];
        std::snprintf(buf, sizeof(buf), "receptive field: branch %zu (dilation %lld, kernel %lld) -> %lld",
                      i + 1, static_cast<long long>(f.dilation), static_cast<long long>(f.kernel),
                      static_cast<long long>(f.field));
        out << buf;
        if (f.dilation == 2 && f.kernel == 8) {
            out << "  (published architecture text lists "
                << kPublishedRfDilation2Kernel8 << ")";
        }
        out << "\n";
    }
    std::snprintf(buf, sizeof(buf), "windows: %lld of length %lld\n",
                  static_cast<long long>(r.window_count),
                  static_cast<long long>(r.window_length));
    out << buf;
    // The reference figures describe the default architecture only;
    // comparing a custom one against them would mislead. Dropout does not
    // affect any count, so it is excluded from the match.
    model::ModelConfig reference;
    reference.dropout_p = r.config.dropout_p;
    if (model::config_to_text(r.config) == model::config_to_text(reference)) {
        std::snprintf(buf, sizeof(buf),
                      "published reference (default architecture): %lld params (delta %+lld), "
                      "%.0f MFLOPs (ratio %.2f)\n",
                      static_cast<long long>(kPublishedParams),
                      static_cast<long long>(r.trainable_params - kPublishedParams),
                      kPublishedFlopsM,
                      static_cast<double>(r.flops()) / (kPublishedFlopsM * 1e6));
        out << buf;
    }
    return out.str();
}

std::string report_records(const ModelReport& r) {
    std::ostringstream out;
    for (const LayerStat& l : r.layers) {
        out << "layer." << l.name << ".shape=" << shape_str(l.out_shape) << "\n";
        out << "layer." << l.name << ".params=" << l.params << "\n";
        out << "layer." << l.name << ".macs=" << l.macs << "\n";
        out << "layer." << l.name << ".ops=" << l.ops << "\n";
    }
    out << "total.params=" << r.trainable_params << "\n";
    out << "total.state=" << r.state_values << "\n";
    out << "total.macs=" << r.macs << "\n";
    out << "total.ops=" << r.elementwise_ops << "\n";
    out << "total.flops=" << r.flops() << "\n";
    for (std::size_t i = 0; i < r.fields.size(); ++i) {
        const std::string base = "rf.branch" + std::to_string(i + 1);
        out << base << ".dilation=" << r.fields[i].dilation << "\n";
        out << base << ".kernel=" << r.fields[i].kernel << "\n";
        out << base << ".field=" << r.fields[i].field << "\n";
    }
    out << "window.length=" << r.window_length << "\n";
    out << "window.count=" << r.window_count << "\n";
    out << "published.params=" << kPublishedParams << "\n";
    out << "published.flops_m=" << kPublishedFlopsM << "\n";
    return out.str();
}

} // namespace dcnet::analysis
