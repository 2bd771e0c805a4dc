#include "dcnet/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "dcnet/analysis.hpp"
#include "dcnet/data_io.hpp"
#include "dcnet/errors.hpp"
#include "dcnet/gradcheck.hpp"
#include "dcnet/metrics.hpp"

namespace dcnet::cli {

namespace {

namespace fs = std::filesystem;

std::string trim(const std::string& s) {
    const char* ws = " \t\r";
    const std::size_t a = s.find_first_not_of(ws);
    if (a == std::string::npos) return "";
    const std::size_t b = s.find_last_not_of(ws);
    return s.substr(a, b - a + 1);
}

std::pair<std::string, std::string> split_kv(const std::string& line, const char* what) {
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
        throw ConfigError(std::string(what) + ": expected key=value, got '" + line + "'");
    }
    return {trim(line.substr(0, eq)), trim(line.substr(eq + 1))};
}

std::uint64_t parse_u64(const std::string& what, const std::string& value) {
    std::size_t pos = 0;
    unsigned long long out = 0;
    try {
        out = std::stoull(value, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos != value.size() || value.empty()) {
        throw ConfigError(what + ": not an integer: '" + value + "'");
    }
    return out;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open " + path + " for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text_file(const std::string& path, const std::string& content) {
    const fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    if (!out) throw ConfigError("cannot open " + path + " for writing");
    out << content;
    if (!out) throw ConfigError("failed writing " + path);
}

// "# "-prefixed copy of a key=value block, for artifact headers.
std::string commented(const std::string& text) {
    std::istringstream in(text);
    std::ostringstream out;
    std::string line;
    out << "# resolved configuration\n";
    while (std::getline(in, line)) out << "# " << line << "\n";
    return out.str();
}

std::optional<std::uint64_t> env_seed() {
    const char* v = std::getenv("DCNET_SEED");
    if (v == nullptr || *v == '\0') return std::nullopt;
    return parse_u64("DCNET_SEED", v);
}

// Shared --config/--set/--seed plumbing. Precedence, lowest to highest:
// defaults, DCNET_SEED, config file, --set overrides, --seed.
struct ConfigInputs {
    std::string config_path;
    std::vector<std::string> sets;
    std::int64_t seed = -1; // <0: not given
};

RunConfig resolve(const ConfigInputs& in) {
    RunConfig rc;
    if (auto s = env_seed()) {
        rc.train.seed = *s;
        std::cout << "seed from DCNET_SEED: " << *s << "\n";
    }
    if (!in.config_path.empty()) {
        std::istringstream ss(read_file(in.config_path));
        std::string line;
        while (std::getline(ss, line)) {
            line = trim(line);
            if (line.empty() || line[0] == '#') continue;
            auto [key, value] = split_kv(line, "config");
            rc.apply(key, value);
        }
    }
    for (const std::string& s : in.sets) {
        auto [key, value] = split_kv(s, "--set");
        rc.apply(key, value);
        std::cout << "override: " << key << "=" << value << "\n";
    }
    if (in.seed >= 0) {
        rc.train.seed = static_cast<std::uint64_t>(in.seed);
        std::cout << "override: seed=" << in.seed << "\n";
    }
    rc.model.validate();
    rc.train.validate();
    return rc;
}

std::string format_row(const std::string& label, double accuracy, double kappa) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%-9s %.6f %.6f\n", label.c_str(), accuracy, kappa);
    return buf;
}

struct FitOutcome {
    trainer::TrainResult result;
    double kappa = 0.0;
};

FitOutcome fit(const data::TrialSet& trials, const data::TrialSet* val,
               const model::ModelConfig& mc, const trainer::TrainConfig& tc) {
    FitOutcome out{trainer::train(trials, val, mc, tc), 0.0};
    out.kappa = out.result.history[static_cast<std::size_t>(out.result.best_epoch - 1)].val_kappa;
    return out;
}

struct TrainOpts {
    ConfigInputs inputs;
    std::string data, val, out_dir = ".";
};

int cmd_train(const TrainOpts& o) {
    RunConfig rc = resolve(o.inputs);
    if (!o.data.empty()) rc.train_data = o.data;
    if (!o.val.empty()) rc.val_data = o.val;
    if (rc.train_data.empty()) {
        throw ConfigError("train: no training data (--data or train_data=)");
    }
    data::TrialSet trials = data::load_trials(rc.train_data);
    data::TrialSet val_set;
    const data::TrialSet* val = nullptr;
    if (!rc.val_data.empty()) {
        val_set = data::load_trials(rc.val_data);
        val = &val_set;
    }
    std::cout << rc.to_text();
    FitOutcome fo = fit(trials, val, rc.model, rc.train);
    const trainer::TrainResult& r = fo.result;

    const fs::path out_dir(o.out_dir);
    fs::create_directories(out_dir);
    const std::string cp_path = (out_dir / rc.checkpoint).string();
    const std::string hist_path = (out_dir / rc.history).string();
    model::save_checkpoint(r.best_params, rc.model, cp_path);
    write_text_file(hist_path, commented(rc.to_text()) + trainer::history_to_text(r.history));

    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "trained %zu epochs, best epoch %lld: val loss %.6f, accuracy %.6f, "
                  "kappa %.6f\n",
                  r.history.size(), static_cast<long long>(r.best_epoch), r.best_val_loss,
                  r.best_val_accuracy, fo.kappa);
    std::cout << buf;
    std::cout << "checkpoint: " << cp_path << "\n";
    std::cout << "history: " << hist_path << "\n";
    return 0;
}

struct EvalOpts {
    std::string data, checkpoint, report;
};

int cmd_eval(const EvalOpts& o) {
    auto [params, mc] = model::load_checkpoint(o.checkpoint);
    data::TrialSet trials = data::load_trials(o.data);
    auto [loss, cm] = trainer::evaluate(params, mc, trials, 64);

    std::ostringstream out;
    char buf[96];
    std::snprintf(buf, sizeof(buf), "loss=%.6f\naccuracy=%.6f\nkappa=%.6f\n", loss,
                  metrics::accuracy(cm), metrics::kappa(cm));
    out << buf;
    out << "confusion (rows true, cols predicted):\n";
    for (int t = 0; t < cm.n; ++t) {
        for (int p = 0; p < cm.n; ++p) {
            out << cm.at(t, p) << (p + 1 < cm.n ? ' ' : '\n');
        }
    }
    const std::vector<double> recall = metrics::per_class_recall(cm);
    out << "per-class recall:";
    for (double v : recall) {
        std::snprintf(buf, sizeof(buf), " %.6f", v);
        out << buf;
    }
    out << "\n";

    std::cout << out.str();
    if (!o.report.empty()) {
        write_text_file(o.report, commented(model::config_to_text(mc)) + out.str());
        std::cout << "report: " << o.report << "\n";
    }
    return 0;
}

struct SweepOpts {
    ConfigInputs inputs;
    std::string data, val, out = "sweep.txt";
    std::int64_t n_from = 1, n_to = 1;
};

int cmd_sweep_windows(const SweepOpts& o) {
    RunConfig rc = resolve(o.inputs);
    if (!o.data.empty()) rc.train_data = o.data;
    if (!o.val.empty()) rc.val_data = o.val;
    if (rc.train_data.empty()) {
        throw ConfigError("sweep-windows: no training data (--data or train_data=)");
    }
    if (o.n_from < 1 || o.n_from > o.n_to || o.n_to > rc.model.fuse_width) {
        throw ConfigError("sweep-windows: need 1 <= n-from <= n-to <= fuse_width (" +
                          std::to_string(rc.model.fuse_width) + ")");
    }
    data::TrialSet trials = data::load_trials(rc.train_data);
    data::TrialSet val_set;
    const data::TrialSet* val = nullptr;
    if (!rc.val_data.empty()) {
        val_set = data::load_trials(rc.val_data);
        val = &val_set;
    }
    std::ostringstream table;
    table << "# n accuracy kappa\n";
    for (std::int64_t n = o.n_from; n <= o.n_to; ++n) {
        model::ModelConfig mc = rc.model;
        mc.n_windows = n;
        FitOutcome fo = fit(trials, val, mc, rc.train);
        table << format_row(std::to_string(n), fo.result.best_val_accuracy, fo.kappa);
    }
    std::cout << table.str();
    write_text_file(o.out, commented(rc.to_text()) + table.str());
    std::cout << "report: " << o.out << "\n";
    return 0;
}

struct AblateOpts {
    ConfigInputs inputs;
    std::string data, val, out = "ablation.txt";
};

int cmd_ablate(const AblateOpts& o) {
    RunConfig rc = resolve(o.inputs);
    if (!o.data.empty()) rc.train_data = o.data;
    if (!o.val.empty()) rc.val_data = o.val;
    if (rc.train_data.empty()) {
        throw ConfigError("ablate: no training data (--data or train_data=)");
    }
    data::TrialSet trials = data::load_trials(rc.train_data);
    data::TrialSet val_set;
    const data::TrialSet* val = nullptr;
    if (!rc.val_data.empty()) {
        val_set = data::load_trials(rc.val_data);
        val = &val_set;
    }
    struct Combo {
        const char* label;
        bool sp, sw, at;
    };
    const Combo combos[] = {
        {"None", false, false, false},
        {"SP", true, false, false},
        {"SP+SW", true, true, false},
        {"SP+SW+AT", true, true, true},
    };
    std::ostringstream table;
    table << "# configuration accuracy kappa\n";
    for (const Combo& combo : combos) {
        model::ModelConfig mc = rc.model;
        mc.enable_sp = combo.sp;
        mc.enable_sw = combo.sw;
        mc.enable_at = combo.at;
        FitOutcome fo = fit(trials, val, mc, rc.train);
        table << format_row(combo.label, fo.result.best_val_accuracy, fo.kappa);
    }
    std::cout << table.str();
    write_text_file(o.out, commented(rc.to_text()) + table.str());
    std::cout << "report: " << o.out << "\n";
    return 0;
}

struct GradcheckOpts {
    std::string scope = "all";
    std::int64_t seed = -1;
};

int cmd_gradcheck(const GradcheckOpts& o) {
    std::uint64_t seed = 1;
    if (auto s = env_seed()) seed = *s;
    if (o.seed >= 0) seed = static_cast<std::uint64_t>(o.seed);

    std::vector<gradcheck::CheckResult> results;
    if (o.scope == "op" || o.scope == "all") {
        auto ops = gradcheck::check_ops(seed);
        results.insert(results.end(), ops.begin(), ops.end());
    }
    if (o.scope == "model" || o.scope == "all") {
        auto mdl = gradcheck::check_model(seed);
        results.insert(results.end(), mdl.begin(), mdl.end());
    }
    std::size_t failures = 0;
    char buf[160];
    for (const auto& r : results) {
        std::snprintf(buf, sizeof(buf), "%-44s max rel err %.3e  tol %.0e  %s\n", r.name.c_str(),
                      r.max_rel_err, r.tolerance, r.pass() ? "PASS" : "FAIL");
        std::cout << buf;
        if (!r.pass()) ++failures;
    }
    if (failures == 0) {
        std::cout << results.size() << " gradients checked, all within tolerance\n";
        return 0;
    }
    std::cout << failures << " of " << results.size() << " gradients out of tolerance\n";
    return 4;
}

struct SummaryOpts {
    ConfigInputs inputs;
    std::string out;
    bool records = false;
};

int cmd_summary(const SummaryOpts& o) {
    RunConfig rc = resolve(o.inputs);
    analysis::ModelReport report = analysis::count_params(rc.model);
    const std::string text =
        o.records ? analysis::report_records(report) : analysis::report_text(report);
    std::cout << text;
    if (!o.out.empty()) {
        write_text_file(o.out, commented(model::config_to_text(rc.model)) + text);
        std::cout << "report: " << o.out << "\n";
    }
    return 0;
}

struct SynthOpts {
    std::string spec_path, out;
    std::int64_t m = -1, channels = -1, samples = -1, classes = -1, seed = -1;
    double snr = -1.0;
};

int cmd_synth(const SynthOpts& o) {
    data::SynthSpec spec;
    if (auto s = env_seed()) spec.seed = *s;
    if (!o.spec_path.empty()) {
        std::istringstream ss(read_file(o.spec_path));
        std::string line;
        while (std::getline(ss, line)) {
            line = trim(line);
            if (line.empty() || line[0] == '#') continue;
            auto [key, value] = split_kv(line, "spec");
            if (key == "m") spec.m = static_cast<std::int64_t>(parse_u64(key, value));
            else if (key == "channels") spec.channels = static_cast<std::int64_t>(parse_u64(key, value));
            else if (key == "samples") spec.samples = static_cast<std::int64_t>(parse_u64(key, value));
            else if (key == "n_classes") spec.n_classes = static_cast<int>(parse_u64(key, value));
            else if (key == "seed") spec.seed = parse_u64(key, value);
            else if (key == "snr") spec.snr = std::strtod(value.c_str(), nullptr);
            else if (key == "sample_rate_hz") spec.sample_rate_hz = std::strtod(value.c_str(), nullptr);
            else if (key == "class_band_hz") {
                spec.class_band_hz.clear();
                std::istringstream items(value);
                std::string item;
                while (std::getline(items, item, ',')) {
                    spec.class_band_hz.push_back(std::strtod(trim(item).c_str(), nullptr));
                }
            } else {
                throw ConfigError("spec: unknown key '" + key + "'");
            }
        }
    }
    if (o.m >= 0) spec.m = o.m;
    if (o.channels >= 0) spec.channels = o.channels;
    if (o.samples >= 0) spec.samples = o.samples;
    if (o.classes >= 0) spec.n_classes = static_cast<int>(o.classes);
    if (o.seed >= 0) spec.seed = static_cast<std::uint64_t>(o.seed);
    if (o.snr >= 0.0) spec.snr = o.snr;

    data::TrialSet set = data::synth(spec);
    data::save_trials(set, o.out);
    std::cout << "wrote " << set.m << " trials (" << set.channels << "x" << set.samples << ", "
              << set.n_classes << " classes) to " << o.out << "\n";
    return 0;
}

struct ConvertOpts {
    std::string csv_dir, out;
};

int cmd_convert(const ConvertOpts& o) {
    data::TrialSet set = data::from_csv(o.csv_dir);
    data::save_trials(set, o.out);
    std::cout << "converted " << set.m << " trials (" << set.channels << "x" << set.samples
              << ", " << set.n_classes << " classes) to " << o.out << "\n";
    return 0;
}

void add_config_inputs(CLI::App* cmd, ConfigInputs& in) {
    cmd->add_option("--config", in.config_path, "key=value config file");
    cmd->add_option("--set", in.sets, "override one config key (key=value, repeatable)");
    cmd->add_option("--seed", in.seed, "training seed (highest precedence)");
}

} // namespace

void RunConfig::apply(const std::string& key, const std::string& value) {
    if (model::config_apply(model, key, value)) return;
    if (trainer::train_config_apply(train, key, value)) return;
    if (key == "train_data") train_data = value;
    else if (key == "val_data") val_data = value;
    else if (key == "test_data") test_data = value;
    else if (key == "checkpoint") checkpoint = value;
    else if (key == "history") history = value;
    else if (key == "report") report = value;
    else throw ConfigError("config: unknown key '" + key + "'");
}

std::string RunConfig::to_text() const {
    std::ostringstream out;
    out << model::config_to_text(model);
    out << trainer::train_config_to_text(train);
    out << "train_data=" << train_data << "\n";
    out << "val_data=" << val_data << "\n";
    out << "test_data=" << test_data << "\n";
    out << "checkpoint=" << checkpoint << "\n";
    out << "history=" << history << "\n";
    out << "report=" << report << "\n";
    return out.str();
}

int cli_main(int argc, const char* const* argv) {
    CLI::App app{"EEG-DCNet: dilated-convolution EEG motor-imagery classifier"};
    app.require_subcommand(1);
    int rc = 0;

    TrainOpts train_opts;
    auto* train_cmd = app.add_subcommand("train", "train a model, write checkpoint and history");
    train_cmd->add_option("--data", train_opts.data, "training trials (EEGT file)")->required();
    train_cmd->add_option("--val", train_opts.val, "validation trials (EEGT file)");
    train_cmd->add_option("--out", train_opts.out_dir, "output directory");
    add_config_inputs(train_cmd, train_opts.inputs);
    train_cmd->callback([&] { rc = cmd_train(train_opts); });

    EvalOpts eval_opts;
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a trial set");
    eval_cmd->add_option("--data", eval_opts.data, "trials to evaluate (EEGT file)")->required();
    eval_cmd->add_option("--checkpoint", eval_opts.checkpoint, "model checkpoint")->required();
    eval_cmd->add_option("--report", eval_opts.report, "also write the report to this file");
    eval_cmd->callback([&] { rc = cmd_eval(eval_opts); });

    SweepOpts sweep_opts;
    auto* sweep_cmd =
        app.add_subcommand("sweep-windows", "train once per window count, tabulate metrics");
    sweep_cmd->add_option("--data", sweep_opts.data, "training trials (EEGT file)")->required();
    sweep_cmd->add_option("--val", sweep_opts.val, "validation trials (EEGT file)");
    sweep_cmd->add_option("--n-from", sweep_opts.n_from, "first window count")->required();
    sweep_cmd->add_option("--n-to", sweep_opts.n_to, "last window count")->required();
    sweep_cmd->add_option("--out", sweep_opts.out, "report file");
    add_config_inputs(sweep_cmd, sweep_opts.inputs);
    sweep_cmd->callback([&] { rc = cmd_sweep_windows(sweep_opts); });

    AblateOpts ablate_opts;
    auto* ablate_cmd =
        app.add_subcommand("ablate", "train the four block configurations, tabulate metrics");
    ablate_cmd->add_option("--data", ablate_opts.data, "training trials (EEGT file)")->required();
    ablate_cmd->add_option("--val", ablate_opts.val, "validation trials (EEGT file)");
    ablate_cmd->add_option("--out", ablate_opts.out, "report file");
    add_config_inputs(ablate_cmd, ablate_opts.inputs);
    ablate_cmd->callback([&] { rc = cmd_ablate(ablate_opts); });

    GradcheckOpts grad_opts;
    auto* grad_cmd = app.add_subcommand("gradcheck", "verify gradients by finite differences");
    grad_cmd->add_option("--scope", grad_opts.scope, "op, model, or all")
        ->check(CLI::IsMember({"op", "model", "all"}));
    grad_cmd->add_option("--seed", grad_opts.seed, "seed for the random test points");
    grad_cmd->callback([&] { rc = cmd_gradcheck(grad_opts); });

    SummaryOpts summary_opts;
    auto* summary_cmd =
        app.add_subcommand("summary", "architecture report: shapes, params, MACs, windows");
    summary_cmd->add_option("--out", summary_opts.out, "also write the report to this file");
    summary_cmd->add_flag("--records", summary_opts.records, "emit key=value records");
    add_config_inputs(summary_cmd, summary_opts.inputs);
    summary_cmd->callback([&] { rc = cmd_summary(summary_opts); });

    SynthOpts synth_opts;
    auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic trial set");
    synth_cmd->add_option("--spec", synth_opts.spec_path, "key=value spec file");
    synth_cmd->add_option("--out", synth_opts.out, "output EEGT file")->required();
    synth_cmd->add_option("--m", synth_opts.m, "number of trials");
    synth_cmd->add_option("--channels", synth_opts.channels, "channels per trial");
    synth_cmd->add_option("--samples", synth_opts.samples, "samples per channel");
    synth_cmd->add_option("--classes", synth_opts.classes, "number of classes");
    synth_cmd->add_option("--snr", synth_opts.snr, "signal-to-noise amplitude ratio");
    synth_cmd->add_option("--seed", synth_opts.seed, "generator seed");
    synth_cmd->callback([&] { rc = cmd_synth(synth_opts); });

    ConvertOpts convert_opts;
    auto* convert_cmd = app.add_subcommand("convert", "convert a CSV directory to an EEGT file");
    convert_cmd->add_option("--csv-dir", convert_opts.csv_dir, "directory of trial CSVs")
        ->required();
    convert_cmd->add_option("--out", convert_opts.out, "output EEGT file")->required();
    convert_cmd->callback([&] { rc = cmd_convert(convert_opts); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e); // --help
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) { // ConfigError, ShapeError, filesystem
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return rc;
}

int run_cli(const std::vector<std::string>& args) {
    std::vector<const char*> argv;
    argv.reserve(args.size() + 1);
    argv.push_back("dcnet");
    for (const std::string& a : args) argv.push_back(a.c_str());
    return cli_main(static_cast<int>(argv.size()), argv.data());
}

} // namespace dcnet::cli
