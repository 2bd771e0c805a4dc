#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "dcnet/cli.hpp"
#include "dcnet/data_io.hpp"
#include "dcnet/errors.hpp"

namespace fs = std::filesystem;
using namespace dcnet;

namespace {

struct CliRun {
    int code = -1;
    std::string out;
    std::string err;
};

// In-process invocation with captured streams, so the tests see exactly
// what a shell would.
CliRun run(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    std::streambuf* old_out = std::cout.rdbuf(out.rdbuf());
    std::streambuf* old_err = std::cerr.rdbuf(err.rdbuf());
    CliRun r;
    try {
        r.code = cli::run_cli(args);
    } catch (...) {
        std::cout.rdbuf(old_out);
        std::cerr.rdbuf(old_err);
        throw;
    }
    std::cout.rdbuf(old_out);
    std::cerr.rdbuf(old_err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

std::string work_dir() {
    const fs::path dir = fs::temp_directory_path() / "dcnet_cli_tests";
    fs::create_directories(dir);
    return dir.string();
}

std::string work_path(const std::string& name) {
    return (fs::path(work_dir()) / name).string();
}

std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(bool(in));
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    REQUIRE(bool(out));
    out << content;
}

const char* tiny_config_text() {
    return "channels=3\n"
           "samples=64\n"
           "n_classes=2\n"
           "f1=2\n"
           "depth_mult=2\n"
           "temporal_kernel=8\n"
           "pool1=8\n"
           "dilations=1,2,3\n"
           "atrous_kernel=4\n"
           "fuse_width=8\n"
           "n_windows=2\n"
           "se_reduction=2\n"
           "dropout_p=0\n"
           "learning_rate=0.01\n"
           "batch_size=8\n"
           "max_epochs=4\n"
           "patience=4\n"
           "seed=7\n";
}

// Shared synthetic data + config files, generated once through the CLI
// itself.
struct Fixture {
    std::string train_data, val_data, config;
};

const Fixture& fixture() {
    static Fixture f = [] {
        Fixture fx;
        fx.train_data = work_path("train.eegt");
        fx.val_data = work_path("val.eegt");
        fx.config = work_path("tiny.cfg");
        CliRun a = run({"synth", "--m", "24", "--channels", "3", "--samples", "64", "--classes",
                        "2", "--snr", "5", "--seed", "11", "--out", fx.train_data});
        REQUIRE(a.code == 0);
        CliRun b = run({"synth", "--m", "8", "--channels", "3", "--samples", "64", "--classes",
                        "2", "--snr", "5", "--seed", "12", "--out", fx.val_data});
        REQUIRE(b.code == 0);
        write_text(fx.config, tiny_config_text());
        return fx;
    }();
    return f;
}

bool contains(const std::string& haystack, const std::string& needle) {
    return haystack.find(needle) != std::string::npos;
}

} // namespace

TEST_SUITE("cli") {

TEST_CASE("run config applies keys and serializes") {
    cli::RunConfig rc;
    rc.apply("samples", "512");
    rc.apply("learning_rate", "0.25");
    rc.apply("train_data", "a.eegt");
    rc.apply("checkpoint", "model.dcnk");
    CHECK(rc.model.samples == 512);
    CHECK(rc.train.learning_rate == doctest::Approx(0.25));
    CHECK(rc.train_data == "a.eegt");
    CHECK(rc.checkpoint == "model.dcnk");
    CHECK_THROWS_AS(rc.apply("no_such_key", "1"), ConfigError);
    CHECK_THROWS_AS(rc.apply("samples", "abc"), ConfigError);

    // to_text() parses back into an identical configuration.
    cli::RunConfig parsed;
    std::istringstream lines(rc.to_text());
    std::string line;
    while (std::getline(lines, line)) {
        const std::size_t eq = line.find('=');
        REQUIRE(eq != std::string::npos);
        parsed.apply(line.substr(0, eq), line.substr(eq + 1));
    }
    CHECK(parsed.to_text() == rc.to_text());
}

TEST_CASE("help exits zero, usage errors exit two") {
    CliRun help = run({"--help"});
    CHECK(help.code == 0);
    CHECK(contains(help.out, "Subcommands"));
    CHECK(contains(help.out, "sweep-windows"));

    CHECK(run({}).code == 2);               // subcommand required
    CHECK(run({"bogus"}).code == 2);        // unknown subcommand
    CHECK(run({"train"}).code == 2);        // --data is required
    CHECK(run({"gradcheck", "--scope", "sideways"}).code == 2);

    CliRun missing = run({"train", "--data", work_path("absent.eegt"), "--config",
                          fixture().config});
    CHECK(missing.code == 2);
    CHECK(contains(missing.err, "absent.eegt"));

    CliRun badcfg = run({"summary", "--config", work_path("no_such.cfg")});
    CHECK(badcfg.code == 2);
    CHECK(contains(badcfg.err, "no_such.cfg"));

    CliRun badset = run({"summary", "--set", "samples"});
    CHECK(badset.code == 2);
    CHECK(contains(badset.err, "key=value"));
}

TEST_CASE("synth writes a loadable trial set") {
    const Fixture& fx = fixture();
    data::TrialSet set = data::load_trials(fx.train_data);
    CHECK(set.m == 24);
    CHECK(set.channels == 3);
    CHECK(set.samples == 64);
    CHECK(set.n_classes == 2);

    // Spec file path, with a flag override on top.
    const std::string spec = work_path("synth.spec");
    write_text(spec, "m=6\nchannels=2\nsamples=32\nn_classes=2\nseed=5\nsnr=4\n");
    const std::string out = work_path("spec.eegt");
    CHECK(run({"synth", "--spec", spec, "--out", out}).code == 0);
    CHECK(data::load_trials(out).m == 6);
    CHECK(run({"synth", "--spec", spec, "--m", "4", "--out", out}).code == 0);
    CHECK(data::load_trials(out).m == 4);

    write_text(spec, "m=6\nvoltage=11\n");
    CliRun bad = run({"synth", "--spec", spec, "--out", out});
    CHECK(bad.code == 2);
    CHECK(contains(bad.err, "voltage"));
}

TEST_CASE("convert round-trips csv directories and rejects ragged rows") {
    const fs::path dir = fs::path(work_dir()) / "csvs";
    fs::remove_all(dir);
    fs::create_directories(dir);
    write_text((dir / "trial_0_1.csv").string(), "0.1,0.2\n0.3,0.4\n");
    write_text((dir / "trial_1_0.csv").string(), "0.5,0.6\n0.7,0.8\n");
    const std::string out = work_path("converted.eegt");
    CliRun ok = run({"convert", "--csv-dir", dir.string(), "--out", out});
    CHECK(ok.code == 0);
    data::TrialSet set = data::load_trials(out);
    CHECK(set.m == 2);
    CHECK(set.channels == 2);
    CHECK(set.samples == 2);
    CHECK(set.labels == std::vector<int>{1, 0});
    CHECK(set.data[0] == doctest::Approx(0.1));

    write_text((dir / "trial_2_0.csv").string(), "0.1,0.2\n0.3\n");
    CliRun ragged = run({"convert", "--csv-dir", dir.string(), "--out", work_path("bad.eegt")});
    CHECK(ragged.code == 3);
    CHECK(contains(ragged.err, "trial_2_0.csv"));
}

TEST_CASE("train twice with one seed gives identical artifacts") {
    const Fixture& fx = fixture();
    auto train_into = [&](const std::string& dir, const std::string& seed) {
        return run({"train", "--data", fx.train_data, "--val", fx.val_data, "--config",
                    fx.config, "--seed", seed, "--out", work_path(dir)});
    };
    CliRun a = train_into("det_a", "21");
    CliRun b = train_into("det_b", "21");
    REQUIRE(a.code == 0);
    REQUIRE(b.code == 0);
    CHECK(read_text(work_path("det_a/history.txt")) == read_text(work_path("det_b/history.txt")));
    CHECK(read_text(work_path("det_a/checkpoint.dcnk")) ==
          read_text(work_path("det_b/checkpoint.dcnk")));

    CliRun c = train_into("det_c", "22");
    REQUIRE(c.code == 0);
    CHECK(read_text(work_path("det_a/history.txt")) != read_text(work_path("det_c/history.txt")));

    // stdout echoes the resolved configuration and the artifact paths.
    CHECK(contains(a.out, "learning_rate=0.01"));
    CHECK(contains(a.out, "checkpoint: "));
    CHECK(contains(a.out, "history: "));

    // The history artifact opens with the commented configuration, then
    // one record per epoch.
    const std::string hist = read_text(work_path("det_a/history.txt"));
    CHECK(hist.rfind("# resolved configuration", 0) == 0);
    CHECK(contains(hist, "# n_windows=2"));
    int records = 0;
    std::istringstream lines(hist);
    std::string line;
    while (std::getline(lines, line)) {
        if (!line.empty() && line[0] != '#') ++records;
    }
    CHECK(records == 4); // patience == max_epochs, so all epochs run
}

TEST_CASE("seed precedence: flag beats DCNET_SEED beats default") {
    const Fixture& fx = fixture();
    auto train_with = [&](const std::string& dir, const std::vector<std::string>& extra) {
        std::vector<std::string> args = {"train", "--data", fx.train_data, "--val",
                                         fx.val_data,
                                         "--out", work_path(dir)};
        // Config without its own seed line, so the fallback chain decides.
        for (const char* set :
             {"channels=3", "samples=64", "n_classes=2", "f1=2", "depth_mult=2",
              "temporal_kernel=8", "pool1=8", "dilations=1,2,3", "atrous_kernel=4",
              "fuse_width=8", "n_windows=2", "se_reduction=2", "dropout_p=0",
              "learning_rate=0.01", "batch_size=8", "max_epochs=3", "patience=3"}) {
            args.push_back("--set");
            args.push_back(set);
        }
        args.insert(args.end(), extra.begin(), extra.end());
        return run(args);
    };

    REQUIRE(setenv("DCNET_SEED", "33", 1) == 0);
    CliRun env_run = train_with("seed_env", {});
    REQUIRE(unsetenv("DCNET_SEED") == 0);
    CliRun flag_run = train_with("seed_flag", {"--seed", "33"});
    REQUIRE(env_run.code == 0);
    REQUIRE(flag_run.code == 0);
    CHECK(contains(env_run.out, "seed from DCNET_SEED: 33"));
    CHECK(read_text(work_path("seed_env/history.txt")) ==
          read_text(work_path("seed_flag/history.txt")));

    // An explicit --seed overrides the environment.
    REQUIRE(setenv("DCNET_SEED", "33", 1) == 0);
    CliRun both = train_with("seed_both", {"--seed", "44"});
    REQUIRE(unsetenv("DCNET_SEED") == 0);
    CliRun flag44 = train_with("seed_44", {"--seed", "44"});
    REQUIRE(both.code == 0);
    REQUIRE(flag44.code == 0);
    CHECK(read_text(work_path("seed_both/history.txt")) ==
          read_text(work_path("seed_44/history.txt")));

    REQUIRE(setenv("DCNET_SEED", "not-a-number", 1) == 0);
    CliRun garbage = train_with("seed_bad", {});
    REQUIRE(unsetenv("DCNET_SEED") == 0);
    CHECK(garbage.code == 2);
    CHECK(contains(garbage.err, "DCNET_SEED"));
}

TEST_CASE("eval reports metrics and rejects mismatched data") {
    const Fixture& fx = fixture();
    REQUIRE(run({"train", "--data", fx.train_data, "--val", fx.val_data, "--config", fx.config,
                 "--out", work_path("eval_run")})
                .code == 0);
    const std::string ckpt = work_path("eval_run/checkpoint.dcnk");
    const std::string report = work_path("eval_run/report.txt");

    CliRun a = run({"eval", "--data", fx.train_data, "--checkpoint", ckpt, "--report", report});
    REQUIRE(a.code == 0);
    CHECK(contains(a.out, "loss="));
    CHECK(contains(a.out, "accuracy="));
    CHECK(contains(a.out, "kappa="));
    CHECK(contains(a.out, "confusion (rows true, cols predicted):"));
    CHECK(contains(a.out, "per-class recall:"));
    const std::string written = read_text(report);
    CHECK(contains(written, "accuracy="));
    CHECK(contains(written, "# channels=3"));

    CliRun b = run({"eval", "--data", fx.train_data, "--checkpoint", ckpt});
    CHECK(b.code == 0);
    CHECK(a.out.substr(0, a.out.find("report:")) == b.out); // repeat evaluation is stable

    const std::string wide = work_path("wide.eegt");
    REQUIRE(run({"synth", "--m", "6", "--channels", "4", "--samples", "64", "--classes", "2",
                 "--seed", "3", "--out", wide})
                .code == 0);
    CliRun mismatch = run({"eval", "--data", wide, "--checkpoint", ckpt});
    CHECK(mismatch.code == 2);
    CHECK(contains(mismatch.err, "model expects 3x64"));

    const std::string trunc = work_path("trunc.eegt");
    write_text(trunc, read_text(fx.train_data).substr(0, 8));
    CliRun corrupt = run({"eval", "--data", trunc, "--checkpoint", ckpt});
    CHECK(corrupt.code == 3);
}

TEST_CASE("sweep-windows emits one row per window count") {
    const Fixture& fx = fixture();
    const std::string out = work_path("sweep.txt");
    CliRun r = run({"sweep-windows", "--data", fx.train_data, "--val", fx.val_data, "--config",
                    fx.config, "--set", "max_epochs=2", "--set", "patience=2", "--n-from", "1",
                    "--n-to", "3", "--out", out});
    REQUIRE(r.code == 0);
    CHECK(contains(r.out, "# n accuracy kappa"));
    int rows = 0;
    std::istringstream lines(read_text(out));
    std::string line;
    while (std::getline(lines, line)) {
        if (!line.empty() && std::isdigit(static_cast<unsigned char>(line[0]))) ++rows;
    }
    CHECK(rows == 3);

    // fuse_width is 8 in the tiny config, so 9 windows cannot fit.
    CliRun wide = run({"sweep-windows", "--data", fx.train_data, "--config", fx.config,
                       "--n-from", "1", "--n-to", "9"});
    CHECK(wide.code == 2);
    CHECK(contains(wide.err, "fuse_width"));
    CHECK(run({"sweep-windows", "--data", fx.train_data, "--config", fx.config, "--n-from", "0",
               "--n-to", "2"})
              .code == 2);
}

TEST_CASE("ablate trains the four block configurations") {
    const Fixture& fx = fixture();
    const std::string out = work_path("ablation.txt");
    CliRun r = run({"ablate", "--data", fx.train_data, "--val", fx.val_data, "--config",
                    fx.config, "--set", "max_epochs=2", "--set", "patience=2", "--out", out});
    REQUIRE(r.code == 0);
    const std::string table = read_text(out);
    const std::size_t none = table.find("\nNone ");
    const std::size_t sp = table.find("\nSP ");
    const std::size_t sp_sw = table.find("\nSP+SW ");
    const std::size_t sp_sw_at = table.find("\nSP+SW+AT ");
    REQUIRE(none != std::string::npos);
    REQUIRE(sp != std::string::npos);
    REQUIRE(sp_sw != std::string::npos);
    REQUIRE(sp_sw_at != std::string::npos);
    CHECK(none < sp);
    CHECK(sp < sp_sw);
    CHECK(sp_sw < sp_sw_at);

    CliRun again = run({"ablate", "--data", fx.train_data, "--val", fx.val_data, "--config",
                        fx.config, "--set", "max_epochs=2", "--set", "patience=2", "--out",
                        work_path("ablation2.txt")});
    REQUIRE(again.code == 0);
    CHECK(read_text(work_path("ablation2.txt")) == table);
}

TEST_CASE("gradcheck scope op passes and honors DCNET_SEED") {
    CliRun r = run({"gradcheck", "--scope", "op", "--seed", "3"});
    CHECK(r.code == 0);
    CHECK(contains(r.out, "all within tolerance"));
    CHECK(!contains(r.out, "FAIL"));

    REQUIRE(setenv("DCNET_SEED", "3", 1) == 0);
    CliRun env_run = run({"gradcheck", "--scope", "op"});
    REQUIRE(unsetenv("DCNET_SEED") == 0);
    CHECK(env_run.code == 0);
    CHECK(env_run.out == r.out);
}

TEST_CASE("summary prints the default shape pipeline") {
    CliRun r = run({"summary"});
    REQUIRE(r.code == 0);
    CHECK(contains(r.out, "cv.conv1"));
    CHECK(contains(r.out, "(1125, 22, 8)"));
    CHECK(contains(r.out, "(140, 1, 16)"));   // after the CV block
    CHECK(contains(r.out, "(1, 16, 32)"));    // after the fuse convolution
    CHECK(contains(r.out, "windows: 6 of length 27"));
    CHECK(contains(r.out, "21064 trainable params"));
    CHECK(contains(r.out, "published reference"));

    CliRun rec = run({"summary", "--records"});
    REQUIRE(rec.code == 0);
    CHECK(contains(rec.out, "total.params=21064"));
    CHECK(contains(rec.out, "window.length=27"));

    const std::string out = work_path("summary.txt");
    CliRun filed = run({"summary", "--set", "n_windows=3", "--out", out});
    REQUIRE(filed.code == 0);
    const std::string text = read_text(out);
    CHECK(contains(text, "# n_windows=3"));
    CHECK(contains(text, "windows: 3 of length 30"));
}

} // TEST_SUITE
