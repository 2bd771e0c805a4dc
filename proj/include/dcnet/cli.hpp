#pragma once

#include <string>
#include <vector>

#include "dcnet/model.hpp"
#include "dcnet/trainer.hpp"

// Command-line front end: train / eval / sweep-windows / ablate /
// gradcheck / summary / synth / convert. Exit codes: 0 success, 2 usage or
// configuration, 3 data format, 4 numeric failure.
namespace dcnet::cli {

// Merged run configuration: model architecture, training hyperparameters,
// and artifact paths. Every field has a default; the fully resolved config
// is echoed into every output artifact.
struct RunConfig {
    model::ModelConfig model;
    trainer::TrainConfig train;
    std::string train_data;
    std::string val_data;
    std::string test_data;
    std::string checkpoint = "checkpoint.dcnk";
    std::string history = "history.txt";
    std::string report;

    // Assign one key from any of the three groups; throws ConfigError on an
    // unknown key or a bad value.
    void apply(const std::string& key, const std::string& value);
    std::string to_text() const;
};

// argv-style entry point (argv[0] is the program name).
int cli_main(int argc, const char* const* argv);

// Convenience wrapper for in-process calls: args exclude the program name.
int run_cli(const std::vector<std::string>& args);

} // namespace dcnet::cli
