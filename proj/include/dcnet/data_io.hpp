#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dcnet/tensor.hpp"

// Trial storage ("EEGT" binary format), CSV ingestion, deterministic
// synthetic EEG, and stratified splitting. Raw signals pass through
// untouched: no filtering, no normalization, no scaling.
namespace dcnet::data {

// A set of m trials, each a C x T float32 signal matrix with a class label.
// Data is kept in file order [trial][channel][time] and only widened to
// double when a batch tensor is built.
struct TrialSet {
    std::int64_t m = 0;
    std::int64_t channels = 0; // C
    std::int64_t samples = 0;  // T
    int n_classes = 0;
    std::vector<float> data; // m * C * T, [trial][channel][time]
    std::vector<int> labels; // m entries in [0, n_classes)
    std::vector<std::pair<std::string, std::string>> metadata;

    float sample(std::int64_t trial, std::int64_t channel, std::int64_t t) const {
        return data[(trial * channels + channel) * samples + t];
    }

    // Trial as the model's input layout [T, C, 1].
    Tensor trial_tensor(std::int64_t trial) const;

    // Batch of trials as [B, C, T] in stored order (the model's raw
    // input layout).
    Tensor batch_tensor(std::span<const std::int64_t> indices) const;

    // Throws UsageError on any invariant violation (extent mismatch,
    // label out of range, non-finite sample).
    void validate() const;
};

// Bit-exact binary round trip. Layout: magic "EEGT", version u32 LE,
// m/C/T/n_classes u32 LE, labels u16 LE, data float32 LE in
// [trial][channel][time] order, metadata as length-prefixed UTF-8 pairs.
void save_trials(const TrialSet& set, const std::string& path);
TrialSet load_trials(const std::string& path);

// Directory of per-trial files "trial_<i>_<label>.csv", each C rows of T
// comma-separated values. Parse errors name file, line, and column.
TrialSet from_csv(const std::string& dir);

struct SynthSpec {
    std::int64_t m = 128;
    std::int64_t channels = 4;
    std::int64_t samples = 256;
    int n_classes = 4;
    std::uint64_t seed = 0;
    double snr = 4.0; // signal-to-noise amplitude ratio; +inf turns noise off
    std::vector<double> class_band_hz; // empty -> sample_rate_hz * (k+1) / 16
    double sample_rate_hz = 128.0;
};

// Class k puts a fixed-frequency sinusoid (random phase per trial) on the
// channels with index % n_classes == k, plus Gaussian noise scaled by
// 1/snr on every channel. Classes are balanced within one trial.
TrialSet synth(const SynthSpec& spec);

// Stratified split: per class, trials are shuffled (deterministic by seed)
// and the train side takes its largest-remainder share of round(fraction*m),
// clamped so both sides keep at least one trial of every class.
std::pair<TrialSet, TrialSet> split(const TrialSet& set, double fraction, std::uint64_t seed);

} // namespace dcnet::data
