#include "dcnet/data_io.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <regex>

#include "dcnet/errors.hpp"

namespace fs = std::filesystem;

namespace dcnet::data {

namespace {

constexpr char kMagic[4] = {'E', 'E', 'G', 'T'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

void put_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), 4);
}

void put_u16(std::ostream& os, std::uint16_t v) {
    os.write(reinterpret_cast<const char*>(&v), 2);
}

void put_str(std::ostream& os, const std::string& s) {
    put_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void read_exact(std::istream& is, void* dst, std::size_t n, const std::string& path) {
    is.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is.gcount()) != n) {
        throw FormatError(path + ": truncated file");
    }
}

std::uint32_t get_u32(std::istream& is, const std::string& path) {
    std::uint32_t v;
    read_exact(is, &v, 4, path);
    return v;
}

std::uint16_t get_u16(std::istream& is, const std::string& path) {
    std::uint16_t v;
    read_exact(is, &v, 2, path);
    return v;
}

std::string get_str(std::istream& is, const std::string& path) {
    const std::uint32_t len = get_u32(is, path);
    if (len > (1u << 20)) throw FormatError(path + ": unreasonable string length in metadata");
    std::string s(len, '\0');
    if (len > 0) read_exact(is, s.data(), len, path);
    return s;
}

} // namespace

Tensor TrialSet::trial_tensor(std::int64_t trial) const {
    if (trial < 0 || trial >= m) {
        throw UsageError("trial index " + std::to_string(trial) + " out of range [0, " +
                         std::to_string(m) + ")");
    }
    Tensor out({samples, channels, 1});
    for (std::int64_t c = 0; c < channels; ++c)
        for (std::int64_t t = 0; t < samples; ++t)
            out.at({t, c, 0}) = static_cast<double>(sample(trial, c, t));
    return out;
}

Tensor TrialSet::batch_tensor(std::span<const std::int64_t> indices) const {
    if (indices.empty()) throw UsageError("batch_tensor needs at least one trial");
    Tensor out({static_cast<std::int64_t>(indices.size()), channels, samples});
    double* op = out.data();
    const std::int64_t per_trial = channels * samples;
    for (std::size_t b = 0; b < indices.size(); ++b) {
        const std::int64_t trial = indices[b];
        if (trial < 0 || trial >= m) {
            throw UsageError("trial index " + std::to_string(trial) + " out of range [0, " +
                             std::to_string(m) + ")");
        }
        const float* src = data.data() + trial * per_trial;
        double* dst = op + static_cast<std::int64_t>(b) * per_trial;
        for (std::int64_t i = 0; i < per_trial; ++i) dst[i] = static_cast<double>(src[i]);
    }
    return out;
}

void TrialSet::validate() const {
    if (m < 0 || channels < 1 || samples < 1 || n_classes < 1) {
        throw UsageError("trial set extents invalid: m=" + std::to_string(m) +
                         " C=" + std::to_string(channels) + " T=" + std::to_string(samples) +
                         " classes=" + std::to_string(n_classes));
    }
    if (static_cast<std::int64_t>(labels.size()) != m ||
        static_cast<std::int64_t>(data.size()) != m * channels * samples) {
        throw UsageError("trial set arrays do not match the declared extents");
    }
    for (std::int64_t i = 0; i < m; ++i) {
        if (labels[i] < 0 || labels[i] >= n_classes) {
            throw UsageError("label " + std::to_string(labels[i]) + " of trial " +
                             std::to_string(i) + " outside [0, " + std::to_string(n_classes) + ")");
        }
    }
    for (float v : data) {
        if (!std::isfinite(v)) throw UsageError("non-finite sample in trial data");
    }
}

void save_trials(const TrialSet& set, const std::string& path) {
    set.validate();
    if (set.n_classes > 0xffff) throw UsageError("more classes than the label encoding supports");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ConfigError("cannot open " + path + " for writing");
    os.write(kMagic, 4);
    put_u32(os, kVersion);
    put_u32(os, static_cast<std::uint32_t>(set.m));
    put_u32(os, static_cast<std::uint32_t>(set.channels));
    put_u32(os, static_cast<std::uint32_t>(set.samples));
    put_u32(os, static_cast<std::uint32_t>(set.n_classes));
    for (int l : set.labels) put_u16(os, static_cast<std::uint16_t>(l));
    os.write(reinterpret_cast<const char*>(set.data.data()),
             static_cast<std::streamsize>(set.data.size() * sizeof(float)));
    put_u32(os, static_cast<std::uint32_t>(set.metadata.size()));
    for (const auto& [k, v] : set.metadata) {
        put_str(os, k);
        put_str(os, v);
    }
    if (!os) throw ConfigError("write to " + path + " failed");
}

TrialSet load_trials(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("cannot open " + path + " for reading");

    char magic[4];
    read_exact(is, magic, 4, path);
    if (std::memcmp(magic, kMagic, 4) != 0) {
        throw FormatError(path + ": bad magic, not a trial file");
    }
    const std::uint32_t version = get_u32(is, path);
    if (version != kVersion) {
        throw FormatError(path + ": unsupported version " + std::to_string(version));
    }
    TrialSet set;
    set.m = get_u32(is, path);
    set.channels = get_u32(is, path);
    set.samples = get_u32(is, path);
    set.n_classes = static_cast<int>(get_u32(is, path));
    if (set.channels < 1 || set.samples < 1 || set.n_classes < 1) {
        throw FormatError(path + ": invalid extents in header");
    }

    set.labels.resize(static_cast<std::size_t>(set.m));
    for (auto& l : set.labels) {
        l = static_cast<int>(get_u16(is, path));
        if (l >= set.n_classes) {
            throw FormatError(path + ": label " + std::to_string(l) + " >= n_classes " +
                              std::to_string(set.n_classes));
        }
    }
    set.data.resize(static_cast<std::size_t>(set.m * set.channels * set.samples));
    if (!set.data.empty()) {
        read_exact(is, set.data.data(), set.data.size() * sizeof(float), path);
    }
    for (float v : set.data) {
        if (!std::isfinite(v)) throw FormatError(path + ": non-finite sample value");
    }
    const std::uint32_t n_meta = get_u32(is, path);
    for (std::uint32_t i = 0; i < n_meta; ++i) {
        std::string k = get_str(is, path);
        std::string v = get_str(is, path);
        set.metadata.emplace_back(std::move(k), std::move(v));
    }
    is.peek();
    if (!is.eof()) throw FormatError(path + ": trailing bytes after metadata");
    return set;
}

namespace {

double parse_field(const std::string& field, const std::string& file, std::size_t line,
                   std::size_t column) {
    const char* b = field.data();
    const char* e = b + field.size();
    while (b < e && (*b == ' ' || *b == '\t')) ++b;
    while (e > b && (e[-1] == ' ' || e[-1] == '\t' || e[-1] == '\r')) --e;
    double value = 0.0;
    const auto [ptr, ec] = std::from_chars(b, e, value);
    if (ec != std::errc() || ptr != e || b == e) {
        throw FormatError(file + ":" + std::to_string(line) + ":" + std::to_string(column) +
                          ": not a number: '" + std::string(b, e) + "'");
    }
    return value;
}

} // namespace

TrialSet from_csv(const std::string& dir) {
    if (!fs::is_directory(dir)) {
        throw ConfigError("csv directory does not exist: " + dir);
    }
    const std::regex name_re(R"(trial_(\d+)_(\d+)\.csv)");
    struct Entry {
        std::int64_t index;
        int label;
        fs::path path;
    };
    std::vector<Entry> entries;
    for (const auto& de : fs::directory_iterator(dir)) {
        std::smatch m;
        const std::string name = de.path().filename().string();
        if (std::regex_match(name, m, name_re)) {
            entries.push_back({std::stoll(m[1]), std::stoi(m[2]), de.path()});
        }
    }
    if (entries.empty()) {
        throw ConfigError("no trial_<i>_<label>.csv files in " + dir);
    }
    std::sort(entries.begin(), entries.end(),
              [](const Entry& a, const Entry& b) { return a.index < b.index; });
    for (std::size_t i = 1; i < entries.size(); ++i) {
        if (entries[i].index == entries[i - 1].index) {
            throw FormatError("duplicate trial index " + std::to_string(entries[i].index) +
                              ": " + entries[i - 1].path.filename().string() + " and " +
                              entries[i].path.filename().string());
        }
    }

    TrialSet set;
    set.m = static_cast<std::int64_t>(entries.size());
    int max_label = 0;
    for (const Entry& e : entries) max_label = std::max(max_label, e.label);
    set.n_classes = max_label + 1;

    for (const Entry& e : entries) {
        std::ifstream is(e.path);
        if (!is) throw ConfigError("cannot open " + e.path.string());
        const std::string file = e.path.filename().string();
        std::vector<float> trial;
        std::int64_t rows = 0, cols = -1;
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(is, line)) {
            ++line_no;
            // Skip a blank trailing line.
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            std::int64_t row_cols = 0;
            std::size_t start = 0;
            while (true) {
                const std::size_t comma = line.find(',', start);
                const std::string field =
                    line.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
                ++row_cols;
                trial.push_back(static_cast<float>(
                    parse_field(field, file, line_no, static_cast<std::size_t>(row_cols))));
                if (comma == std::string::npos) break;
                start = comma + 1;
            }
            if (cols < 0) {
                cols = row_cols;
            } else if (row_cols != cols) {
                throw FormatError(file + ":" + std::to_string(line_no) + ": ragged row, " +
                                  std::to_string(row_cols) + " values vs " + std::to_string(cols));
            }
            ++rows;
        }
        if (rows == 0) throw FormatError(file + ": empty trial file");
        if (set.channels == 0) {
            set.channels = rows;
            set.samples = cols;
        } else if (rows != set.channels || cols != set.samples) {
            throw FormatError(file + ": trial shape " + std::to_string(rows) + "x" +
                              std::to_string(cols) + " does not match " +
                              std::to_string(set.channels) + "x" + std::to_string(set.samples));
        }
        set.labels.push_back(e.label);
        set.data.insert(set.data.end(), trial.begin(), trial.end());
    }
    set.validate();
    return set;
}

TrialSet synth(const SynthSpec& spec) {
    if (spec.m < spec.n_classes || spec.n_classes < 1) {
        throw ConfigError("synth: need m >= n_classes >= 1, got m=" + std::to_string(spec.m) +
                          " classes=" + std::to_string(spec.n_classes));
    }
    if (!(spec.snr > 0.0)) throw ConfigError("synth: snr must be positive");
    if (spec.channels < 1 || spec.samples < 1) {
        throw ConfigError("synth: channels and samples must be >= 1");
    }
    std::vector<double> bands = spec.class_band_hz;
    if (bands.empty()) {
        for (int k = 0; k < spec.n_classes; ++k)
            bands.push_back(spec.sample_rate_hz * (k + 1) / 16.0);
    }
    if (static_cast<int>(bands.size()) != spec.n_classes) {
        throw ConfigError("synth: class_band_hz needs one frequency per class");
    }

    TrialSet set;
    set.m = spec.m;
    set.channels = spec.channels;
    set.samples = spec.samples;
    set.n_classes = spec.n_classes;
    set.data.resize(static_cast<std::size_t>(spec.m * spec.channels * spec.samples));
    set.labels.resize(static_cast<std::size_t>(spec.m));
    set.metadata.emplace_back("source", "synth");
    set.metadata.emplace_back("seed", std::to_string(spec.seed));

    Rng rng(spec.seed);
    const bool noise = !std::isinf(spec.snr);
    for (std::int64_t i = 0; i < spec.m; ++i) {
        const int k = static_cast<int>(i % spec.n_classes);
        set.labels[static_cast<std::size_t>(i)] = k;
        const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double omega = 2.0 * std::numbers::pi * bands[static_cast<std::size_t>(k)] /
                             spec.sample_rate_hz;
        for (std::int64_t c = 0; c < spec.channels; ++c) {
            const bool active = (c % spec.n_classes) == k;
            for (std::int64_t t = 0; t < spec.samples; ++t) {
                double v = active ? std::sin(omega * static_cast<double>(t) + phase) : 0.0;
                if (noise) v += rng.normal() / spec.snr;
                set.data[(static_cast<std::size_t>(i) * spec.channels + c) * spec.samples + t] =
                    static_cast<float>(v);
            }
        }
    }
    return set;
}

std::pair<TrialSet, TrialSet> split(const TrialSet& set, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction < 1.0)) {
        throw ConfigError("split fraction must be in (0, 1), got " + std::to_string(fraction));
    }
    set.validate();

    std::vector<std::vector<std::int64_t>> by_class(static_cast<std::size_t>(set.n_classes));
    for (std::int64_t i = 0; i < set.m; ++i)
        by_class[static_cast<std::size_t>(set.labels[i])].push_back(i);
    for (int k = 0; k < set.n_classes; ++k) {
        if (by_class[static_cast<std::size_t>(k)].size() < 2) {
            throw UsageError("stratified split needs at least 2 trials of class " +
                             std::to_string(k));
        }
    }

    // Largest-remainder apportionment of the train-side total.
    const std::int64_t target = std::llround(fraction * static_cast<double>(set.m));
    std::vector<std::int64_t> take(static_cast<std::size_t>(set.n_classes));
    std::vector<std::pair<double, int>> remainders;
    std::int64_t assigned = 0;
    for (int k = 0; k < set.n_classes; ++k) {
        const double quota = fraction * static_cast<double>(by_class[k].size());
        take[k] = static_cast<std::int64_t>(quota);
        assigned += take[k];
        remainders.push_back({quota - static_cast<double>(take[k]), k});
    }
    std::sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second; // ties by class index
    });
    const std::int64_t extra = target - assigned;
    for (std::int64_t i = 0; i < extra; ++i) {
        ++take[remainders[static_cast<std::size_t>(i) % remainders.size()].second];
    }
    // Both sides keep at least one trial per class.
    for (int k = 0; k < set.n_classes; ++k) {
        const std::int64_t n = static_cast<std::int64_t>(by_class[k].size());
        take[k] = std::clamp<std::int64_t>(take[k], 1, n - 1);
    }

    Rng rng(seed);
    std::vector<bool> in_train(static_cast<std::size_t>(set.m), false);
    for (int k = 0; k < set.n_classes; ++k) {
        auto& idx = by_class[static_cast<std::size_t>(k)];
        for (std::size_t i = idx.size() - 1; i > 0; --i) {
            std::swap(idx[i], idx[static_cast<std::size_t>(rng.below(static_cast<std::int64_t>(i) + 1))]);
        }
        for (std::int64_t i = 0; i < take[static_cast<std::size_t>(k)]; ++i)
            in_train[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])] = true;
    }

    auto emit = [&set](const std::vector<bool>& pick, bool want) {
        TrialSet out;
        out.channels = set.channels;
        out.samples = set.samples;
        out.n_classes = set.n_classes;
        out.metadata = set.metadata;
        for (std::int64_t i = 0; i < set.m; ++i) {
            if (pick[static_cast<std::size_t>(i)] != want) continue;
            out.labels.push_back(set.labels[static_cast<std::size_t>(i)]);
            const float* src = set.data.data() + i * set.channels * set.samples;
            out.data.insert(out.data.end(), src, src + set.channels * set.samples);
            ++out.m;
        }
        return out;
    };
    return {emit(in_train, true), emit(in_train, false)};
}

} // namespace dcnet::data
