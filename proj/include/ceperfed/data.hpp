#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "ceperfed/errors.hpp"

namespace ceperfed {

/// Synthetic image dataset: one deterministic spatial template per class plus
/// seeded Gaussian noise. Stands in for real scans; heterogeneity comes from
/// the label partition and per-client feature shifts.
struct SyntheticSpec {
    std::size_t n_classes = 3;
    std::size_t samples_per_class = 100;
    std::size_t channels = 3;
    std::size_t height = 16;
    std::size_t width = 16;
    double signal = 1.0;
    double noise_std = 0.25;
    std::size_t pulse_variant = 0;  // fixed channel-wise contrast transform
    std::uint64_t seed = 0;
};

struct PartitionSpec {
    std::size_t n_clients = 5;
    double concentration = 0.5;  // Dirichlet concentration
    double train_fraction = 0.8;
    std::uint64_t seed = 0;
    std::size_t max_retries = 100;
};

struct Dataset {
    std::size_t count = 0;
    std::size_t channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t n_classes = 0;
    std::vector<double> images;  // count x channels x height x width
    std::vector<int> labels;

    std::size_t image_size() const { return channels * height * width; }
    const double* image(std::size_t i) const { return images.data() + i * image_size(); }
};

inline void validate(const SyntheticSpec& spec) {
    if (spec.n_classes < 2) throw ConfigError("dataset: need at least two classes");
    if (spec.samples_per_class == 0) throw ConfigError("dataset: samples_per_class is zero");
    if (spec.channels == 0 || spec.height == 0 || spec.width == 0)
        throw ConfigError("dataset: image dimensions must be positive");
    if (spec.noise_std < 0.0) throw ConfigError("dataset: negative noise");
}

inline Dataset generate(const SyntheticSpec& spec) {
    validate(spec);
    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> gauss(0.0, 1.0);

    const std::size_t pixels = spec.channels * spec.height * spec.width;
    std::vector<std::vector<double>> templates(spec.n_classes);
    for (auto& t : templates) {
        t.resize(pixels);
        for (double& x : t) x = spec.signal * gauss(rng);
    }

    Dataset ds;
    ds.count = spec.n_classes * spec.samples_per_class;
    ds.channels = spec.channels;
    ds.height = spec.height;
    ds.width = spec.width;
    ds.n_classes = spec.n_classes;
    ds.images.resize(ds.count * pixels);
    ds.labels.resize(ds.count);

    std::size_t cursor = 0;
    for (std::size_t k = 0; k < spec.n_classes; ++k)
        for (std::size_t s = 0; s < spec.samples_per_class; ++s, ++cursor) {
            double* img = ds.images.data() + cursor * pixels;
            const double* t = templates[k].data();
            for (std::size_t p = 0; p < pixels; ++p)
                img[p] = t[p] + (spec.noise_std > 0.0 ? spec.noise_std * gauss(rng) : 0.0);
            ds.labels[cursor] = static_cast<int>(k);
        }

    // Pulse variants reweight channels deterministically, imitating the
    // contrast differences between acquisition settings.
    if (spec.pulse_variant != 0) {
        const std::size_t plane = spec.height * spec.width;
        for (std::size_t c = 0; c < spec.channels; ++c) {
            const double phase = static_cast<double>(spec.pulse_variant) +
                                 0.7 * static_cast<double>(c);
            const double gain = 1.0 + 0.2 * std::sin(phase);
            const double offset = 0.1 * std::cos(phase);
            for (std::size_t i = 0; i < ds.count; ++i) {
                double* img = ds.images.data() + i * pixels + c * plane;
                for (std::size_t p = 0; p < plane; ++p) img[p] = gain * img[p] + offset;
            }
        }
    }
    return ds;
}

/// Affine channel-wise contrast/offset transform simulating scanner
/// variation at one client. Pure; the transform depends only on
/// (seed, client, strength).
inline void apply_feature_shift(Dataset& ds, const std::vector<std::size_t>& indices,
                                std::size_t client, double strength, std::uint64_t seed) {
    if (strength == 0.0) return;
    std::mt19937_64 rng(seed ^ (0x9E3779B97F4A7C15ull * (client + 1)));
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    const std::size_t plane = ds.height * ds.width;
    for (std::size_t c = 0; c < ds.channels; ++c) {
        const double gain = 1.0 + strength * unit(rng);
        const double offset = strength * unit(rng);
        for (std::size_t idx : indices) {
            double* img = ds.images.data() + idx * ds.image_size() + c * plane;
            for (std::size_t p = 0; p < plane; ++p) img[p] = gain * img[p] + offset;
        }
    }
}

namespace detail {

inline std::vector<double> dirichlet_draw(std::mt19937_64& rng, double concentration,
                                          std::size_t n) {
    std::gamma_distribution<double> gamma(concentration, 1.0);
    std::vector<double> p(n);
    double sum = 0.0;
    for (double& x : p) {
        x = gamma(rng);
        sum += x;
    }
    if (sum <= 0.0) {
        // Vanishingly rare underflow for tiny concentrations; fall back to a
        // single random owner.
        std::fill(p.begin(), p.end(), 0.0);
        p[rng() % n] = 1.0;
        return p;
    }
    for (double& x : p) x /= sum;
    return p;
}

}  // namespace detail

/// Label-skew partition: per class, client proportions drawn from
/// Dirichlet(concentration). Shards are disjoint and cover the dataset;
/// retries with a fresh sub-seed until every client can be split 80/20.
inline std::vector<std::vector<std::size_t>> dirichlet_partition(const std::vector<int>& labels,
                                                                 const PartitionSpec& spec) {
    if (labels.empty()) throw ConfigError("partition: empty label list");
    if (spec.n_clients == 0) throw ConfigError("partition: need at least one client");
    if (spec.concentration <= 0.0) throw ConfigError("partition: concentration must be positive");

    const int max_label = *std::max_element(labels.begin(), labels.end());
    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(max_label) + 1);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0) throw ConfigError("partition: negative label");
        by_class[static_cast<std::size_t>(labels[i])].push_back(i);
    }

    for (std::size_t attempt = 0; attempt <= spec.max_retries; ++attempt) {
        std::mt19937_64 rng(spec.seed + 0x51AF3B42ull * attempt);
        std::vector<std::vector<std::size_t>> shards(spec.n_clients);
        for (auto& cls : by_class) {
            if (cls.empty()) continue;
            std::vector<std::size_t> order = cls;
            std::shuffle(order.begin(), order.end(), rng);
            const std::vector<double> p =
                detail::dirichlet_draw(rng, spec.concentration, spec.n_clients);
            double cumulative = 0.0;
            std::size_t start = 0;
            for (std::size_t j = 0; j < spec.n_clients; ++j) {
                cumulative += p[j];
                const std::size_t end =
                    j + 1 == spec.n_clients
                        ? order.size()
                        : std::min(order.size(),
                                   static_cast<std::size_t>(
                                       std::llround(cumulative * static_cast<double>(order.size()))));
                for (std::size_t i = start; i < std::max(start, end); ++i)
                    shards[j].push_back(order[i]);
                start = std::max(start, end);
            }
        }
        const bool viable = std::all_of(shards.begin(), shards.end(),
                                        [](const auto& s) { return s.size() >= 2; });
        if (viable) {
            for (auto& s : shards) std::sort(s.begin(), s.end());
            return shards;
        }
    }
    throw ConfigError("partition: could not give every client a splittable shard after " +
                      std::to_string(spec.max_retries) + " retries");
}

/// Stratified train/test split of one shard. Classes with a single sample go
/// to train; the test side is kept nonempty for any shard of two or more.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_train_test(
    const std::vector<std::size_t>& shard, const std::vector<int>& labels, double fraction,
    std::uint64_t seed) {
    if (shard.size() < 2) throw ConfigError("split: shard smaller than two samples");
    if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("split: fraction must be in (0,1)");

    std::vector<std::vector<std::size_t>> groups;
    {
        std::vector<int> seen;
        for (std::size_t idx : shard) {
            const int label = labels[idx];
            auto it = std::find(seen.begin(), seen.end(), label);
            if (it == seen.end()) {
                seen.push_back(label);
                groups.emplace_back();
                groups.back().push_back(idx);
            } else {
                groups[static_cast<std::size_t>(it - seen.begin())].push_back(idx);
            }
        }
    }

    std::mt19937_64 rng(seed);
    std::vector<std::size_t> train, test;
    for (auto& g : groups) {
        std::shuffle(g.begin(), g.end(), rng);
        std::size_t n_train = g.size();
        if (g.size() >= 2) {
            const auto want =
                static_cast<std::size_t>(std::llround(fraction * static_cast<double>(g.size())));
            n_train = std::clamp<std::size_t>(want, 1, g.size() - 1);
        }
        train.insert(train.end(), g.begin(), g.begin() + static_cast<std::ptrdiff_t>(n_train));
        test.insert(test.end(), g.begin() + static_cast<std::ptrdiff_t>(n_train), g.end());
    }
    if (test.empty()) {
        // All classes were singletons; surrender one train sample.
        test.push_back(train.back());
        train.pop_back();
    }
    std::sort(train.begin(), train.end());
    std::sort(test.begin(), test.end());
    return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Flat binary export: 5 x u32 shape header, f32 image data, i32 labels.

inline void save_dataset(const std::string& path, const Dataset& ds) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("dataset: cannot open '" + path + "' for writing");
    auto put_u32 = [&](std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
    put_u32(static_cast<std::uint32_t>(ds.count));
    put_u32(static_cast<std::uint32_t>(ds.channels));
    put_u32(static_cast<std::uint32_t>(ds.height));
    put_u32(static_cast<std::uint32_t>(ds.width));
    put_u32(static_cast<std::uint32_t>(ds.n_classes));
    for (double v : ds.images) {
        const float f = static_cast<float>(v);
        out.write(reinterpret_cast<const char*>(&f), 4);
    }
    for (int v : ds.labels) {
        const std::int32_t i = v;
        out.write(reinterpret_cast<const char*>(&i), 4);
    }
    if (!out) throw ConfigError("dataset: write to '" + path + "' failed");
}

inline Dataset load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("dataset: cannot open '" + path + "'");
    auto get_u32 = [&]() {
        std::uint32_t v = 0;
        in.read(reinterpret_cast<char*>(&v), 4);
        return v;
    };
    Dataset ds;
    ds.count = get_u32();
    ds.channels = get_u32();
    ds.height = get_u32();
    ds.width = get_u32();
    ds.n_classes = get_u32();
    if (!in) throw ConfigError("dataset: truncated header in '" + path + "'");
    ds.images.resize(ds.count * ds.image_size());
    for (double& v : ds.images) {
        float f = 0.0f;
        in.read(reinterpret_cast<char*>(&f), 4);
        v = static_cast<double>(f);
    }
    ds.labels.resize(ds.count);
    for (int& v : ds.labels) {
        std::int32_t i = 0;
        in.read(reinterpret_cast<char*>(&i), 4);
        v = i;
    }
    if (!in) throw ConfigError("dataset: truncated body in '" + path + "'");
    return ds;
}

}  // namespace ceperfed
