#pragma once

// Synthetic MIL cohorts with planted signal instances.
//
// Background instances are N(0, I); signal instances are N(shift * 1, I).
// Positive bags carry max(1, round(signal_fraction * n)) signal instances,
// negative bags none. Patches sit on a square grid, in shuffled bag order.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "milpath/error.hpp"
#include "milpath/rng.hpp"
#include "milpath/train.hpp"

namespace milpath {

struct SyntheticConfig {
    std::size_t n_bags = 100;
    std::size_t dim = 64;
    std::size_t min_instances = 5;
    std::size_t max_instances = 50;
    double signal_fraction = 0.10;
    double shift = 1.0;
    std::uint64_t seed = 42;
    std::string id_prefix = "SYNT";  // slide ids "SYNT-00-0007-01Z-00-DX1", patient = first 12 chars
};

struct SyntheticBag {
    LabeledBag data;
    std::vector<bool> signal;  // per patch, bag order
};

inline std::string synthetic_slide_id(const std::string& prefix, std::size_t i) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "-%02zu-%04zu-01Z-00-DX1", (i / 10000) % 100, i % 10000);
    return prefix + buf;
}

inline std::vector<SyntheticBag> make_synthetic_cohort(const SyntheticConfig& cfg) {
    if (cfg.dim == 0 || cfg.min_instances == 0 || cfg.max_instances < cfg.min_instances) {
        throw Error("synthetic cohort: invalid sizes");
    }
    if (cfg.id_prefix.size() != 4) throw Error("synthetic cohort: id prefix must be 4 characters");
    Rng rng(cfg.seed);
    // Exactly half the bags are positive, in random order.
    std::vector<int> labels(cfg.n_bags);
    for (std::size_t i = 0; i < cfg.n_bags; ++i) labels[i] = i < cfg.n_bags / 2 ? 1 : 0;
    rng.shuffle(std::span<int>(labels));

    std::vector<SyntheticBag> out;
    out.reserve(cfg.n_bags);
    for (std::size_t b = 0; b < cfg.n_bags; ++b) {
        const std::size_t n = cfg.min_instances + static_cast<std::size_t>(rng.below(cfg.max_instances - cfg.min_instances + 1));
        std::size_t n_signal = 0;
        if (labels[b] == 1) {
            n_signal = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(cfg.signal_fraction * static_cast<double>(n))));
        }
        std::vector<bool> is_signal(n, false);
        std::fill(is_signal.begin(), is_signal.begin() + static_cast<long>(n_signal), true);
        std::vector<std::size_t> perm(n);
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        rng.shuffle(std::span<std::size_t>(perm));
        std::vector<std::size_t> cells = perm;
        rng.shuffle(std::span<std::size_t>(cells));

        SyntheticBag sb;
        sb.data.label = labels[b];
        FeatureBag& bag = sb.data.bag;
        bag.slide_id = synthetic_slide_id(cfg.id_prefix, b);
        bag.patient_id = patient_id_from_slide(bag.slide_id);
        bag.dim = static_cast<std::uint32_t>(cfg.dim);
        const auto side = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n))));
        std::vector<float> f(cfg.dim);
        for (std::size_t i = 0; i < n; ++i) {
            const bool signal = is_signal[perm[i]];
            for (auto& v : f) v = static_cast<float>(rng.normal() + (signal ? cfg.shift : 0.0));
            const std::size_t cell = cells[i];
            bag.add_patch({static_cast<std::uint32_t>((cell % side) * bag.patch_size),
                           static_cast<std::uint32_t>((cell / side) * bag.patch_size)},
                          f);
            sb.signal.push_back(signal);
        }
        out.push_back(std::move(sb));
    }
    return out;
}

inline std::vector<LabeledBag> labeled_bags(std::span<const SyntheticBag> bags) {
    std::vector<LabeledBag> out;
    for (const auto& b : bags) out.push_back(b.data);
    return out;
}

}  // namespace milpath
