#pragma once

// Patient-exclusive train/val/test splits.
//
// Split file: "# seed=<u64> algo=<name>" then CSV "patient_id,split".

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "milpath/error.hpp"
#include "milpath/io.hpp"
#include "milpath/rng.hpp"

namespace milpath {

enum class Partition { Train = 0, Val = 1, Test = 2 };

inline std::string_view partition_name(Partition p) {
    switch (p) {
        case Partition::Train: return "train";
        case Partition::Val: return "val";
        case Partition::Test: return "test";
    }
    return "?";
}

inline Partition parse_partition(std::string_view s) {
    if (s == "train") return Partition::Train;
    if (s == "val") return Partition::Val;
    if (s == "test") return Partition::Test;
    throw FormatError("unknown split partition '" + std::string(s) + "'");
}

struct SplitAssignment {
    std::uint64_t seed = 0;
    std::string algorithm = Rng::algorithm_name;
    std::map<std::string, Partition> assignment;

    Partition of(const std::string& patient_id) const {
        auto it = assignment.find(patient_id);
        if (it == assignment.end()) throw Error("patient " + patient_id + " is not in the split");
        return it->second;
    }

    std::array<std::size_t, 3> counts() const {
        std::array<std::size_t, 3> c{};
        for (const auto& [_, p] : assignment) c[static_cast<std::size_t>(p)]++;
        return c;
    }

    friend bool operator==(const SplitAssignment&, const SplitAssignment&) = default;
};

struct SplitOptions {
    unsigned train_percent = 70;
    unsigned val_percent = 15;
    // Optional per-patient stratum (e.g. label); each stratum is apportioned separately.
    const std::map<std::string, int>* strata = nullptr;
};

/// Largest-remainder apportionment of n items to train/val/test.
///
/// Each partition first gets floor(share * n); leftover items go to the
/// largest fractional remainders, ties resolved test, then val, then train.
/// Every count ends within one item of its exact share.
inline std::array<std::size_t, 3> split_counts(std::size_t n, unsigned train_percent = 70, unsigned val_percent = 15) {
    if (train_percent + val_percent > 100) throw Error("split percentages exceed 100");
    const std::array<std::size_t, 3> pct{train_percent, val_percent, 100u - train_percent - val_percent};
    std::array<std::size_t, 3> counts{}, rem{};
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < 3; ++i) {
        counts[i] = pct[i] * n / 100;
        rem[i] = pct[i] * n % 100;
        assigned += counts[i];
    }
    std::array<std::size_t, 3> order{2, 1, 0};
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
    for (std::size_t k = 0; assigned < n; ++k, ++assigned) counts[order[k]]++;
    return counts;
}

/// Deterministic patient-level split: sort + dedupe ids, seeded Fisher-Yates
/// shuffle, then contiguous train/val/test cut. Input order never matters.
inline SplitAssignment make_split(std::span<const std::string> patient_ids, std::uint64_t seed,
                                  const SplitOptions& options = {}) {
    std::set<std::string> unique(patient_ids.begin(), patient_ids.end());
    if (unique.size() < 3) throw Error("make_split: need at least 3 distinct patients, got " + std::to_string(unique.size()));

    std::map<int, std::vector<std::string>> groups;
    for (const auto& p : unique) {
        int stratum = 0;
        if (options.strata) {
            auto it = options.strata->find(p);
            if (it == options.strata->end()) throw Error("make_split: no stratum for patient " + p);
            stratum = it->second;
        }
        groups[stratum].push_back(p);
    }

    SplitAssignment out;
    out.seed = seed;
    Rng rng(seed);
    for (auto& [_, ids] : groups) {
        rng.shuffle(std::span<std::string>(ids));
        const auto c = split_counts(ids.size(), options.train_percent, options.val_percent);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            const Partition part = i < c[0] ? Partition::Train : (i < c[0] + c[1] ? Partition::Val : Partition::Test);
            out.assignment.emplace(ids[i], part);
        }
    }
    return out;
}

inline std::string write_split_csv(const SplitAssignment& split) {
    std::string out = "# seed=" + std::to_string(split.seed) + " algo=" + split.algorithm + "\n";
    out += "patient_id,split\n";
    for (const auto& [patient, part] : split.assignment) {
        out += csv_field(patient);
        out += ',';
        out += partition_name(part);
        out += '\n';
    }
    return out;
}

inline SplitAssignment read_split_csv(std::string_view text) {
    auto lines = split_lines(text);
    if (lines.size() < 2 || !lines[0].starts_with("# ")) throw FormatError("split file: missing '# seed=... algo=...' header");
    SplitAssignment out;
    bool have_seed = false;
    for (auto token : split_view(lines[0].substr(2), ' ')) {
        if (token.starts_with("seed=")) {
            out.seed = parse_int<std::uint64_t>(token.substr(5), "split header seed");
            have_seed = true;
        } else if (token.starts_with("algo=")) {
            out.algorithm = std::string(token.substr(5));
        }
    }
    if (!have_seed) throw FormatError("split file: header lacks seed=");
    if (lines[1] != "patient_id,split") throw FormatError("split file: expected column header 'patient_id,split'");
    for (std::size_t i = 2; i < lines.size(); ++i) {
        if (lines[i].empty()) continue;
        auto f = split_view(lines[i], ',');
        if (f.size() != 2) throw FormatError("split file line " + std::to_string(i + 1) + ": expected 2 fields");
        if (!out.assignment.emplace(std::string(f[0]), parse_partition(f[1])).second) {
            throw FormatError("split file: patient " + std::string(f[0]) + " listed twice");
        }
    }
    return out;
}

}  // namespace milpath
