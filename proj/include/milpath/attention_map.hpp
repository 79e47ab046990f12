#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "milpath/error.hpp"
#include "milpath/feature_bag.hpp"
#include "milpath/io.hpp"
#include "milpath/png.hpp"

namespace milpath {

/// Min-max scaling to [0, 1]; a constant vector maps to 0.5 everywhere.
inline std::vector<double> normalize_attention(std::span<const double> weights) {
    if (weights.empty()) throw Error("normalize_attention: no weights");
    for (double w : weights) {
        if (std::isnan(w)) throw NumericError("normalize_attention: NaN weight");
        if (!std::isfinite(w)) throw NumericError("normalize_attention: infinite weight");
    }
    const auto [lo, hi] = std::minmax_element(weights.begin(), weights.end());
    const double min = *lo, range = *hi - *lo;
    std::vector<double> out(weights.size(), 0.5);
    if (range > 0.0) {
        for (std::size_t i = 0; i < weights.size(); ++i) out[i] = (weights[i] - min) / range;
    }
    return out;
}

struct AttentionEntry {
    std::uint32_t x = 0;
    std::uint32_t y = 0;
    double raw_weight = 0.0;
    double normalized_score = 0.0;

    friend bool operator==(const AttentionEntry&, const AttentionEntry&) = default;
};

struct AttentionMap {
    std::string slide_id;
    std::vector<AttentionEntry> entries;  // bag patch order
    std::uint32_t patch_size = 256;
    std::uint32_t max_x = 0;
    std::uint32_t max_y = 0;
};

inline AttentionMap make_attention_map(const FeatureBag& bag, std::span<const double> weights) {
    if (weights.size() != bag.size()) {
        throw ShapeError("attention map: " + std::to_string(weights.size()) + " weights for " + std::to_string(bag.size()) +
                         " patches");
    }
    if (bag.patch_size == 0) throw Error("attention map: patch size is 0");
    auto scores = normalize_attention(weights);
    AttentionMap m;
    m.slide_id = bag.slide_id;
    m.patch_size = bag.patch_size;
    for (std::size_t i = 0; i < bag.size(); ++i) {
        m.entries.push_back({bag.coords[i].x, bag.coords[i].y, weights[i], scores[i]});
        m.max_x = std::max(m.max_x, bag.coords[i].x);
        m.max_y = std::max(m.max_y, bag.coords[i].y);
    }
    return m;
}

/// Diverging blue -> white -> red: 0 is (0,0,255), 0.5 is (255,255,255), 1 is (255,0,0).
inline std::array<std::uint8_t, 3> attention_color(double score) {
    const double s = std::clamp(score, 0.0, 1.0);
    auto channel = [](double t) { return static_cast<std::uint8_t>(std::lround(255.0 * t)); };
    if (s <= 0.5) {
        const double t = s / 0.5;
        return {channel(t), channel(t), 255};
    }
    const double t = (1.0 - s) / 0.5;
    return {255, channel(t), channel(t)};
}

/// One cell per patch at (x / patch_size, y / patch_size), `cell_pixels`
/// wide, on a white background.
inline RgbImage rasterize_attention(const AttentionMap& map, std::uint32_t cell_pixels = 1) {
    if (map.entries.empty()) throw Error("render_heatmap: empty map");
    if (cell_pixels == 0) throw Error("render_heatmap: cell size must be positive");
    const std::uint32_t cols = map.max_x / map.patch_size + 1;
    const std::uint32_t rows = map.max_y / map.patch_size + 1;
    RgbImage img(cols * cell_pixels, rows * cell_pixels, 255);
    std::set<std::pair<std::uint32_t, std::uint32_t>> seen;
    for (const auto& e : map.entries) {
        const std::uint32_t cx = e.x / map.patch_size, cy = e.y / map.patch_size;
        if (!seen.insert({cx, cy}).second) {
            throw Error("render_heatmap: overlapping patches at cell (" + std::to_string(cx) + ", " + std::to_string(cy) + ")");
        }
        const auto rgb = attention_color(e.normalized_score);
        for (std::uint32_t dy = 0; dy < cell_pixels; ++dy) {
            for (std::uint32_t dx = 0; dx < cell_pixels; ++dx) {
                auto* p = img.at(cx * cell_pixels + dx, cy * cell_pixels + dy);
                p[0] = rgb[0];
                p[1] = rgb[1];
                p[2] = rgb[2];
            }
        }
    }
    return img;
}

inline std::string render_heatmap(const AttentionMap& map, std::uint32_t cell_pixels = 1) {
    return encode_png(rasterize_attention(map, cell_pixels));
}

inline std::string write_attention_csv(const AttentionMap& map) {
    std::string out = "x,y,raw_weight,normalized_score\n";
    for (const auto& e : map.entries) {
        out += std::to_string(e.x) + ',' + std::to_string(e.y) + ',' + format_roundtrip(e.raw_weight) + ',' +
               format_roundtrip(e.normalized_score) + '\n';
    }
    return out;
}

struct PatchExemplars {
    std::vector<AttentionEntry> top;     // raw weight descending
    std::vector<AttentionEntry> bottom;  // raw weight ascending
};

/// Highest- and lowest-attention patches. Both lists come from one total
/// order (weight descending, then (x, y) ascending); the bottom list is its
/// tail read backwards, so the lists never share a patch when 2k <= N.
inline PatchExemplars top_bottom_patches(const AttentionMap& map, std::size_t k) {
    if (k > map.entries.size()) {
        throw Error("top_bottom_patches: k = " + std::to_string(k) + " exceeds " + std::to_string(map.entries.size()) +
                    " patches");
    }
    auto order = map.entries;
    std::sort(order.begin(), order.end(), [](const AttentionEntry& a, const AttentionEntry& b) {
        if (a.raw_weight != b.raw_weight) return a.raw_weight > b.raw_weight;
        return std::tie(a.x, a.y) < std::tie(b.x, b.y);
    });
    PatchExemplars out;
    out.top.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
    out.bottom.assign(order.rbegin(), order.rbegin() + static_cast<std::ptrdiff_t>(k));
    return out;
}

}  // namespace milpath
