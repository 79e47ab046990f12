#pragma once

// FBAG feature-bag files (little-endian):
//   "FBAG" | version u32 = 1 | slide_id (u16 len + UTF-8) | patch_size u32 |
//   dim u32 | n_patches u32 | n_patches x (x u32, y u32) |
//   n_patches x dim x f32 (row-major)

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "milpath/error.hpp"
#include "milpath/io.hpp"

namespace milpath {

inline constexpr std::string_view kFeatureBagMagic = "FBAG";
inline constexpr std::uint32_t kFeatureBagVersion = 1;
inline constexpr std::size_t kDefaultPatientPrefix = 12;  // TCGA barcode "TCGA-XX-XXXX"

struct PatchCoord {
    std::uint32_t x = 0;
    std::uint32_t y = 0;

    friend auto operator<=>(const PatchCoord&, const PatchCoord&) = default;
};

/// One slide's patch embeddings. Features are stored row-major, one row of
/// `dim` floats per patch, parallel to `coords`.
struct FeatureBag {
    std::string slide_id;
    std::string patient_id;
    std::uint32_t dim = 0;
    std::uint32_t patch_size = 256;
    std::string magnification;  // informational; not part of the FBAG payload
    std::vector<PatchCoord> coords;
    std::vector<float> features;

    std::size_t size() const { return coords.size(); }

    std::span<const float> feature(std::size_t i) const {
        return std::span<const float>(features).subspan(i * dim, dim);
    }

    void add_patch(PatchCoord at, std::span<const float> f) {
        if (f.size() != dim) throw ShapeError("feature bag " + slide_id + ": patch feature length differs from dim");
        coords.push_back(at);
        features.insert(features.end(), f.begin(), f.end());
    }

    friend bool operator==(const FeatureBag&, const FeatureBag&) = default;
};

// Patient id = first `prefix` characters of the slide id (whole id if shorter).
inline std::string patient_id_from_slide(std::string_view slide_id, std::size_t prefix = kDefaultPatientPrefix) {
    return std::string(slide_id.substr(0, std::min(prefix, slide_id.size())));
}

inline void validate_feature_bag(const FeatureBag& bag) {
    const std::string ctx = "feature bag " + bag.slide_id + ": ";
    if (bag.dim == 0) throw FormatError(ctx + "dim must be positive");
    if (bag.coords.empty()) throw FormatError(ctx + "bag holds no patches");
    if (bag.features.size() != bag.coords.size() * bag.dim) throw FormatError(ctx + "feature buffer length != n_patches * dim");
    for (float v : bag.features) {
        if (!std::isfinite(v)) throw FormatError(ctx + "non-finite feature value");
    }
    std::set<PatchCoord> seen;
    for (const auto& c : bag.coords) {
        if (!seen.insert(c).second) {
            throw FormatError(ctx + "duplicate patch coordinate (" + std::to_string(c.x) + ", " + std::to_string(c.y) + ")");
        }
    }
}

inline std::size_t feature_bag_header_size(std::string_view slide_id) { return 4 + 4 + 2 + slide_id.size() + 4 + 4 + 4; }

inline std::string encode_feature_bag(const FeatureBag& bag) {
    validate_feature_bag(bag);
    ByteWriter w;
    w.put_bytes(kFeatureBagMagic);
    w.put<std::uint32_t>(kFeatureBagVersion);
    w.put_short_string(bag.slide_id);
    w.put<std::uint32_t>(bag.patch_size);
    w.put<std::uint32_t>(bag.dim);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(bag.size()));
    for (const auto& c : bag.coords) {
        w.put<std::uint32_t>(c.x);
        w.put<std::uint32_t>(c.y);
    }
    for (float v : bag.features) w.put<float>(v);
    return std::move(w).bytes();
}

namespace detail {

struct FeatureBagHeader {
    std::string slide_id;
    std::uint32_t patch_size;
    std::uint32_t dim;
    std::uint32_t n_patches;
};

inline FeatureBagHeader read_feature_bag_header(ByteReader& r) {
    if (r.get_bytes(4) != kFeatureBagMagic) throw FormatError("feature bag: bad magic (expected FBAG)");
    const auto version = r.get<std::uint32_t>();
    if (version != kFeatureBagVersion) throw FormatError("feature bag: unsupported version " + std::to_string(version));
    FeatureBagHeader h;
    h.slide_id = r.get_short_string();
    h.patch_size = r.get<std::uint32_t>();
    h.dim = r.get<std::uint32_t>();
    h.n_patches = r.get<std::uint32_t>();
    return h;
}

}  // namespace detail

/// Decodes and validates a bag. Nothing is returned unless the whole
/// payload is well formed.
inline FeatureBag decode_feature_bag(std::string_view bytes, std::size_t patient_prefix = kDefaultPatientPrefix) {
    ByteReader r(bytes, "feature bag");
    auto h = detail::read_feature_bag_header(r);
    const std::size_t n = h.n_patches;
    const std::size_t row_bytes = 8 + std::size_t{h.dim} * 4;
    if (n != 0 && row_bytes > r.remaining() / n) r.require(r.remaining() + 1);  // payload cannot hold n rows
    r.require(n * row_bytes);
    FeatureBag bag;
    bag.slide_id = std::move(h.slide_id);
    bag.patient_id = patient_id_from_slide(bag.slide_id, patient_prefix);
    bag.patch_size = h.patch_size;
    bag.dim = h.dim;
    bag.coords.resize(n);
    for (auto& c : bag.coords) {
        c.x = r.get<std::uint32_t>();
        c.y = r.get<std::uint32_t>();
    }
    bag.features.resize(n * bag.dim);
    for (auto& v : bag.features) v = r.get<float>();
    if (r.remaining() != 0) throw FormatError("feature bag: " + std::to_string(r.remaining()) + " trailing bytes");
    validate_feature_bag(bag);
    return bag;
}

inline std::string read_feature_bag_slide_id(std::string_view bytes) {
    ByteReader r(bytes, "feature bag");
    return detail::read_feature_bag_header(r).slide_id;
}

inline void write_feature_bag(const std::filesystem::path& path, const FeatureBag& bag) {
    write_file_atomic(path, encode_feature_bag(bag));
}

inline FeatureBag read_feature_bag(const std::filesystem::path& path, std::size_t patient_prefix = kDefaultPatientPrefix) {
    try {
        return decode_feature_bag(read_file(path), patient_prefix);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

}  // namespace milpath
