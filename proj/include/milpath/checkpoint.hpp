#pragma once

// MILC parameter checkpoints (little-endian):
//   "MILC" | version u32 | count u32 |
//   count x ( name: u16 len + UTF-8 | ndim u32 | dims u32... | f64 values )

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "milpath/io.hpp"
#include "milpath/params.hpp"

namespace milpath {

inline constexpr std::string_view kCheckpointMagic = "MILC";
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::string encode_checkpoint(const std::vector<NamedTensor>& params) {
    ByteWriter w;
    w.put_bytes(kCheckpointMagic);
    w.put<std::uint32_t>(kCheckpointVersion);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
    for (const auto& p : params) {
        w.put_short_string(p.name);
        w.put<std::uint32_t>(static_cast<std::uint32_t>(p.tensor.rank()));
        for (auto d : p.tensor.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
        for (double v : p.tensor.values()) w.put<double>(v);
    }
    return std::move(w).bytes();
}

inline std::vector<NamedTensor> decode_checkpoint(std::string_view bytes) {
    ByteReader r(bytes, "checkpoint");
    if (r.get_bytes(4) != kCheckpointMagic) throw FormatError("checkpoint: bad magic (expected MILC)");
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) {
        throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    }
    const auto count = r.get<std::uint32_t>();
    std::vector<NamedTensor> out;
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedTensor nt;
        nt.name = r.get_short_string();
        const auto ndim = r.get<std::uint32_t>();
        r.require(std::size_t{ndim} * 4);
        Shape shape(ndim);
        for (auto& d : shape) d = r.get<std::uint32_t>();
        // Zero-sized dims make numel 0 regardless of the others; otherwise guard the product.
        std::size_t n = 1;
        const bool empty = std::find(shape.begin(), shape.end(), 0u) != shape.end();
        if (!empty) {
            const std::size_t cap = r.remaining() / sizeof(double);
            for (auto d : shape) {
                if (n > cap / d) r.require(r.remaining() + 1);  // cannot fit: truncated
                n *= d;
            }
        } else {
            n = 0;
        }
        r.require(n * sizeof(double));
        std::vector<double> values(n);
        for (auto& v : values) v = r.get<double>();
        nt.tensor = Tensor(std::move(shape), std::move(values));
        out.push_back(std::move(nt));
    }
    if (r.remaining() != 0) throw FormatError("checkpoint: trailing bytes after last parameter");
    return out;
}

inline void save_checkpoint_file(const std::filesystem::path& path, const std::vector<NamedTensor>& params) {
    write_file_atomic(path, encode_checkpoint(params));
}

inline std::vector<NamedTensor> load_checkpoint_file(const std::filesystem::path& path) {
    return decode_checkpoint(read_file(path));
}

}  // namespace milpath
