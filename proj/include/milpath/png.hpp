#pragma once

// Minimal 8-bit RGB PNG encoder (no alpha, no ancillary chunks). zlib runs at
// a fixed compression level so identical pixels give identical bytes.

#include <cstdint>
#include <string>
#include <vector>

#include <zlib.h>

#include "milpath/error.hpp"

namespace milpath {

struct RgbImage {
    std::uint32_t width = 0;
    std::uint32_t height = 0;
    std::vector<std::uint8_t> pixels;  // row-major RGB triples

    RgbImage() = default;
    RgbImage(std::uint32_t w, std::uint32_t h, std::uint8_t fill = 255)
        : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3, fill) {}

    std::uint8_t* at(std::uint32_t x, std::uint32_t y) { return &pixels[(static_cast<std::size_t>(y) * width + x) * 3]; }
    const std::uint8_t* at(std::uint32_t x, std::uint32_t y) const {
        return &pixels[(static_cast<std::size_t>(y) * width + x) * 3];
    }
};

namespace detail {

inline void put_be32(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v >> 24));
    out.push_back(static_cast<char>(v >> 16));
    out.push_back(static_cast<char>(v >> 8));
    out.push_back(static_cast<char>(v));
}

inline void png_chunk(std::string& out, const char type[4], const std::string& data) {
    put_be32(out, static_cast<std::uint32_t>(data.size()));
    std::string body(type, 4);
    body += data;
    out += body;
    put_be32(out, static_cast<std::uint32_t>(
                      crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()))));
}

}  // namespace detail

inline std::string encode_png(const RgbImage& img) {
    if (img.width == 0 || img.height == 0) throw Error("encode_png: empty image");
    if (img.pixels.size() != static_cast<std::size_t>(img.width) * img.height * 3) throw ShapeError("encode_png: pixel buffer size");

    // Filter type 0 (None) on every scanline.
    std::vector<std::uint8_t> raw;
    raw.reserve((static_cast<std::size_t>(img.width) * 3 + 1) * img.height);
    for (std::uint32_t y = 0; y < img.height; ++y) {
        raw.push_back(0);
        const auto* row = img.at(0, y);
        raw.insert(raw.end(), row, row + static_cast<std::size_t>(img.width) * 3);
    }
    uLongf packed_size = compressBound(static_cast<uLong>(raw.size()));
    std::string packed(packed_size, '\0');
    if (compress2(reinterpret_cast<Bytef*>(packed.data()), &packed_size, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK) {
        throw Error("encode_png: zlib compression failed");
    }
    packed.resize(packed_size);

    std::string out("\x89PNG\r\n\x1a\n", 8);
    std::string ihdr;
    detail::put_be32(ihdr, img.width);
    detail::put_be32(ihdr, img.height);
    ihdr += std::string("\x08\x02\x00\x00\x00", 5);  // depth 8, RGB, deflate, adaptive filter, no interlace
    detail::png_chunk(out, "IHDR", ihdr);
    detail::png_chunk(out, "IDAT", packed);
    detail::png_chunk(out, "IEND", {});
    return out;
}

// Inverse of encode_png for images it produced (8-bit RGB, filter 0). Used by tests and tools.
inline RgbImage decode_png(const std::string& bytes) {
    auto be32 = [&](std::size_t at) {
        if (at + 4 > bytes.size()) throw FormatError("decode_png: truncated");
        return (static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[at])) << 24) |
               (static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[at + 1])) << 16) |
               (static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[at + 2])) << 8) |
               static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[at + 3]));
    };
    if (bytes.compare(0, 8, std::string("\x89PNG\r\n\x1a\n", 8)) != 0) throw FormatError("decode_png: bad signature");
    RgbImage img;
    std::string idat;
    for (std::size_t pos = 8; pos < bytes.size();) {
        const std::uint32_t len = be32(pos);
        if (pos + 12 + len > bytes.size()) throw FormatError("decode_png: truncated chunk");
        const std::string type = bytes.substr(pos + 4, 4);
        const std::string data = bytes.substr(pos + 8, len);
        const auto crc = crc32(0L, reinterpret_cast<const Bytef*>(bytes.data() + pos + 4), len + 4);
        if (crc != be32(pos + 8 + len)) throw FormatError("decode_png: CRC mismatch in " + type);
        if (type == "IHDR") {
            img.width = be32(pos + 8);
            img.height = be32(pos + 12);
            if (data.substr(8, 5) != std::string("\x08\x02\x00\x00\x00", 5)) throw FormatError("decode_png: only 8-bit RGB is supported");
        } else if (type == "IDAT") {
            idat += data;
        }
        pos += 12 + len;
    }
    const std::size_t stride = static_cast<std::size_t>(img.width) * 3 + 1;
    std::vector<std::uint8_t> raw(stride * img.height);
    uLongf raw_size = static_cast<uLongf>(raw.size());
    if (uncompress(raw.data(), &raw_size, reinterpret_cast<const Bytef*>(idat.data()), static_cast<uLong>(idat.size())) != Z_OK ||
        raw_size != raw.size()) {
        throw FormatError("decode_png: bad image data");
    }
    img.pixels.clear();
    for (std::uint32_t y = 0; y < img.height; ++y) {
        if (raw[y * stride] != 0) throw FormatError("decode_png: unsupported filter");
        img.pixels.insert(img.pixels.end(), raw.begin() + static_cast<long>(y * stride + 1),
                          raw.begin() + static_cast<long>((y + 1) * stride));
    }
    return img;
}

}  // namespace milpath
