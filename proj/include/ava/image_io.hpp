#pragma once

#include "ava/common.hpp"

#include <zlib.h>

#include <array>
#include <cstring>
#include <fstream>

namespace ava {

namespace png_detail {

inline void put_u32(std::vector<uint8_t>& v, uint32_t x) {
    v.push_back(static_cast<uint8_t>(x >> 24));
    v.push_back(static_cast<uint8_t>(x >> 16));
    v.push_back(static_cast<uint8_t>(x >> 8));
    v.push_back(static_cast<uint8_t>(x));
}

inline uint32_t get_u32(const uint8_t* p) {
    return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

inline void write_chunk(std::ofstream& out, const char type[4], const std::vector<uint8_t>& data) {
    std::vector<uint8_t> hdr;
    put_u32(hdr, static_cast<uint32_t>(data.size()));
    out.write(reinterpret_cast<const char*>(hdr.data()), 4);
    out.write(type, 4);
    if (!data.empty()) out.write(reinterpret_cast<const char*>(data.data()), data.size());
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(type), 4);
    if (!data.empty()) crc = crc32(crc, data.data(), static_cast<uInt>(data.size()));
    std::vector<uint8_t> crc_b;
    put_u32(crc_b, static_cast<uint32_t>(crc));
    out.write(reinterpret_cast<const char*>(crc_b.data()), 4);
}

inline uint8_t paeth(int a, int b, int c) {
    int p = a + b - c;
    int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return static_cast<uint8_t>(a);
    if (pb <= pc) return static_cast<uint8_t>(b);
    return static_cast<uint8_t>(c);
}

}  // namespace png_detail

// 8-bit PNG; channels must be 1 (gray), 3 (RGB) or 4 (RGBA). Values are
// clamped to [0,1] and quantized.
inline void write_png(const Image& img, const std::string& path) {
    using namespace png_detail;
    require(img.channels == 1 || img.channels == 3 || img.channels == 4,
            "write_png: unsupported channel count " + std::to_string(img.channels));
    std::ofstream out(path, std::ios::binary);
    require(out.good(), "write_png: cannot open " + path);
    static const uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
    out.write(reinterpret_cast<const char*>(sig), 8);

    std::vector<uint8_t> ihdr;
    put_u32(ihdr, static_cast<uint32_t>(img.width));
    put_u32(ihdr, static_cast<uint32_t>(img.height));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(img.channels == 1 ? 0 : (img.channels == 3 ? 2 : 6));
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    write_chunk(out, "IHDR", ihdr);

    const size_t stride = static_cast<size_t>(img.width) * img.channels;
    std::vector<uint8_t> raw((stride + 1) * img.height);
    for (int y = 0; y < img.height; ++y) {
        raw[y * (stride + 1)] = 0;  // no filter
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c)
                raw[y * (stride + 1) + 1 + x * img.channels + c] =
                    static_cast<uint8_t>(std::lround(clamp01(img.at(y, x, c)) * 255.0));
    }
    uLongf comp_size = compressBound(static_cast<uLong>(raw.size()));
    std::vector<uint8_t> comp(comp_size);
    int rc = compress2(comp.data(), &comp_size, raw.data(), static_cast<uLong>(raw.size()), 6);
    require(rc == Z_OK, "write_png: deflate failed");
    comp.resize(comp_size);
    write_chunk(out, "IDAT", comp);
    write_chunk(out, "IEND", {});
}

// Reads 8-bit gray/RGB/RGBA PNGs (the subset this project writes).
inline Image read_png(const std::string& path) {
    using namespace png_detail;
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "read_png: cannot open " + path);
    std::vector<uint8_t> file((std::istreambuf_iterator<char>(in)),
                              std::istreambuf_iterator<char>());
    require(file.size() > 8 && file[1] == 'P' && file[2] == 'N' && file[3] == 'G',
            "read_png: not a PNG file: " + path);

    size_t pos = 8;
    int width = 0, height = 0, channels = 0, bit_depth = 0;
    std::vector<uint8_t> idat;
    while (pos + 8 <= file.size()) {
        uint32_t len = get_u32(&file[pos]);
        std::string type(reinterpret_cast<const char*>(&file[pos + 4]), 4);
        const uint8_t* data = &file[pos + 8];
        if (type == "IHDR") {
            width = static_cast<int>(get_u32(data));
            height = static_cast<int>(get_u32(data + 4));
            bit_depth = data[8];
            int color_type = data[9];
            channels = color_type == 0 ? 1 : (color_type == 2 ? 3 : (color_type == 6 ? 4 : -1));
            require(bit_depth == 8 && channels > 0 && data[12] == 0,
                    "read_png: unsupported PNG variant in " + path);
        } else if (type == "IDAT") {
            idat.insert(idat.end(), data, data + len);
        } else if (type == "IEND") {
            break;
        }
        pos += 12 + len;
    }
    require(width > 0 && height > 0, "read_png: missing IHDR in " + path);

    const size_t stride = static_cast<size_t>(width) * channels;
    std::vector<uint8_t> raw((stride + 1) * height);
    uLongf raw_size = static_cast<uLongf>(raw.size());
    int rc = uncompress(raw.data(), &raw_size, idat.data(), static_cast<uLong>(idat.size()));
    require(rc == Z_OK && raw_size == raw.size(), "read_png: inflate failed for " + path);

    // defilter
    std::vector<uint8_t> pix(stride * height);
    const int bpp = channels;
    for (int y = 0; y < height; ++y) {
        uint8_t filter = raw[y * (stride + 1)];
        const uint8_t* src = &raw[y * (stride + 1) + 1];
        uint8_t* dst = &pix[y * stride];
        const uint8_t* up = y > 0 ? &pix[(y - 1) * stride] : nullptr;
        for (size_t i = 0; i < stride; ++i) {
            int a = i >= static_cast<size_t>(bpp) ? dst[i - bpp] : 0;
            int b = up ? up[i] : 0;
            int c = (up && i >= static_cast<size_t>(bpp)) ? up[i - bpp] : 0;
            int v = src[i];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += paeth(a, b, c); break;
                default: throw ValidationError("read_png: bad filter byte in " + path);
            }
            dst[i] = static_cast<uint8_t>(v);
        }
    }

    Image img(height, width, channels);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x)
            for (int c = 0; c < channels; ++c)
                img.at(y, x, c) = pix[y * stride + x * channels + c] / 255.0;
    return img;
}

// 32-bit float depth raster: magic "AVDF", int32 H, int32 W, row-major floats
// (little endian).
inline void write_depth(const Image& depth, const std::string& path) {
    require(depth.channels == 1, "write_depth: single channel expected");
    std::ofstream out(path, std::ios::binary);
    require(out.good(), "write_depth: cannot open " + path);
    out.write("AVDF", 4);
    int32_t h = depth.height, w = depth.width;
    out.write(reinterpret_cast<const char*>(&h), 4);
    out.write(reinterpret_cast<const char*>(&w), 4);
    for (double v : depth.data) {
        float f = static_cast<float>(v);
        out.write(reinterpret_cast<const char*>(&f), 4);
    }
}

inline Image read_depth(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "read_depth: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    require(std::memcmp(magic, "AVDF", 4) == 0, "read_depth: bad magic in " + path);
    int32_t h = 0, w = 0;
    in.read(reinterpret_cast<char*>(&h), 4);
    in.read(reinterpret_cast<char*>(&w), 4);
    require(h > 0 && w > 0, "read_depth: bad header in " + path);
    Image img(h, w, 1);
    for (auto& v : img.data) {
        float f;
        in.read(reinterpret_cast<char*>(&f), 4);
        v = f;
    }
    require(in.good(), "read_depth: truncated file " + path);
    return img;
}

}  // namespace ava
