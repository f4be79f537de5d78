// Copyright Contributors to the lito project
// SPDX-License-Identifier: Apache-2.0
#include "lito/image_io.hpp"

#include "lito/binary_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iterator>

namespace lito {
namespace {

void put_be32(std::vector<unsigned char>& out, std::uint32_t v) {
    out.push_back(static_cast<unsigned char>(v >> 24));
    out.push_back(static_cast<unsigned char>(v >> 16));
    out.push_back(static_cast<unsigned char>(v >> 8));
    out.push_back(static_cast<unsigned char>(v));
}

std::uint32_t get_be32(const unsigned char* p) {
    return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | p[3];
}

void put_chunk(std::vector<unsigned char>& out, const char* type, const std::vector<unsigned char>& data) {
    put_be32(out, static_cast<std::uint32_t>(data.size()));
    const std::size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data.begin(), data.end());
    const auto crc = crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start));
    put_be32(out, static_cast<std::uint32_t>(crc));
}

constexpr std::array<unsigned char, 8> kSignature{137, 80, 78, 71, 13, 10, 26, 10};

int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    return pb <= pc ? b : c;
}

} // namespace

void write_png(const std::string& path, const Image& image) {
    const auto w = static_cast<std::size_t>(image.width), h = static_cast<std::size_t>(image.height);
    std::vector<unsigned char> raw;
    raw.reserve(h * (w * 3 + 1));
    for (std::size_t y = 0; y < h; ++y) {
        raw.push_back(0); // filter: none
        for (std::size_t i = 0; i < w * 3; ++i) {
            const float v = std::clamp(image.rgb[y * w * 3 + i], 0.0f, 1.0f);
            raw.push_back(static_cast<unsigned char>(std::lround(v * 255.0f)));
        }
    }
    uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
    std::vector<unsigned char> z(zlen);
    if (compress2(z.data(), &zlen, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw io_error("png compression failed for " + path);
    z.resize(zlen);

    std::vector<unsigned char> out(kSignature.begin(), kSignature.end());
    std::vector<unsigned char> ihdr;
    put_be32(ihdr, static_cast<std::uint32_t>(w));
    put_be32(ihdr, static_cast<std::uint32_t>(h));
    ihdr.insert(ihdr.end(), {8, 2, 0, 0, 0}); // 8-bit, truecolor
    put_chunk(out, "IHDR", ihdr);
    put_chunk(out, "IDAT", z);
    put_chunk(out, "IEND", {});
    BinaryWriter wr(path);
    wr.bytes(out.data(), out.size());
    wr.close();
}

Image read_png(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open " + path);
    const std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    auto bad = [&](const std::string& why) { return FormatError(FormatError::Reason::malformed, path + ": " + why); };
    if (buf.size() < 8 || !std::equal(kSignature.begin(), kSignature.end(), buf.begin()))
        throw FormatError(FormatError::Reason::bad_magic, path + ": not a PNG file");
    std::size_t pos = 8;
    std::uint32_t w = 0, h = 0;
    int channels = 0;
    std::vector<unsigned char> idat;
    while (pos + 8 <= buf.size()) {
        const std::uint32_t len = get_be32(&buf[pos]);
        const std::string type(buf.begin() + static_cast<std::ptrdiff_t>(pos + 4),
                               buf.begin() + static_cast<std::ptrdiff_t>(pos + 8));
        if (pos + 12 + len > buf.size()) throw FormatError(FormatError::Reason::truncated, path + ": truncated PNG");
        const unsigned char* data = &buf[pos + 8];
        if (type == "IHDR") {
            w = get_be32(data);
            h = get_be32(data + 4);
            if (data[8] != 8 || data[12] != 0) throw bad("only 8-bit non-interlaced PNGs are supported");
            if (data[9] == 2)
                channels = 3;
            else if (data[9] == 6)
                channels = 4;
            else
                throw bad("only RGB/RGBA PNGs are supported");
        } else if (type == "IDAT") {
            idat.insert(idat.end(), data, data + len);
        } else if (type == "IEND") {
            break;
        }
        pos += 12 + len;
    }
    if (!channels || w == 0 || h == 0) throw bad("missing IHDR");
    const std::size_t stride = static_cast<std::size_t>(w) * channels;
    std::vector<unsigned char> raw(h * (stride + 1));
    uLongf rlen = static_cast<uLongf>(raw.size());
    if (uncompress(raw.data(), &rlen, idat.data(), static_cast<uLong>(idat.size())) != Z_OK || rlen != raw.size())
        throw bad("corrupt image data");

    std::vector<unsigned char> prev(stride, 0), cur(stride);
    Image img;
    img.width = static_cast<int>(w);
    img.height = static_cast<int>(h);
    img.rgb.resize(static_cast<std::size_t>(w) * h * 3);
    const auto bpp = static_cast<std::size_t>(channels);
    for (std::size_t y = 0; y < h; ++y) {
        const unsigned char filter = raw[y * (stride + 1)];
        const unsigned char* line = &raw[y * (stride + 1) + 1];
        for (std::size_t i = 0; i < stride; ++i) {
            const int a = i >= bpp ? cur[i - bpp] : 0;
            const int b = prev[i];
            const int c = i >= bpp ? prev[i - bpp] : 0;
            int pred = 0;
            switch (filter) {
            case 0: pred = 0; break;
            case 1: pred = a; break;
            case 2: pred = b; break;
            case 3: pred = (a + b) / 2; break;
            case 4: pred = paeth(a, b, c); break;
            default: throw bad("unknown filter type");
            }
            cur[i] = static_cast<unsigned char>(line[i] + pred);
        }
        for (std::size_t x = 0; x < w; ++x)
            for (int ch = 0; ch < 3; ++ch)
                img.rgb[(y * w + x) * 3 + static_cast<std::size_t>(ch)] = cur[x * bpp + static_cast<std::size_t>(ch)] / 255.0f;
        std::swap(prev, cur);
    }
    return img;
}

void write_raw(const std::string& path, int width, int height, int channels, const std::vector<float>& values) {
    BinaryWriter w(path);
    w.u32(static_cast<std::uint32_t>(width));
    w.u32(static_cast<std::uint32_t>(height));
    w.u32(static_cast<std::uint32_t>(channels));
    w.f32s(values);
    w.close();
}

RawImage read_raw(const std::string& path) {
    BinaryReader r(path);
    RawImage img;
    img.width = static_cast<int>(r.u32());
    img.height = static_cast<int>(r.u32());
    img.channels = static_cast<int>(r.u32());
    if (img.width <= 0 || img.height <= 0 || img.channels <= 0 || img.channels > 16 || img.width > 1 << 15 ||
        img.height > 1 << 15)
        throw FormatError(FormatError::Reason::malformed, path + ": bad raw image header");
    img.values = r.f32s(static_cast<std::size_t>(img.width) * img.height * img.channels);
    return img;
}

} // namespace lito
