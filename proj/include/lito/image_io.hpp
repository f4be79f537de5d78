// Copyright Contributors to the lito project
// SPDX-License-Identifier: Apache-2.0
//
// 8-bit RGB PNG and raw float image files.
#pragma once

#include <string>
#include <vector>

namespace lito {

/// Row-major float RGB image, values nominally in [0, 1].
struct Image {
    int width = 0, height = 0;
    std::vector<float> rgb;

    float at(int x, int y, int c) const { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
};

void write_png(const std::string& path, const Image& image);
/// Reads 8-bit RGB or RGBA PNGs (alpha is dropped).
Image read_png(const std::string& path);

/// Raw dump: u32 width, u32 height, u32 channels, then f32 values.
void write_raw(const std::string& path, int width, int height, int channels, const std::vector<float>& values);
struct RawImage {
    int width = 0, height = 0, channels = 0;
    std::vector<float> values;
};
RawImage read_raw(const std::string& path);

} // namespace lito
