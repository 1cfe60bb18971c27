#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "dp/common.hpp"

namespace dp {

/// 16-bit single-channel image; depth frames store millimeters.
struct ImageU16 {
    int width = 0, height = 0;
    std::vector<std::uint16_t> pixels;  // row-major

    std::uint16_t at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
};

/// 8-bit interleaved image, 1 (mask) or 3 (RGB) channels.
struct ImageU8 {
    int width = 0, height = 0, channels = 3;
    std::vector<std::uint8_t> pixels;

    std::uint8_t at(int x, int y, int c = 0) const {
        return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
};

void write_png16(const std::filesystem::path& path, const ImageU16& img);
ImageU16 read_png16(const std::filesystem::path& path);
void write_png8(const std::filesystem::path& path, const ImageU8& img);
ImageU8 read_png8(const std::filesystem::path& path);

/// Bilinear resample of a row-major single-channel buffer.
std::vector<double> resize_bilinear(const std::vector<double>& src, int src_w, int src_h, int dst_w, int dst_h);

struct Hsv {
    double h = 0;  // degrees [0, 360)
    double s = 0;  // [0, 1]
    double v = 0;  // [0, 1]
};

Hsv rgb_to_hsv(std::uint8_t r, std::uint8_t g, std::uint8_t b);

}  // namespace dp
