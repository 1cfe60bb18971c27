#include "dp/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

namespace dp {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

struct PngWrite {
    png_structp png = nullptr;
    png_infop info = nullptr;
    ~PngWrite() {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    }
};

struct PngRead {
    png_structp png = nullptr;
    png_infop info = nullptr;
    ~PngRead() {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    }
};

void write_png(const std::filesystem::path& path, int width, int height, int bit_depth, int color_type,
               const std::vector<png_bytep>& rows) {
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw DataError("cannot open for writing: " + path.string());
    PngWrite w;
    w.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!w.png) throw DataError("png_create_write_struct failed");
    w.info = png_create_info_struct(w.png);
    if (!w.info) throw DataError("png_create_info_struct failed");
    if (setjmp(png_jmpbuf(w.png))) throw DataError("png write failure: " + path.string());
    png_init_io(w.png, fp.get());
    png_set_IHDR(w.png, w.info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), bit_depth,
                 color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(w.png, w.info);
    if (bit_depth == 16) png_set_swap(w.png);  // buffers are native little-endian
    png_write_image(w.png, const_cast<png_bytepp>(rows.data()));
    png_write_end(w.png, nullptr);
}

void read_png_header(PngRead& r, const std::filesystem::path& path, FilePtr& fp) {
    fp.reset(std::fopen(path.c_str(), "rb"));
    if (!fp) throw DataError("missing image file: " + path.string());
    r.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!r.png) throw DataError("png_create_read_struct failed");
    r.info = png_create_info_struct(r.png);
    if (!r.info) throw DataError("png_create_info_struct failed");
    if (setjmp(png_jmpbuf(r.png))) throw DataError("png read failure: " + path.string());
    png_init_io(r.png, fp.get());
    png_read_info(r.png, r.info);
}

}  // namespace

void write_png16(const std::filesystem::path& path, const ImageU16& img) {
    if (img.width <= 0 || img.height <= 0 ||
        img.pixels.size() != static_cast<std::size_t>(img.width) * img.height)
        throw UsageError("write_png16: inconsistent image buffer");
    std::vector<png_bytep> rows(static_cast<std::size_t>(img.height));
    for (int y = 0; y < img.height; ++y)
        rows[static_cast<std::size_t>(y)] = reinterpret_cast<png_bytep>(
            const_cast<std::uint16_t*>(img.pixels.data() + static_cast<std::size_t>(y) * img.width));
    write_png(path, img.width, img.height, 16, PNG_COLOR_TYPE_GRAY, rows);
}

ImageU16 read_png16(const std::filesystem::path& path) {
    FilePtr fp;
    PngRead r;
    read_png_header(r, path, fp);
    if (setjmp(png_jmpbuf(r.png))) throw DataError("png read failure: " + path.string());

    const png_uint_32 width = png_get_image_width(r.png, r.info);
    const png_uint_32 height = png_get_image_height(r.png, r.info);
    if (png_get_color_type(r.png, r.info) != PNG_COLOR_TYPE_GRAY ||
        png_get_bit_depth(r.png, r.info) != 16)
        throw DataError("expected 16-bit grayscale png: " + path.string());
    png_set_swap(r.png);

    ImageU16 img;
    img.width = static_cast<int>(width);
    img.height = static_cast<int>(height);
    img.pixels.resize(static_cast<std::size_t>(width) * height);
    std::vector<png_bytep> rows(height);
    for (png_uint_32 y = 0; y < height; ++y)
        rows[y] = reinterpret_cast<png_bytep>(img.pixels.data() + static_cast<std::size_t>(y) * width);
    png_read_image(r.png, rows.data());
    png_read_end(r.png, nullptr);
    return img;
}

void write_png8(const std::filesystem::path& path, const ImageU8& img) {
    if (img.width <= 0 || img.height <= 0 || (img.channels != 1 && img.channels != 3) ||
        img.pixels.size() != static_cast<std::size_t>(img.width) * img.height * img.channels)
        throw UsageError("write_png8: inconsistent image buffer");
    std::vector<png_bytep> rows(static_cast<std::size_t>(img.height));
    for (int y = 0; y < img.height; ++y)
        rows[static_cast<std::size_t>(y)] = const_cast<png_bytep>(
            img.pixels.data() + static_cast<std::size_t>(y) * img.width * img.channels);
    write_png(path, img.width, img.height, 8,
              img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, rows);
}

ImageU8 read_png8(const std::filesystem::path& path) {
    FilePtr fp;
    PngRead r;
    read_png_header(r, path, fp);
    if (setjmp(png_jmpbuf(r.png))) throw DataError("png read failure: " + path.string());

    const png_uint_32 width = png_get_image_width(r.png, r.info);
    const png_uint_32 height = png_get_image_height(r.png, r.info);
    const int color_type = png_get_color_type(r.png, r.info);
    if (png_get_bit_depth(r.png, r.info) != 8 ||
        (color_type != PNG_COLOR_TYPE_GRAY && color_type != PNG_COLOR_TYPE_RGB))
        throw DataError("expected 8-bit gray or rgb png: " + path.string());

    ImageU8 img;
    img.width = static_cast<int>(width);
    img.height = static_cast<int>(height);
    img.channels = color_type == PNG_COLOR_TYPE_GRAY ? 1 : 3;
    img.pixels.resize(static_cast<std::size_t>(width) * height * img.channels);
    std::vector<png_bytep> rows(height);
    for (png_uint_32 y = 0; y < height; ++y)
        rows[y] = img.pixels.data() + static_cast<std::size_t>(y) * width * img.channels;
    png_read_image(r.png, rows.data());
    png_read_end(r.png, nullptr);
    return img;
}

std::vector<double> resize_bilinear(const std::vector<double>& src, int src_w, int src_h, int dst_w, int dst_h) {
    if (src_w <= 0 || src_h <= 0 || dst_w <= 0 || dst_h <= 0 ||
        src.size() != static_cast<std::size_t>(src_w) * src_h)
        throw UsageError("resize_bilinear: inconsistent buffer");
    std::vector<double> dst(static_cast<std::size_t>(dst_w) * dst_h);
    const double sx = static_cast<double>(src_w) / dst_w;
    const double sy = static_cast<double>(src_h) / dst_h;
    for (int y = 0; y < dst_h; ++y) {
        const double fy = (y + 0.5) * sy - 0.5;
        const int y0 = std::clamp(static_cast<int>(std::floor(fy)), 0, src_h - 1);
        const int y1 = std::min(y0 + 1, src_h - 1);
        const double wy = std::clamp(fy - y0, 0.0, 1.0);
        for (int x = 0; x < dst_w; ++x) {
            const double fx = (x + 0.5) * sx - 0.5;
            const int x0 = std::clamp(static_cast<int>(std::floor(fx)), 0, src_w - 1);
            const int x1 = std::min(x0 + 1, src_w - 1);
            const double wx = std::clamp(fx - x0, 0.0, 1.0);
            const double top = src[static_cast<std::size_t>(y0) * src_w + x0] * (1 - wx) +
                               src[static_cast<std::size_t>(y0) * src_w + x1] * wx;
            const double bot = src[static_cast<std::size_t>(y1) * src_w + x0] * (1 - wx) +
                               src[static_cast<std::size_t>(y1) * src_w + x1] * wx;
            dst[static_cast<std::size_t>(y) * dst_w + x] = top * (1 - wy) + bot * wy;
        }
    }
    return dst;
}

Hsv rgb_to_hsv(std::uint8_t r8, std::uint8_t g8, std::uint8_t b8) {
    const double r = r8 / 255.0, g = g8 / 255.0, b = b8 / 255.0;
    const double mx = std::max({r, g, b});
    const double mn = std::min({r, g, b});
    const double d = mx - mn;
    Hsv out;
    out.v = mx;
    out.s = mx > 0.0 ? d / mx : 0.0;
    if (d <= 0.0) {
        out.h = 0.0;
        return out;
    }
    double h;
    if (mx == r)
        h = std::fmod((g - b) / d, 6.0);
    else if (mx == g)
        h = (b - r) / d + 2.0;
    else
        h = (r - g) / d + 4.0;
    h *= 60.0;
    if (h < 0) h += 360.0;
    out.h = h;
    return out;
}

}  // namespace dp
