#pragma once

#include <png.h>

#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "facet/core/error.hpp"
#include "facet/core/tensor.hpp"

namespace facet {

// 16-bit PNG I/O for CHW float images in [0, 1]. Writing quantizes with
// round(v * 65535); reading returns u / 65535. Quantize-before-write makes
// the round trip exact. Grayscale (1ch) and RGB (3ch) only.

inline uint16_t quantize16(float v) {
    float c = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
    return static_cast<uint16_t>(std::lround(c * 65535.0f));
}

// Snap a [0,1] image onto the 16-bit grid in place (what write/read would do).
inline void quantize16_inplace(Tensor<float>& img) {
    for (auto& v : *img.store) v = quantize16(v) / 65535.0f;
}

namespace detail {
struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
}  // namespace detail

inline void write_png16(const std::string& path, const Tensor<float>& img) {
    if (img.ndim() != 3 || (img.dim(0) != 1 && img.dim(0) != 3))
        throw Error(errc::shape_mismatch, "write_png16 expects 1xHxW or 3xHxW");
    if (!img.all_finite()) throw Error(errc::nan_input, "write_png16: non-finite pixels");
    int c = img.dim(0), h = img.dim(1), w = img.dim(2);

    std::unique_ptr<std::FILE, detail::FileCloser> fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw Error(errc::io_error, "write_png16: cannot open " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw Error(errc::io_error, "write_png16: libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw Error(errc::io_error, "write_png16: libpng error on " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, w, h, 16, c == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    std::vector<uint8_t> row(static_cast<size_t>(w) * c * 2);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < c; ++ch) {
                uint16_t u = quantize16(img.at(ch, y, x));
                row[(static_cast<size_t>(x) * c + ch) * 2] = static_cast<uint8_t>(u >> 8);
                row[(static_cast<size_t>(x) * c + ch) * 2 + 1] = static_cast<uint8_t>(u & 0xff);
            }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

inline Tensor<float> read_png16(const std::string& path) {
    std::unique_ptr<std::FILE, detail::FileCloser> fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw Error(errc::io_error, "read_png16: cannot open " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw Error(errc::io_error, "read_png16: libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw Error(errc::io_error, "read_png16: libpng error on " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    png_set_expand(png);  // palette -> rgb, low-depth gray -> 8
    if (png_get_bit_depth(png, info) < 16) png_set_expand_16(png);
    if (png_get_color_type(png, info) & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);

    int w = static_cast<int>(png_get_image_width(png, info));
    int h = static_cast<int>(png_get_image_height(png, info));
    int c = png_get_channels(png, info);
    if (c != 1 && c != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw Error(errc::integrity, "read_png16: unsupported channel count in " + path);
    }

    Tensor<float> img({c, h, w});
    std::vector<uint8_t> row(static_cast<size_t>(w) * c * 2);
    for (int y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < c; ++ch) {
                uint16_t u = static_cast<uint16_t>(
                    (row[(static_cast<size_t>(x) * c + ch) * 2] << 8) |
                    row[(static_cast<size_t>(x) * c + ch) * 2 + 1]);
                img.at(ch, y, x) = u / 65535.0f;
            }
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

}  // namespace facet
