#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include <png.h>

#include "mdfi/errors.hpp"
#include "mdfi/tensor.hpp"

namespace mdfi {

// Grayscale raster with intensities in [0,1]. 8-bit I/O maps v -> v/255
// on read and round(v*255) on write.
struct GrayImage {
    std::size_t width = 0, height = 0;
    std::vector<double> pixels;   // row-major, height*width

    GrayImage() = default;
    GrayImage(std::size_t w, std::size_t h, double fill = 0.0)
        : width(w), height(h), pixels(w * h, fill) {}

    double& at(std::size_t y, std::size_t x) { return pixels[y * width + x]; }
    double at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
    std::size_t size() const { return pixels.size(); }
};

struct RgbImage {
    std::size_t width = 0, height = 0;
    std::vector<double> pixels;   // interleaved r,g,b, each in [0,1]

    RgbImage() = default;
    RgbImage(std::size_t w, std::size_t h) : width(w), height(h), pixels(3 * w * h, 0.0) {}

    double& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[3 * (y * width + x) + c]; }
    double at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[3 * (y * width + x) + c]; }
};

// Binary raster (labels, predictions, field-of-view masks).
struct Mask {
    std::size_t width = 0, height = 0;
    std::vector<std::uint8_t> v;   // 0 or 1

    Mask() = default;
    Mask(std::size_t w, std::size_t h, std::uint8_t fill = 0)
        : width(w), height(h), v(w * h, fill) {}

    std::uint8_t& at(std::size_t y, std::size_t x) { return v[y * width + x]; }
    std::uint8_t at(std::size_t y, std::size_t x) const { return v[y * width + x]; }
    std::size_t size() const { return v.size(); }
    std::size_t count() const {
        std::size_t n = 0;
        for (auto b : v) n += b;
        return n;
    }
};

inline Mask gray_to_mask(const GrayImage& img, double threshold = 0.5) {
    Mask m(img.width, img.height);
    for (std::size_t i = 0; i < img.size(); ++i) m.v[i] = img.pixels[i] >= threshold ? 1 : 0;
    return m;
}

inline GrayImage mask_to_gray(const Mask& m) {
    GrayImage img(m.width, m.height);
    for (std::size_t i = 0; i < m.size(); ++i) img.pixels[i] = m.v[i] ? 1.0 : 0.0;
    return img;
}

inline std::uint8_t to_byte(double v) {
    const double s = std::lround(std::clamp(v, 0.0, 1.0) * 255.0);
    return static_cast<std::uint8_t>(s);
}

inline TensorPtr gray_to_tensor(const GrayImage& img, bool requires_grad = false) {
    return Tensor::from({1, img.height, img.width}, img.pixels, requires_grad);
}

inline GrayImage tensor_to_gray(const Tensor& t) {
    if (t.shape.size() != 3 || t.shape[0] != 1)
        throw DimensionError("tensor_to_gray: expected [1,H,W], got " + shape_str(t.shape));
    GrayImage img(t.shape[2], t.shape[1]);
    img.pixels = t.data;
    return img;
}

// ---------------------------------------------------------------------------
// PGM (binary P5, 8-bit)
// ---------------------------------------------------------------------------

inline void write_pgm(const std::string& path, const GrayImage& img) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open for writing: " + path);
    os << "P5\n" << img.width << " " << img.height << "\n255\n";
    std::vector<std::uint8_t> row(img.width);
    for (std::size_t y = 0; y < img.height; ++y) {
        for (std::size_t x = 0; x < img.width; ++x) row[x] = to_byte(img.at(y, x));
        os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!os) throw DataError("write failure: " + path);
}

inline GrayImage read_pgm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open: " + path);
    std::string magic;
    is >> magic;
    if (magic != "P5") throw DataError("not a binary PGM (P5): " + path);
    auto next_int = [&is, &path]() {
        // skip whitespace and '#' comment lines
        int c = is.get();
        while (c == '#' || std::isspace(c)) {
            if (c == '#') while (c != '\n' && c != EOF) c = is.get();
            c = is.get();
        }
        long v = 0;
        bool any = false;
        while (c >= '0' && c <= '9') { v = v * 10 + (c - '0'); c = is.get(); any = true; }
        if (!any) throw DataError("malformed PGM header: " + path);
        return v;
    };
    const long w = next_int(), h = next_int(), maxval = next_int();
    if (w <= 0 || h <= 0 || maxval != 255) throw DataError("unsupported PGM (need 8-bit): " + path);
    GrayImage img(static_cast<std::size_t>(w), static_cast<std::size_t>(h));
    std::vector<std::uint8_t> buf(img.size());
    if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
        throw DataError("truncated PGM: " + path);
    for (std::size_t i = 0; i < buf.size(); ++i) img.pixels[i] = buf[i] / 255.0;
    return img;
}

// ---------------------------------------------------------------------------
// PNG via libpng (8-bit gray and RGB)
// ---------------------------------------------------------------------------

namespace detail {

struct PngReader {
    png_structp png = nullptr;
    png_infop info = nullptr;
    std::FILE* fp = nullptr;
    ~PngReader() {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
        if (fp) std::fclose(fp);
    }
};

struct PngWriter {
    png_structp png = nullptr;
    png_infop info = nullptr;
    std::FILE* fp = nullptr;
    ~PngWriter() {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
        if (fp) std::fclose(fp);
    }
};

// decodes any 8/16-bit gray/palette/rgb/rgba PNG to 8-bit RGB rows
inline std::vector<std::uint8_t> read_png_rgb8(const std::string& path,
                                               std::size_t& w, std::size_t& h) {
    PngReader r;
    r.fp = std::fopen(path.c_str(), "rb");
    if (!r.fp) throw DataError("cannot open: " + path);
    png_byte header[8];
    if (std::fread(header, 1, 8, r.fp) != 8 || png_sig_cmp(header, 0, 8))
        throw DataError("not a PNG file: " + path);
    r.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!r.png) throw DataError("libpng init failure");
    r.info = png_create_info_struct(r.png);
    if (!r.info) throw DataError("libpng init failure");
    if (setjmp(png_jmpbuf(r.png))) throw DataError("malformed PNG: " + path);
    png_init_io(r.png, r.fp);
    png_set_sig_bytes(r.png, 8);
    png_read_info(r.png, r.info);

    w = png_get_image_width(r.png, r.info);
    h = png_get_image_height(r.png, r.info);
    const png_byte color = png_get_color_type(r.png, r.info);
    const png_byte depth = png_get_bit_depth(r.png, r.info);
    if (depth == 16) png_set_strip_16(r.png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(r.png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(r.png);
    if (png_get_valid(r.png, r.info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(r.png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(r.png);
    png_set_strip_alpha(r.png);
    png_read_update_info(r.png, r.info);

    std::vector<std::uint8_t> data(3 * w * h);
    std::vector<png_bytep> rows(h);
    for (std::size_t y = 0; y < h; ++y) rows[y] = data.data() + 3 * w * y;
    png_read_image(r.png, rows.data());
    png_read_end(r.png, nullptr);
    return data;
}

} // namespace detail

inline RgbImage read_png_rgb(const std::string& path) {
    std::size_t w = 0, h = 0;
    const auto bytes = detail::read_png_rgb8(path, w, h);
    RgbImage img(w, h);
    for (std::size_t i = 0; i < 3 * w * h; ++i) img.pixels[i] = bytes[i] / 255.0;
    return img;
}

inline GrayImage read_png_gray(const std::string& path) {
    std::size_t w = 0, h = 0;
    const auto bytes = detail::read_png_rgb8(path, w, h);
    GrayImage img(w, h);
    for (std::size_t i = 0; i < w * h; ++i) {
        // file was gray if all channels agree; otherwise average
        const double r = bytes[3 * i], g = bytes[3 * i + 1], b = bytes[3 * i + 2];
        img.pixels[i] = (r == g && g == b) ? r / 255.0 : (r + g + b) / (3.0 * 255.0);
    }
    return img;
}

inline void write_png_gray(const std::string& path, const GrayImage& img) {
    detail::PngWriter wr;
    wr.fp = std::fopen(path.c_str(), "wb");
    if (!wr.fp) throw DataError("cannot open for writing: " + path);
    wr.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!wr.png) throw DataError("libpng init failure");
    wr.info = png_create_info_struct(wr.png);
    if (!wr.info) throw DataError("libpng init failure");
    if (setjmp(png_jmpbuf(wr.png))) throw DataError("PNG write failure: " + path);
    png_init_io(wr.png, wr.fp);
    png_set_IHDR(wr.png, wr.info, static_cast<png_uint_32>(img.width),
                 static_cast<png_uint_32>(img.height), 8, PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(wr.png, wr.info);
    std::vector<std::uint8_t> row(img.width);
    for (std::size_t y = 0; y < img.height; ++y) {
        for (std::size_t x = 0; x < img.width; ++x) row[x] = to_byte(img.at(y, x));
        png_write_row(wr.png, row.data());
    }
    png_write_end(wr.png, nullptr);
}

// Reads a grayscale image by extension (.png or .pgm).
inline GrayImage read_gray_auto(const std::string& path) {
    if (path.size() >= 4 && path.substr(path.size() - 4) == ".pgm") return read_pgm(path);
    return read_png_gray(path);
}

inline void write_gray_auto(const std::string& path, const GrayImage& img) {
    if (path.size() >= 4 && path.substr(path.size() - 4) == ".pgm") write_pgm(path, img);
    else write_png_gray(path, img);
}

} // namespace mdfi
