#include "gradshift/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <vector>

#include "gradshift/error.hpp"

namespace gradshift {

namespace {

double luma(double r, double g, double b) {
    if (r == g && g == b) return r / 255.0;
    return std::clamp((0.299 * r + 0.587 * g + 0.114 * b) / 255.0, 0.0, 1.0);
}

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

Tensor decode_png(const std::string& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("png: cannot open " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png: out of memory");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("png: out of memory");
    }
    std::vector<png_bytep> rows;
    std::vector<png_byte> pixels;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("png: failed to decode " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    // Normalize everything to 8-bit RGBA.
    png_set_expand(png);
    if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
    const png_byte color = png_get_color_type(png, info);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(png);
    png_set_filler(png, 0xFF, PNG_FILLER_AFTER);
    png_read_update_info(png, info);

    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    const size_t stride = png_get_rowbytes(png, info);
    pixels.resize(stride * static_cast<size_t>(h));
    rows.resize(static_cast<size_t>(h));
    for (int y = 0; y < h; ++y) rows[static_cast<size_t>(y)] = pixels.data() + stride * static_cast<size_t>(y);
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    Tensor out = Tensor::zeros({h, w, 1});
    for (int y = 0; y < h; ++y) {
        const png_byte* row = pixels.data() + stride * static_cast<size_t>(y);
        for (int x = 0; x < w; ++x)
            out[static_cast<long>(y) * w + x] =
                luma(row[4 * x], row[4 * x + 1], row[4 * x + 2]);
    }
    return out;
}

uint32_t rd_u32(const uint8_t* p) {
    return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
           (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}
uint16_t rd_u16(const uint8_t* p) {
    return static_cast<uint16_t>(p[0] | (p[1] << 8));
}

Tensor decode_bmp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("bmp: cannot open " + path);
    std::vector<uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < 54 || buf[0] != 'B' || buf[1] != 'M')
        throw IoError("bmp: not a BMP file: " + path);
    const uint32_t data_offset = rd_u32(&buf[10]);
    const uint32_t dib_size = rd_u32(&buf[14]);
    if (dib_size < 40) throw IoError("bmp: unsupported header in " + path);
    const int32_t width = static_cast<int32_t>(rd_u32(&buf[18]));
    int32_t height = static_cast<int32_t>(rd_u32(&buf[22]));
    const uint16_t bpp = rd_u16(&buf[28]);
    const uint32_t compression = rd_u32(&buf[30]);
    if (compression != 0) throw IoError("bmp: compressed BMP not supported: " + path);
    if (bpp != 8 && bpp != 24 && bpp != 32)
        throw IoError("bmp: unsupported bit depth " + std::to_string(bpp) + " in " + path);
    const bool top_down = height < 0;
    if (top_down) height = -height;
    if (width <= 0 || height <= 0) throw IoError("bmp: bad dimensions in " + path);

    uint32_t palette_count = rd_u32(&buf[46]);
    if (bpp == 8 && palette_count == 0) palette_count = 256;
    const uint8_t* palette = buf.data() + 14 + dib_size;
    if (bpp == 8 && 14 + dib_size + 4ull * palette_count > buf.size())
        throw IoError("bmp: truncated palette in " + path);

    const size_t row_bytes = (static_cast<size_t>(width) * bpp / 8 + 3) & ~size_t{3};
    if (data_offset + row_bytes * static_cast<size_t>(height) > buf.size())
        throw IoError("bmp: truncated pixel data in " + path);

    Tensor out = Tensor::zeros({height, width, 1});
    for (int y = 0; y < height; ++y) {
        const int src_y = top_down ? y : height - 1 - y;
        const uint8_t* row = buf.data() + data_offset + row_bytes * static_cast<size_t>(src_y);
        for (int x = 0; x < width; ++x) {
            double r, g, b;
            if (bpp == 8) {
                const uint8_t idx = row[x];
                if (idx >= palette_count) throw IoError("bmp: palette index out of range in " + path);
                const uint8_t* e = palette + 4 * idx; // BGRA
                b = e[0]; g = e[1]; r = e[2];
            } else {
                const uint8_t* p = row + x * (bpp / 8); // BGR(A)
                b = p[0]; g = p[1]; r = p[2];
            }
            out[static_cast<long>(y) * width + x] = luma(r, g, b);
        }
    }
    return out;
}

void write_png(const std::string& path, int h, int w, int channels,
               const std::vector<uint8_t>& pixels) {
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("png: cannot write " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png: out of memory");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("png: out of memory");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("png: failed to encode " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(static_cast<size_t>(h));
    for (int y = 0; y < h; ++y)
        rows[static_cast<size_t>(y)] =
            const_cast<png_bytep>(pixels.data() + static_cast<size_t>(y) * w * channels);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

uint8_t to_byte(double v) {
    return static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

} // namespace

Tensor load_image_gray(const std::string& path) {
    std::ifstream probe(path, std::ios::binary);
    if (!probe) throw IoError("image: cannot open " + path);
    uint8_t magic[8] = {0};
    probe.read(reinterpret_cast<char*>(magic), 8);
    probe.close();
    static const uint8_t png_sig[8] = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
    if (std::memcmp(magic, png_sig, 8) == 0) return decode_png(path);
    if (magic[0] == 'B' && magic[1] == 'M') return decode_bmp(path);
    throw IoError("image: unrecognized format: " + path);
}

void save_png_gray(const std::string& path, const Tensor& img) {
    const bool flat = img.rank() == 2;
    if (!(flat || (img.rank() == 3 && img.dim(2) == 1)))
        throw InvalidArgument("save_png_gray: expected [H,W] or [H,W,1], got " + img.shape_str());
    const int h = img.dim(0), w = img.dim(1);
    std::vector<uint8_t> pixels(static_cast<size_t>(h) * w);
    for (long i = 0; i < static_cast<long>(h) * w; ++i) pixels[static_cast<size_t>(i)] = to_byte(img[i]);
    write_png(path, h, w, 1, pixels);
}

void save_png_rgb(const std::string& path, const Tensor& img) {
    if (img.rank() != 3 || img.dim(2) != 3)
        throw InvalidArgument("save_png_rgb: expected [H,W,3], got " + img.shape_str());
    const int h = img.dim(0), w = img.dim(1);
    std::vector<uint8_t> pixels(static_cast<size_t>(h) * w * 3);
    for (long i = 0; i < static_cast<long>(h) * w * 3; ++i) pixels[static_cast<size_t>(i)] = to_byte(img[i]);
    write_png(path, h, w, 3, pixels);
}

Tensor resize_bilinear(const Tensor& img, int out_h, int out_w) {
    if (img.rank() != 3 || img.dim(2) != 1)
        throw InvalidArgument("resize_bilinear: expected [H,W,1], got " + img.shape_str());
    if (out_h <= 0 || out_w <= 0) throw InvalidArgument("resize_bilinear: bad output size");
    const int h = img.dim(0), w = img.dim(1);
    Tensor out = Tensor::zeros({out_h, out_w, 1});
    const double sy = static_cast<double>(h) / out_h;
    const double sx = static_cast<double>(w) / out_w;
    for (int oy = 0; oy < out_h; ++oy) {
        const double fy = (oy + 0.5) * sy - 0.5;
        const double ty = fy - std::floor(fy);
        const int y0 = std::clamp(static_cast<int>(std::floor(fy)), 0, h - 1);
        const int y1 = std::clamp(static_cast<int>(std::floor(fy)) + 1, 0, h - 1);
        for (int ox = 0; ox < out_w; ++ox) {
            const double fx = (ox + 0.5) * sx - 0.5;
            const double tx = fx - std::floor(fx);
            const int x0 = std::clamp(static_cast<int>(std::floor(fx)), 0, w - 1);
            const int x1 = std::clamp(static_cast<int>(std::floor(fx)) + 1, 0, w - 1);
            const double v00 = img[static_cast<long>(y0) * w + x0];
            const double v01 = img[static_cast<long>(y0) * w + x1];
            const double v10 = img[static_cast<long>(y1) * w + x0];
            const double v11 = img[static_cast<long>(y1) * w + x1];
            out[static_cast<long>(oy) * out_w + ox] =
                (1 - ty) * ((1 - tx) * v00 + tx * v01) + ty * ((1 - tx) * v10 + tx * v11);
        }
    }
    return out;
}

Tensor resize_nearest(const Tensor& img, int out_h, int out_w) {
    if (img.rank() != 3 || img.dim(2) != 1)
        throw InvalidArgument("resize_nearest: expected [H,W,1], got " + img.shape_str());
    if (out_h <= 0 || out_w <= 0) throw InvalidArgument("resize_nearest: bad output size");
    const int h = img.dim(0), w = img.dim(1);
    Tensor out = Tensor::zeros({out_h, out_w, 1});
    for (int oy = 0; oy < out_h; ++oy) {
        const int y = std::min(static_cast<int>((oy + 0.5) * h / out_h), h - 1);
        for (int ox = 0; ox < out_w; ++ox) {
            const int x = std::min(static_cast<int>((ox + 0.5) * w / out_w), w - 1);
            out[static_cast<long>(oy) * out_w + ox] = img[static_cast<long>(y) * w + x];
        }
    }
    return out;
}

} // namespace gradshift
