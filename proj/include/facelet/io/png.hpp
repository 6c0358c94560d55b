#pragma once

#include <png.h>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "facelet/core/tensor.hpp"

namespace facelet::io {

class FormatError : public Error {
public:
    using Error::Error;
};

using Bytes = std::vector<std::uint8_t>;

inline Bytes read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path);
    return Bytes(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::string& path, const Bytes& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("short write to " + path);
}

inline std::uint8_t to_byte(float v) {
    const float c = std::min(std::max(v, 0.0f), 1.0f);
    return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

namespace detail {

struct PngWriteState {
    Bytes* out;
};

inline void png_write_cb(png_structp png, png_bytep data, png_size_t len) {
    auto* st = static_cast<PngWriteState*>(png_get_io_ptr(png));
    st->out->insert(st->out->end(), data, data + len);
}

inline void png_flush_cb(png_structp) {}

struct PngReadState {
    const Bytes* in;
    std::size_t pos;
};

inline void png_read_cb(png_structp png, png_bytep data, png_size_t len) {
    auto* st = static_cast<PngReadState*>(png_get_io_ptr(png));
    if (st->pos + len > st->in->size()) png_error(png, "truncated PNG");
    std::memcpy(data, st->in->data() + st->pos, len);
    st->pos += len;
}

[[noreturn]] inline void png_error_cb(png_structp png, png_const_charp msg) {
    *static_cast<std::string*>(png_get_error_ptr(png)) = msg;
    png_longjmp(png, 1);
}

inline void png_warn_cb(png_structp, png_const_charp) {}

inline Bytes encode_rows(const std::vector<std::uint8_t>& pixels, std::size_t w, std::size_t h, int color_type,
                         std::size_t channels) {
    Bytes out;
    std::string err;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, png_error_cb, png_warn_cb);
    if (!png) throw FormatError("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    PngWriteState st{&out};
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw FormatError("PNG encode failed: " + err);
    }
    png_set_write_fn(png, &st, png_write_cb, png_flush_cb);
    png_set_compression_level(png, 6);
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, color_type,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (std::size_t y = 0; y < h; ++y)
        png_write_row(png, const_cast<png_bytep>(pixels.data() + y * w * channels));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    return out;
}

}  // namespace detail

/// [3,H,W] in [0,1] -> 8-bit RGB PNG bytes.
inline Bytes encode_png(const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("encode_png expects [3,H,W], got " + shape_str(image.shape()));
    const std::size_t h = image.dim(1), w = image.dim(2);
    std::vector<std::uint8_t> px(h * w * 3);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < 3; ++c) px[(y * w + x) * 3 + c] = to_byte(image.at(c, y, x));
    return detail::encode_rows(px, w, h, PNG_COLOR_TYPE_RGB, 3);
}

/// [H,W] with values already in 0..255 -> 8-bit grayscale PNG.
inline Bytes encode_png_gray(const Tensor& map) {
    if (map.rank() != 2) throw ShapeError("encode_png_gray expects [H,W], got " + shape_str(map.shape()));
    std::vector<std::uint8_t> px(map.numel());
    for (std::size_t i = 0; i < map.numel(); ++i)
        px[i] = static_cast<std::uint8_t>(std::lround(std::min(std::max(map[i], 0.0f), 255.0f)));
    return detail::encode_rows(px, map.dim(1), map.dim(0), PNG_COLOR_TYPE_GRAY, 1);
}

/// Decodes any 8/16-bit PNG to [3,H,W] floats k/255 (gray is replicated, alpha dropped).
inline Tensor decode_png(const Bytes& bytes) {
    if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw FormatError("not a PNG stream");
    std::string err;
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_error_cb, detail::png_warn_cb);
    if (!png) throw FormatError("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    detail::PngReadState st{&bytes, 0};
    std::vector<std::uint8_t> px;
    png_uint_32 w = 0, h = 0;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError("PNG decode failed: " + err);
    }
    png_set_read_fn(png, &st, detail::png_read_cb);
    png_read_info(png, info);
    w = png_get_image_width(png, info);
    h = png_get_image_height(png, info);
    if (w == 0 || h == 0 || w > 8192 || h > 8192) png_error(png, "unsupported PNG dimensions");
    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);
    if (png_get_rowbytes(png, info) != static_cast<png_size_t>(w) * 3) png_error(png, "unexpected row layout");
    px.resize(static_cast<std::size_t>(w) * h * 3);
    std::vector<png_bytep> rows(h);
    for (png_uint_32 y = 0; y < h; ++y) rows[y] = px.data() + static_cast<std::size_t>(y) * w * 3;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    Tensor out({3, h, w});
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < 3; ++c) out.at(c, y, x) = static_cast<float>(px[(y * w + x) * 3 + c]) / 255.0f;
    return out;
}

/// Rounds every value to the nearest k/255 so in-memory images equal their PNG round trip.
inline void quantize_8bit(Tensor& image) {
    for (auto& v : image.storage()) v = static_cast<float>(to_byte(v)) / 255.0f;
}

inline void save_png(const std::string& path, const Tensor& image) { write_file(path, encode_png(image)); }
inline Tensor load_png(const std::string& path) { return decode_png(read_file(path)); }

}  // namespace facelet::io
