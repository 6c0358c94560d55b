#pragma once

#include <openssl/evp.h>

#include <string>
#include <string_view>

#include "facelet/io/png.hpp"

namespace facelet::io {

inline std::string base64_encode(const Bytes& data) {
    std::string out(4 * ((data.size() + 2) / 3), '\0');
    const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), data.data(), static_cast<int>(data.size()));
    out.resize(static_cast<std::size_t>(n));
    return out;
}

/// Strict RFC 4648 decoding: standard alphabet, mandatory padding, no whitespace.
inline Bytes base64_decode(std::string_view text) {
    if (text.size() % 4 != 0) throw FormatError("base64 length is not a multiple of 4");
    std::size_t pad = 0;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        const bool alpha = (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '+' || c == '/';
        if (c == '=') {
            if (i + 2 < text.size()) throw FormatError("base64 padding in the middle of the input");
            ++pad;
        } else if (!alpha || pad > 0) {
            throw FormatError("invalid base64 character");
        }
    }
    if (text.empty()) return {};
    Bytes out(text.size() / 4 * 3);
    const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()), static_cast<int>(text.size()));
    if (n < 0) throw FormatError("base64 decode failed");
    out.resize(static_cast<std::size_t>(n) - pad);
    return out;
}

/// Bilinear resample of a [3,H,W] image to [3,size,size] (pixel-centre aligned).
inline Tensor resize_bilinear(const Tensor& image, std::size_t size) {
    if (image.rank() != 3) throw ShapeError("resize expects [C,H,W], got " + shape_str(image.shape()));
    const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    if (h == size && w == size) return image;
    Tensor out({c, size, size});
    const double sy = static_cast<double>(h) / size, sx = static_cast<double>(w) / size;
    for (std::size_t y = 0; y < size; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
        const std::size_t y0 = static_cast<std::size_t>(fy), y1 = std::min(y0 + 1, h - 1);
        const double ty = fy - y0;
        for (std::size_t x = 0; x < size; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
            const std::size_t x0 = static_cast<std::size_t>(fx), x1 = std::min(x0 + 1, w - 1);
            const double tx = fx - x0;
            for (std::size_t k = 0; k < c; ++k) {
                const double top = image.at(k, y0, x0) * (1 - tx) + image.at(k, y0, x1) * tx;
                const double bot = image.at(k, y1, x0) * (1 - tx) + image.at(k, y1, x1) * tx;
                out.at(k, y, x) = static_cast<float>(top * (1 - ty) + bot * ty);
            }
        }
    }
    quantize_8bit(out);
    return out;
}

}  // namespace facelet::io
