#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "facelet/core/random.hpp"
#include "facelet/core/tensor.hpp"
#include "facelet/io/png.hpp"

namespace facelet::synth {

/// Axis-aligned pixel box [x, x+w) x [y, y+h).
struct Box {
    int x = 0, y = 0, w = 0, h = 0;

    bool inside(int width, int height) const { return w > 0 && h > 0 && x >= 0 && y >= 0 && x + w <= width && y + h <= height; }
    bool contains(const Box& o) const { return o.x >= x && o.y >= y && o.x + o.w <= x + w && o.y + o.h <= y + h; }
    Box translated(int dx, int dy) const { return {x + dx, y + dy, w, h}; }
    double center_x() const { return x + w / 2.0; }
    double center_y() const { return y + h / 2.0; }
    int area() const { return w * h; }

    static Box hull(const Box& a, const Box& b) {
        const int x0 = std::min(a.x, b.x), y0 = std::min(a.y, b.y);
        const int x1 = std::max(a.x + a.w, b.x + b.w), y1 = std::max(a.y + a.h, b.y + b.h);
        return {x0, y0, x1 - x0, y1 - y0};
    }

    friend bool operator==(const Box&, const Box&) = default;
};

struct Attributes {
    bool mustache = false;
    bool smile = false;
    bool bright = false;
    bool wide_jaw = false;  // cosmetic marker correlated with mustache

    bool get(const std::string& name) const {
        if (name == "mustache") return mustache;
        if (name == "smile") return smile;
        if (name == "bright") return bright;
        if (name == "wide_jaw") return wide_jaw;
        throw Error("unknown attribute '" + name + "'");
    }

    friend bool operator==(const Attributes&, const Attributes&) = default;
};

inline const std::vector<std::string>& attribute_names() {
    static const std::vector<std::string> names{"mustache", "smile", "bright", "wide_jaw"};
    return names;
}

struct Jitter {
    int dx = 0, dy = 0;
    bool applied = false;
    friend bool operator==(const Jitter&, const Jitter&) = default;
};

struct SyntheticPortrait {
    Tensor image;  // [3,S,S], values k/255
    Attributes attributes;
    std::map<std::string, Box> regions;
    Jitter jitter;
    std::string sample_id;

    int size() const { return static_cast<int>(image.dim(1)); }
};

/// Marginal attribute rates. The jaw marker co-occurs with mustache at `jaw_given_mustache`.
struct AttributeSpec {
    double mustache = 0.5;
    double smile = 0.5;
    double bright = 0.5;
    double jaw_given_mustache = 0.8;
    double jaw_given_plain = 0.2;
};

/// Held-out split: ~10% of samples, decided by a hash of the id.
inline bool is_test_split(const std::string& sample_id) { return fnv1a(sample_id) % 10 == 0; }

inline std::string sample_id_for(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "s%05zu", index);
    return buf;
}

namespace detail {

struct Rgb {
    double r, g, b;
};

struct Canvas {
    int size;
    int ss;  // supersampling factor per axis
    std::vector<Rgb> px;  // supersampled

    Canvas(int s, int super, Rgb bg) : size(s), ss(super), px(static_cast<std::size_t>(s * super * s * super), bg) {}

    template <class Inside>
    void paint(const Inside& inside, Rgb c) {
        const int n = size * ss;
        for (int j = 0; j < n; ++j)
            for (int i = 0; i < n; ++i) {
                const double x = (i + 0.5) / ss, y = (j + 0.5) / ss;
                if (inside(x, y)) px[static_cast<std::size_t>(j * n + i)] = c;
            }
    }

    Tensor resolve(double offset) const {
        Tensor img({3, static_cast<std::size_t>(size), static_cast<std::size_t>(size)});
        const int n = size * ss;
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                Rgb acc{0, 0, 0};
                for (int sy = 0; sy < ss; ++sy)
                    for (int sx = 0; sx < ss; ++sx) {
                        const Rgb& p = px[static_cast<std::size_t>((y * ss + sy) * n + x * ss + sx)];
                        acc.r += p.r;
                        acc.g += p.g;
                        acc.b += p.b;
                    }
                const double k = 1.0 / (ss * ss);
                img.at(0, y, x) = static_cast<float>(acc.r * k + offset);
                img.at(1, y, x) = static_cast<float>(acc.g * k + offset);
                img.at(2, y, x) = static_cast<float>(acc.b * k + offset);
            }
        io::quantize_8bit(img);
        return img;
    }
};

inline Box box_from(double x0, double y0, double x1, double y1) {
    const int bx = static_cast<int>(std::floor(x0)), by = static_cast<int>(std::floor(y0));
    return {bx, by, static_cast<int>(std::ceil(x1)) - bx, static_cast<int>(std::ceil(y1)) - by};
}

}  // namespace detail

/// Draws one portrait from its own seed.
inline SyntheticPortrait render_portrait(std::uint64_t sample_seed, int size, const AttributeSpec& spec,
                                         std::string sample_id) {
    Rng rng(sample_seed);
    SyntheticPortrait p;
    p.sample_id = std::move(sample_id);
    auto& a = p.attributes;
    a.mustache = rng.bernoulli(spec.mustache);
    a.smile = rng.bernoulli(spec.smile);
    a.bright = rng.bernoulli(spec.bright);
    a.wide_jaw = rng.bernoulli(a.mustache ? spec.jaw_given_mustache : spec.jaw_given_plain);

    const double S = size;
    const detail::Rgb bg{rng.uniform(0.18, 0.32), rng.uniform(0.24, 0.38), rng.uniform(0.34, 0.50)};
    const double tone = rng.uniform();
    const detail::Rgb skin{0.58 + 0.24 * tone, 0.42 + 0.20 * tone, 0.32 + 0.16 * tone};
    const double scale = rng.uniform(0.9, 1.1);
    const double cx = S / 2 * (1 + rng.uniform(-0.1, 0.1));
    const double cy = S / 2 * (1 + rng.uniform(-0.1, 0.1));
    const double ax = 0.28 * S * scale, by = 0.36 * S * scale;
    const double jaw = a.wide_jaw ? 1.12 : 1.0;

    detail::Canvas cv(size, 3, bg);
    cv.paint(
        [&](double x, double y) {
            const double rx = (y > cy ? ax * jaw : ax);
            const double u = (x - cx) / rx, v = (y - cy) / by;
            return u * u + v * v <= 1.0;
        },
        skin);

    const detail::Rgb eye{0.10, 0.08, 0.09};
    const double ey = cy - 0.22 * by, ex = 0.38 * ax, erx = 0.14 * ax, ery = 0.08 * by;
    for (double side : {-1.0, 1.0})
        cv.paint(
            [&](double x, double y) {
                const double u = (x - (cx + side * ex)) / erx, v = (y - ey) / ery;
                return u * u + v * v <= 1.0;
            },
            eye);

    const detail::Rgb nose{skin.r * 0.82, skin.g * 0.80, skin.b * 0.80};
    const double ny = cy + 0.12 * by;
    cv.paint(
        [&](double x, double y) {
            const double u = (x - cx) / (0.07 * ax), v = (y - ny) / (0.14 * by);
            return u * u + v * v <= 1.0;
        },
        nose);

    // Mouth: a thick arc; smiling lowers the centre relative to the corners.
    const double my = cy + 0.52 * by, mw = 0.38 * ax;
    const double bend = (a.smile ? 0.13 : 0.02) * by;
    const double thick = std::max(1.1, 0.030 * S * scale);
    const detail::Rgb lips{0.58, 0.16, 0.17};
    cv.paint(
        [&](double x, double y) {
            const double u = (x - cx) / mw;
            if (std::abs(u) > 1.0) return false;
            const double curve = my + bend * (1.0 - u * u) - bend / 2;
            return std::abs(y - curve) <= thick / 2;
        },
        lips);
    const Box mouth_box = detail::box_from(cx - mw, my - bend / 2 - thick / 2, cx + mw, my + bend / 2 + thick / 2);

    // Where a mustache sits (or would sit): just above the mouth.
    const double sh = 0.16 * by, sw = 0.46 * ax;
    const double sy = my - bend / 2 - thick / 2 - 0.02 * by - sh / 2;
    const Box zone = detail::box_from(cx - sw, sy - sh / 2, cx + sw, sy + sh / 2);
    if (a.mustache) {
        const double shade = rng.uniform(-0.03, 0.03);
        const detail::Rgb hair{0.17 + shade, 0.10 + shade, 0.06 + shade};
        cv.paint([&](double x, double y) { return std::abs(x - cx) <= sw && std::abs(y - sy) <= sh / 2; }, hair);
    }

    p.image = cv.resolve(a.bright ? 0.12 : 0.0);

    const Box face = detail::box_from(cx - ax * jaw, cy - by, cx + ax * jaw, cy + by);
    p.regions["face"] = face;
    p.regions["mouth"] = Box::hull(mouth_box, zone);
    p.regions["mustache_zone"] = zone;
    if (a.mustache) p.regions["mustache"] = zone;
    if (a.smile) p.regions["smile"] = mouth_box;
    if (a.bright) p.regions["bright"] = face;
    if (a.wide_jaw) p.regions["wide_jaw"] = detail::box_from(cx - ax * jaw, cy, cx + ax * jaw, cy + by);
    return p;
}

/// Deterministic batch of portraits; sample i depends only on (seed, i).
inline std::vector<SyntheticPortrait> generate_portraits(std::uint64_t seed, std::size_t count, int size,
                                                         const AttributeSpec& spec = {}) {
    if (size != 32 && size != 64) throw Error("generate: size must be 32 or 64, got " + std::to_string(size));
    if (count < 2) throw Error("generate: count must be at least 2");
    std::vector<SyntheticPortrait> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i)
        out.push_back(render_portrait(derive_seed(seed, i), size, spec, sample_id_for(i)));
    return out;
}

/// Rigid translation of image and regions; exposed borders replicate the edge pixels.
inline SyntheticPortrait jittered_copy(const SyntheticPortrait& src, int dx, int dy) {
    const int S = src.size();
    if (std::abs(dx) > S / 8 || std::abs(dy) > S / 8)
        throw Error("jittered_copy: |dx|,|dy| must be <= " + std::to_string(S / 8));
    SyntheticPortrait out = src;
    for (auto& [name, box] : out.regions) {
        box = box.translated(dx, dy);
        if (!box.inside(S, S)) throw Error("jittered_copy: region '" + name + "' would leave the image");
    }
    for (std::size_t c = 0; c < 3; ++c)
        for (int y = 0; y < S; ++y)
            for (int x = 0; x < S; ++x) {
                const int sx = std::clamp(x - dx, 0, S - 1), sy = std::clamp(y - dy, 0, S - 1);
                out.image.at(c, y, x) = src.image.at(c, sy, sx);
            }
    out.jitter = {src.jitter.dx + dx, src.jitter.dy + dy, true};
    return out;
}

}  // namespace facelet::synth
