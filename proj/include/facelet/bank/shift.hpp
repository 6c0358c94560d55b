#pragma once

#include <cmath>

#include "facelet/codec/model.hpp"

namespace facelet {

/// psi + lambda * delta, level by level. lambda == 0 returns psi unchanged (bit for bit, signed zeros included).
inline FeaturePyramid apply_shift(const FeaturePyramid& psi, const FeaturePyramid& delta, float lambda) {
    if (!std::isfinite(lambda)) throw Error("apply_shift: lambda must be finite");
    if (psi.levels.size() != delta.levels.size()) throw ShapeError("apply_shift: level sets differ");
    FeaturePyramid out = psi;
    for (auto& [l, t] : out.levels) {
        auto it = delta.levels.find(l);
        if (it == delta.levels.end()) throw ShapeError("apply_shift: delta lacks level " + std::to_string(l));
        const Tensor& d = it->second;
        if (d.shape() != t.shape())
            throw ShapeError("apply_shift: level " + std::to_string(l) + " shapes " + shape_str(t.shape()) + " vs " +
                             shape_str(d.shape()));
        if (lambda == 0.0f) continue;
        for (std::size_t i = 0; i < t.numel(); ++i) t[i] += lambda * d[i];
    }
    return out;
}

}  // namespace facelet
