#pragma once

#include <algorithm>
#include <functional>
#include <numeric>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "facelet/bank/shift.hpp"
#include "facelet/codec/model.hpp"
#include "facelet/synth/dataset.hpp"

namespace facelet::pseudo {

/// Flattened pyramids of one attribute domain ("X" lacks the attribute, "Y" has it).
struct FeatureIndex {
    std::string domain_tag;
    std::vector<std::string> ids;
    std::vector<float> vectors;  // row-major, ids.size() x dim
    std::map<int, Shape> level_shapes;
    std::size_t dim = 0;

    std::size_t size() const { return ids.size(); }
    const float* row(std::size_t i) const { return vectors.data() + i * dim; }

    void add(const std::string& id, const FeaturePyramid& p) {
        std::map<int, Shape> shapes;
        for (const auto& [l, t] : p.levels) shapes[l] = t.shape();
        if (ids.empty()) {
            level_shapes = shapes;
            dim = p.numel();
        } else if (shapes != level_shapes) {
            throw ShapeError("FeatureIndex: entry " + id + " has mismatched level shapes");
        }
        if (std::find(ids.begin(), ids.end(), id) != ids.end()) throw Error("FeatureIndex: duplicate sample_id " + id);
        ids.push_back(id);
        for (const auto& [l, t] : p.levels) vectors.insert(vectors.end(), t.storage().begin(), t.storage().end());
    }

    FeaturePyramid unflatten(const float* v) const {
        FeaturePyramid p;
        for (const auto& [l, s] : level_shapes) {
            const std::size_t n = shape_numel(s);
            p.levels[l] = Tensor(s, std::vector<float>(v, v + n));
            v += n;
        }
        return p;
    }
    FeaturePyramid entry(std::size_t i) const { return unflatten(row(i)); }
};

inline std::vector<float> flatten(const FeaturePyramid& p) {
    std::vector<float> v;
    v.reserve(p.numel());
    for (const auto& [l, t] : p.levels) v.insert(v.end(), t.storage().begin(), t.storage().end());
    return v;
}

/// Squared Euclidean distance with a fixed 8-lane double accumulation order.
inline double squared_distance(const float* a, const float* b, std::size_t n) {
    double lane[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (int k = 0; k < 8; ++k) {
            const double d = static_cast<double>(a[i + k]) - static_cast<double>(b[i + k]);
            lane[k] += d * d;
        }
    for (; i < n; ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        lane[0] += d * d;
    }
    return ((lane[0] + lane[1]) + (lane[2] + lane[3])) + ((lane[4] + lane[5]) + (lane[6] + lane[7]));
}

struct Neighbor {
    std::size_t index;
    double distance;
};

/// Exact K nearest rows, ascending distance, ties by ascending sample_id.
inline std::vector<Neighbor> knn_search(const FeatureIndex& index, const std::vector<float>& query, std::size_t k) {
    if (query.size() != index.dim)
        throw ShapeError("knn: query has " + std::to_string(query.size()) + " values, index rows have " +
                         std::to_string(index.dim));
    if (k == 0) throw Error("knn: K must be positive");
    if (k > index.size())
        throw Error("knn: K=" + std::to_string(k) + " exceeds index size " + std::to_string(index.size()) + " (domain " +
                    index.domain_tag + ")");
    std::vector<Neighbor> all(index.size());
    for (std::size_t i = 0; i < index.size(); ++i) all[i] = {i, squared_distance(index.row(i), query.data(), index.dim)};
    auto less = [&](const Neighbor& a, const Neighbor& b) {
        if (a.distance != b.distance) return a.distance < b.distance;
        return index.ids[a.index] < index.ids[b.index];
    };
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(), less);
    all.resize(k);
    return all;
}

inline std::vector<std::string> knn(const FeatureIndex& index, const std::vector<float>& query, std::size_t k) {
    std::vector<std::string> out;
    for (const auto& n : knn_search(index, query, k)) out.push_back(index.ids[n.index]);
    return out;
}

/// Encodes every sample passing `keep`, in dataset order, in batches.
inline FeatureIndex build_index(const CodecModel& codec, const std::vector<const synth::SyntheticPortrait*>& samples,
                                const std::function<bool(const synth::SyntheticPortrait&)>& keep,
                                const std::string& domain_tag, std::size_t batch = 32) {
    FeatureIndex index;
    index.domain_tag = domain_tag;
    std::vector<const synth::SyntheticPortrait*> chosen;
    for (const auto* s : samples)
        if (keep(*s)) {
            if (s->jitter.applied) throw Error("build_index: sample " + s->sample_id + " is jittered; index only aligned images");
            chosen.push_back(s);
        }
    if (chosen.empty()) throw Error("build_index: domain " + domain_tag + " is empty after filtering");
    for (std::size_t start = 0; start < chosen.size(); start += batch) {
        const std::size_t end = std::min(chosen.size(), start + batch);
        std::vector<const Tensor*> imgs;
        for (std::size_t i = start; i < end; ++i) imgs.push_back(&chosen[i]->image);
        const FeaturePyramid feats = encode(codec, stack(imgs));
        for (std::size_t i = start; i < end; ++i) index.add(chosen[i]->sample_id, unstack_pyramid(feats, i - start));
    }
    return index;
}

/// Mean of the given rows, accumulated in double in the listed order.
inline std::vector<double> mean_rows(const FeatureIndex& index, const std::vector<std::size_t>& rows) {
    std::vector<double> acc(index.dim, 0.0);
    for (auto r : rows) {
        const float* v = index.row(r);
        for (std::size_t i = 0; i < index.dim; ++i) acc[i] += v[i];
    }
    for (auto& a : acc) a /= static_cast<double>(rows.size());
    return acc;
}

inline FeaturePyramid difference_pyramid(const FeatureIndex& shape_from, const std::vector<double>& y,
                                         const std::vector<double>& x) {
    std::vector<float> d(y.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<float>(y[i] - x[i]);
    return shape_from.unflatten(d.data());
}

struct PseudoLabel {
    std::string sample_id;
    FeaturePyramid delta;
    std::size_t k_used = 0;
    std::vector<std::string> neighbor_ids_x;
    std::vector<std::string> neighbor_ids_y;
};

inline void require_compatible(const FeatureIndex& a, const FeatureIndex& b) {
    if (a.level_shapes != b.level_shapes) throw ShapeError("indices have different level shapes");
}

/// Mean of the K nearest Y features minus mean of the K nearest X features.
inline PseudoLabel pseudo_label_from_features(const std::string& sample_id, const FeaturePyramid& psi,
                                              const FeatureIndex& index_x, const FeatureIndex& index_y, std::size_t k) {
    require_compatible(index_x, index_y);
    const auto q = flatten(psi);
    const auto nx = knn_search(index_x, q, k);
    const auto ny = knn_search(index_y, q, k);
    PseudoLabel pl;
    pl.sample_id = sample_id;
    pl.k_used = k;
    std::vector<std::size_t> rx, ry;
    for (const auto& n : nx) {
        rx.push_back(n.index);
        pl.neighbor_ids_x.push_back(index_x.ids[n.index]);
    }
    for (const auto& n : ny) {
        ry.push_back(n.index);
        pl.neighbor_ids_y.push_back(index_y.ids[n.index]);
    }
    pl.delta = difference_pyramid(index_x, mean_rows(index_y, ry), mean_rows(index_x, rx));
    return pl;
}

inline PseudoLabel pseudo_label(const CodecModel& codec, const synth::SyntheticPortrait& x, const FeatureIndex& index_x,
                                const FeatureIndex& index_y, std::size_t k) {
    return pseudo_label_from_features(x.sample_id, encode(codec, x.image), index_x, index_y, k);
}

/// Query-independent baseline: mean(Y) - mean(X).
inline FeaturePyramid global_mean_direction(const FeatureIndex& index_x, const FeatureIndex& index_y) {
    if (index_x.size() == 0 || index_y.size() == 0) throw Error("global_mean_direction: empty index");
    require_compatible(index_x, index_y);
    std::vector<std::size_t> rx(index_x.size()), ry(index_y.size());
    std::iota(rx.begin(), rx.end(), 0);
    std::iota(ry.begin(), ry.end(), 0);
    return difference_pyramid(index_x, mean_rows(index_y, ry), mean_rows(index_x, rx));
}

/// Non-learned edit: decode(E(x) + lambda * dv*(x)).
inline Tensor dfi_edit(const CodecModel& codec, const Tensor& image, const FeatureIndex& index_x,
                       const FeatureIndex& index_y, std::size_t k, float lambda) {
    const FeaturePyramid psi = encode(codec, image);
    const PseudoLabel pl = pseudo_label_from_features("query", psi, index_x, index_y, k);
    return decode(codec, apply_shift(psi, pl.delta, lambda));
}

}  // namespace facelet::pseudo
