#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "facelet/bank/facelet.hpp"
#include "facelet/pseudo/knn.hpp"
#include "facelet/synth/portrait.hpp"

namespace facelet::eval {

// ---- heat maps -------------------------------------------------------------

struct HeatMap {
    std::map<int, Tensor> levels;  // [H_l, W_l]
    Tensor aggregate;              // [S, S], sum of nearest-upsampled level maps
};

/// H_ij = sum_k v_ijk^2 for one [C,H,W] map.
inline Tensor channel_energy(const Tensor& v) {
    if (v.rank() != 3) throw ShapeError("heatmap expects [C,H,W] levels, got " + shape_str(v.shape()));
    const std::size_t c = v.dim(0), hw = v.dim(1) * v.dim(2);
    std::vector<double> acc(hw, 0.0);
    for (std::size_t k = 0; k < c; ++k) {
        const float* p = v.data() + k * hw;
        for (std::size_t i = 0; i < hw; ++i) acc[i] += static_cast<double>(p[i]) * p[i];
    }
    Tensor out({v.dim(1), v.dim(2)});
    for (std::size_t i = 0; i < hw; ++i) out[i] = static_cast<float>(acc[i]);
    return out;
}

inline HeatMap heatmap(const FeaturePyramid& delta, std::size_t image_size) {
    HeatMap hm;
    hm.aggregate = Tensor::zeros({image_size, image_size});
    for (const auto& [l, v] : delta.levels) {
        Tensor e = channel_energy(v);
        const std::size_t h = e.dim(0), w = e.dim(1);
        if (image_size % h != 0 || image_size % w != 0)
            throw ShapeError("heatmap: level " + std::to_string(l) + " does not tile the image");
        const std::size_t fy = image_size / h, fx = image_size / w;
        for (std::size_t y = 0; y < image_size; ++y)
            for (std::size_t x = 0; x < image_size; ++x) hm.aggregate[y * image_size + x] += e[(y / fy) * w + x / fx];
        hm.levels[l] = std::move(e);
    }
    return hm;
}

/// Aggregate map scaled so its maximum is 255 (all zeros stay zero).
inline Tensor normalized_heatmap(const HeatMap& hm) {
    Tensor out = hm.aggregate;
    float mx = 0;
    for (float v : out.storage()) mx = std::max(mx, v);
    if (mx > 0)
        for (auto& v : out.storage()) v = v / mx * 255.0f;
    return out;
}

/// Share of the aggregate heat mass inside `region` grown by `dilation` pixels (clipped to the image).
inline double locality_fraction(const HeatMap& hm, const synth::Box& region, int dilation) {
    const int h = static_cast<int>(hm.aggregate.dim(0)), w = static_cast<int>(hm.aggregate.dim(1));
    if (!region.inside(w, h)) throw Error("locality_fraction: region outside the image");
    if (dilation < 0) throw Error("locality_fraction: negative dilation");
    const int x0 = std::max(0, region.x - dilation), y0 = std::max(0, region.y - dilation);
    const int x1 = std::min(w, region.x + region.w + dilation), y1 = std::min(h, region.y + region.h + dilation);
    double inside = 0, total = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double v = hm.aggregate[static_cast<std::size_t>(y * w + x)];
            total += v;
            if (x >= x0 && x < x1 && y >= y0 && y < y1) inside += v;
        }
    return total > 0 ? inside / total : 0.0;
}

/// Pixels per finest-tap cell; locality dilation is expressed in these cells.
inline int finest_cell_pixels(const CodecConfig& cfg) {
    return static_cast<int>(cfg.image_size / cfg.resolution(cfg.tap_levels.front()));
}

// ---- attribute probe -------------------------------------------------------

class ProbeError : public Error {
public:
    using Error::Error;
};

/// Two conv blocks and a linear head; score is the positive-class probability.
class AttributeProbe {
public:
    AttributeProbe() = default;
    AttributeProbe(std::size_t image_size, std::uint64_t seed) : image_size_(image_size) {
        Rng rng(derive_seed(seed, 0x9B));
        conv1_ = ConvLayer(3, 8, 3, rng);
        conv2_ = ConvLayer(8, 16, 3, rng);
        const std::size_t feat = 16 * (image_size / 4) * (image_size / 4);
        const double bound = std::sqrt(1.0 / static_cast<double>(feat));
        head_w_ = Parameter(uniform_tensor<float>({1, feat}, rng, -bound, bound));
        head_b_ = Parameter(Tensor::zeros({1}));
    }

    Var logits_var(const Tensor& images) const {
        Var x = Var::constant(images.rank() == 3 ? images.reshaped({1, images.dim(0), images.dim(1), images.dim(2)})
                                                 : images);
        const std::size_t n = x.shape()[0];
        Var h = downsample2x(relu(conv1_.forward(x)));
        h = downsample2x(relu(conv2_.forward(h)));
        h = reshape(h, {n, shape_numel(h.shape()) / n});
        return linear(h, ConvLayer::param_var(head_w_), ConvLayer::param_var(head_b_));
    }

    double score(const Tensor& image) const {
        NoGradGuard ng;
        const double z = logits_var(image).value()[0];
        return 1.0 / (1.0 + std::exp(-z));
    }

    std::vector<double> scores(const Tensor& batch) const {
        NoGradGuard ng;
        const Tensor z = logits_var(batch).value();
        std::vector<double> out;
        for (float v : z.storage()) out.push_back(1.0 / (1.0 + std::exp(-static_cast<double>(v))));
        return out;
    }

    std::vector<Parameter*> parameters() {
        return {&conv1_.weight, &conv1_.bias, &conv2_.weight, &conv2_.bias, &head_w_, &head_b_};
    }

    std::string attribute;
    double heldout_accuracy = 0;

private:
    std::size_t image_size_ = 0;
    ConvLayer conv1_, conv2_;
    Parameter head_w_, head_b_;
};

struct ProbeConfig {
    TrainSchedule schedule{.epochs = 3, .batch_size = 16, .lr = 2e-3, .decay_every = 0};
    double accuracy_floor = 0.97;
};

/// Trains on `train`, measures accuracy on `heldout`; throws ProbeError below the floor.
inline AttributeProbe attribute_probe_train(const std::vector<const synth::SyntheticPortrait*>& train,
                                            const std::vector<const synth::SyntheticPortrait*>& heldout,
                                            const std::string& attribute, const ProbeConfig& cfg = {}) {
    if (train.empty() || heldout.empty()) throw ProbeError("probe: empty train or held-out set");
    const std::size_t size = static_cast<std::size_t>(train.front()->size());
    AttributeProbe probe(size, cfg.schedule.seed);
    probe.attribute = attribute;
    detail::run_epochs(probe.parameters(), train.size(), cfg.schedule, "probe:" + attribute,
                       [&](const std::vector<std::size_t>& idx, std::size_t) {
                           std::vector<const Tensor*> imgs;
                           Tensor targets({idx.size(), 1});
                           for (std::size_t i = 0; i < idx.size(); ++i) {
                               imgs.push_back(&train[idx[i]]->image);
                               targets[i] = train[idx[i]]->attributes.get(attribute) ? 1.0f : 0.0f;
                           }
                           return bce_with_logits(probe.logits_var(stack(imgs)), targets);
                       });
    std::size_t correct = 0;
    for (const auto* s : heldout) correct += (probe.score(s->image) > 0.5) == s->attributes.get(attribute);
    probe.heldout_accuracy = static_cast<double>(correct) / static_cast<double>(heldout.size());
    if (probe.heldout_accuracy < cfg.accuracy_floor)
        throw ProbeError("probe for '" + attribute + "' reached " + std::to_string(probe.heldout_accuracy) +
                         " held-out accuracy, below the floor " + std::to_string(cfg.accuracy_floor));
    return probe;
}

inline double probe_score(const AttributeProbe& probe, const Tensor& image) { return probe.score(image); }

// ---- rank statistics -------------------------------------------------------

/// 1-based ranks, ties share their average rank.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
        i = j + 1;
    }
    return r;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n, mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa == 0 || sbb == 0) return 0.0;
    return sab / std::sqrt(saa * sbb);
}

inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.size() < 2) throw Error("spearman: need two equally long series of length >= 2");
    return pearson(average_ranks(a), average_ranks(b));
}

inline double median(std::vector<double> v) {
    if (v.empty()) throw Error("median of empty series");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---- strength sweep --------------------------------------------------------

inline const std::vector<float>& default_lambdas() {
    static const std::vector<float> l{0.0f, 0.2f, 0.4f, 0.6f, 0.8f, 1.0f, 1.2f, 1.4f, 1.6f, 1.8f};
    return l;
}

struct SweepResult {
    std::vector<float> lambdas;
    std::vector<double> scores;
    double spearman_unit = 0;  // over lambda in [0, 1]; 0 when fewer than two such points
};

inline SweepResult strength_sweep(const CodecModel& codec, const FaceletBank& bank, const AttributeProbe& probe,
                                  const Tensor& image, const std::vector<float>& lambdas = default_lambdas()) {
    check_bank(codec, bank);
    EditCache cache(codec, image);
    SweepResult r;
    r.lambdas = lambdas;
    std::vector<double> lu, su;
    for (float l : lambdas) {
        const double s = probe.score(cache.render(codec, bank, l));
        r.scores.push_back(s);
        if (l >= 0.0f && l <= 1.0f) {
            lu.push_back(l);
            su.push_back(s);
        }
    }
    r.spearman_unit = lu.size() >= 2 ? spearman(lu, su) : 0.0;
    return r;
}

// ---- timing ----------------------------------------------------------------

struct Timing {
    double median_ms = 0, min_ms = 0, max_ms = 0;
    std::size_t reps = 0;
};

inline Timing time_it(const std::function<void()>& fn, std::size_t reps, std::size_t warmup = 2) {
    if (reps < 1) throw Error("time_it: need at least one repetition");
    for (std::size_t i = 0; i < warmup; ++i) fn();
    std::vector<double> ms;
    for (std::size_t i = 0; i < reps; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        fn();
        ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    }
    return {median(ms), *std::min_element(ms.begin(), ms.end()), *std::max_element(ms.begin(), ms.end()), reps};
}

struct BenchResult {
    Timing bank_edit, dfi_edit, relambda;
    std::size_t index_size = 0;
};

inline BenchResult bench(const CodecModel& codec, const FaceletBank& bank, const pseudo::FeatureIndex& index_x,
                         const pseudo::FeatureIndex& index_y, std::size_t k, const Tensor& image,
                         std::size_t repetitions = 20) {
    if (repetitions < 20) throw Error("bench: at least 20 repetitions are required");
    check_bank(codec, bank);
    BenchResult r;
    r.index_size = index_x.size() + index_y.size();
    volatile float sink = 0;
    r.bank_edit = time_it([&] { sink = sink + edit_image(codec, bank, image, 1.0f)[0]; }, repetitions);
    r.dfi_edit = time_it([&] { sink = sink + pseudo::dfi_edit(codec, image, index_x, index_y, k, 1.0f)[0]; }, repetitions);
    EditCache cache(codec, image);
    cache.delta(bank);
    float lambda = 0.0f;
    r.relambda = time_it(
        [&] {
            lambda = lambda >= 1.8f ? 0.1f : lambda + 0.1f;
            sink = sink + cache.render(codec, bank, lambda)[0];
        },
        repetitions);
    return r;
}

inline nlohmann::json timing_json(const Timing& t) {
    return {{"median_ms", t.median_ms}, {"min_ms", t.min_ms}, {"max_ms", t.max_ms}, {"reps", t.reps}};
}

inline nlohmann::json bench_json(const BenchResult& b) {
    return {{"bank_edit_ms", b.bank_edit.median_ms},
            {"dfi_edit_ms", b.dfi_edit.median_ms},
            {"relambda_ms", b.relambda.median_ms},
            {"index_size", b.index_size},
            {"detail",
             {{"bank_edit", timing_json(b.bank_edit)},
              {"dfi_edit", timing_json(b.dfi_edit)},
              {"relambda", timing_json(b.relambda)}}}};
}

// ---- layer ablation --------------------------------------------------------

struct AblationEntry {
    std::vector<int> levels;
    double mean_delta = 0;
};

/// Mean probe change (edit at lambda minus reconstruction) when the shift is kept only on `levels`.
inline std::vector<AblationEntry> layer_ablation(const CodecModel& codec, const FaceletBank& bank,
                                                 const AttributeProbe& probe, const std::vector<Tensor>& images,
                                                 const std::vector<std::vector<int>>& subsets, float lambda = 1.0f) {
    check_bank(codec, bank);
    if (images.empty()) throw Error("layer_ablation: no images");
    std::vector<AblationEntry> out;
    for (const auto& s : subsets) out.push_back({s, 0.0});
    for (const auto& img : images) {
        EditCache cache(codec, img);
        const double base = probe.score(decode(codec, cache.psi()));
        const FeaturePyramid& dv = cache.delta(bank);
        for (auto& e : out) {
            const Tensor edited = decode(codec, apply_shift(cache.psi(), mask_levels(dv, e.levels), lambda));
            e.mean_delta += probe.score(edited) - base;
        }
    }
    for (auto& e : out) e.mean_delta /= static_cast<double>(images.size());
    return out;
}

inline std::string subset_name(const std::vector<int>& levels) {
    std::string s = "{";
    for (std::size_t i = 0; i < levels.size(); ++i) s += (i ? "," : "") + std::to_string(levels[i]);
    return s + "}";
}

}  // namespace facelet::eval
