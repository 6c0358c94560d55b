#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "facelet/eval/metrics.hpp"
#include "facelet/pipeline.hpp"

namespace facelet::eval {

inline double psnr(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw ShapeError("psnr: shapes differ");
    double se = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const double d = static_cast<double>(a[i]) - b[i];
        se += d * d;
    }
    const double mse = se / static_cast<double>(a.numel());
    return mse == 0 ? std::numeric_limits<double>::infinity() : 10.0 * std::log10(1.0 / mse);
}

/// Places a [C,S,S] image at the centre of a [C,size,size] canvas, replicating edge pixels outward.
inline Tensor extend_canvas(const Tensor& image, std::size_t size) {
    const std::size_t c = image.dim(0), s = image.dim(1);
    if (image.dim(2) != s || size < s || (size - s) % 2) throw ShapeError("extend_canvas: bad sizes");
    const long off = static_cast<long>((size - s) / 2), last = static_cast<long>(s) - 1;
    Tensor out({c, size, size});
    for (std::size_t k = 0; k < c; ++k)
        for (std::size_t y = 0; y < size; ++y)
            for (std::size_t x = 0; x < size; ++x) {
                const long sy = std::clamp(static_cast<long>(y) - off, 0L, last);
                const long sx = std::clamp(static_cast<long>(x) - off, 0L, last);
                out.at(k, y, x) = image.at(k, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
            }
    return out;
}

struct CovarianceResult {
    double max_error = 0;        // over the compared cells of every compared level
    double max_magnitude = 0;    // largest |dv| among the compared cells, for scale
    std::size_t cells = 0;       // cells compared
    std::vector<int> levels;     // levels where the jitter is a whole number of cells
};

/// Square boolean map: true where a value may differ between two inputs.
struct DirtyMask {
    long n = 0;
    std::vector<char> v;

    DirtyMask(long size, bool fill) : n(size), v(static_cast<std::size_t>(size * size), fill) {}
    bool at(long y, long x) const { return y < 0 || x < 0 || y >= n || x >= n || v[static_cast<std::size_t>(y * n + x)]; }
    void set(long y, long x, bool d) { v[static_cast<std::size_t>(y * n + x)] = d; }
};

/// Dirty outputs of a k x k, stride-1 convolution; taps in the zero padding count as dirty.
inline DirtyMask conv_mask(const DirtyMask& in, long k, long pad) {
    DirtyMask out(in.n + 2 * pad - k + 1, false);
    for (long y = 0; y < out.n; ++y)
        for (long x = 0; x < out.n; ++x) {
            bool d = false;
            for (long i = 0; i < k && !d; ++i)
                for (long j = 0; j < k && !d; ++j) d = in.at(y - pad + i, x - pad + j);
            out.set(y, x, d);
        }
    return out;
}

inline DirtyMask pool_mask(const DirtyMask& in) {
    DirtyMask out(in.n / 2, false);
    for (long y = 0; y < out.n; ++y)
        for (long x = 0; x < out.n; ++x)
            out.set(y, x, in.at(2 * y, 2 * x) || in.at(2 * y + 1, 2 * x) || in.at(2 * y, 2 * x + 1) || in.at(2 * y + 1, 2 * x + 1));
    return out;
}

/// Pushes a pixel mask through the encoder and then the bank, giving the cells of V(E(.)) at
/// every tap level whose receptive field touches a dirty pixel or the zero padding.
inline std::map<int, DirtyMask> propagate_mask(const CodecModel& codec, const FaceletBank& bank, DirtyMask m) {
    std::map<int, DirtyMask> out;
    const auto& enc = codec.encoder_layers();
    const int deepest = codec.config().deepest_tap();
    for (int l = 1; l <= deepest; ++l) {
        for (int i = 0; i < 2; ++i) {
            const auto& layer = enc[static_cast<std::size_t>(2 * (l - 1) + i)];
            m = conv_mask(m, static_cast<long>(layer.weight.value.dim(2)), static_cast<long>(layer.pad));
        }
        if (codec.config().has_tap(l)) {
            DirtyMask v = m;
            for (const auto& conv : bank.levels.at(l))
                v = conv_mask(v, static_cast<long>(conv.weight.value.dim(2)), static_cast<long>(conv.pad));
            out.emplace(l, std::move(v));
        }
        if (l < deepest) m = pool_mask(m);
    }
    return out;
}

/// Compares V(E(jittered x)) against V(E(x)) shifted by the same amount. Both images are
/// placed on a canvas twice the size, with edge pixels replicated outward. A cell is compared
/// only if it lies in the original frame and its receptive field sees identical (shifted)
/// pixels in both canvases and no zero padding; only levels whose stride divides the jitter
/// are compared.
inline CovarianceResult translation_covariance(const CodecModel& codec, const FaceletBank& bank,
                                               const synth::SyntheticPortrait& portrait, int dx, int dy) {
    check_bank(codec, bank);
    const std::size_t S = codec.config().image_size, big = 2 * S;
    const CodecModel wide = codec.on_canvas(big);
    const synth::SyntheticPortrait moved = synth::jittered_copy(portrait, dx, dy);
    const Tensor base = extend_canvas(portrait.image, big), shifted = extend_canvas(moved.image, big);

    const long nb = static_cast<long>(big);
    DirtyMask pixels(nb, false);
    for (long y = 0; y < nb; ++y)
        for (long x = 0; x < nb; ++x) {
            const long oy = y - dy, ox = x - dx;
            bool d = oy < 0 || ox < 0 || oy >= nb || ox >= nb;
            for (std::size_t c = 0; c < base.dim(0) && !d; ++c)
                d = shifted.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) !=
                    base.at(c, static_cast<std::size_t>(oy), static_cast<std::size_t>(ox));
            pixels.set(y, x, d);
        }
    const auto dirty = propagate_mask(wide, bank, std::move(pixels));

    const FeaturePyramid a = facelet_forward(bank, encode(wide, base));
    const FeaturePyramid b = facelet_forward(bank, encode(wide, shifted));
    CovarianceResult r;
    for (int l : codec.config().tap_levels) {
        const long cell = static_cast<long>(S / codec.config().resolution(l));
        if (dx % cell || dy % cell) continue;
        r.levels.push_back(l);
        const long sx = dx / cell, sy = dy / cell;
        const Tensor& ta = a.at(l);
        const Tensor& tb = b.at(l);
        const DirtyMask& mask = dirty.at(l);
        const long n = static_cast<long>(ta.dim(1)), lo = n / 4, hi = n - n / 4;  // the original frame
        for (long y = lo; y < hi; ++y)
            for (long x = lo; x < hi; ++x) {
                const long oy = y - sy, ox = x - sx;
                if (oy < lo || oy >= hi || ox < lo || ox >= hi || mask.at(y, x)) continue;
                ++r.cells;
                for (std::size_t c = 0; c < ta.dim(0); ++c) {
                    const float vb = tb.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x));
                    const float va = ta.at(c, static_cast<std::size_t>(oy), static_cast<std::size_t>(ox));
                    r.max_error = std::max(r.max_error, static_cast<double>(std::abs(vb - va)));
                    r.max_magnitude = std::max(r.max_magnitude, static_cast<double>(std::abs(va)));
                }
            }
    }
    return r;
}

struct ReportOptions {
    std::size_t k = 10;
    std::string region = "mouth";
    int dilation_cells = 2;
    std::size_t locality_images = 50;
    std::size_t sweep_images = 20;
    std::size_t covariance_images = 10;
    std::vector<std::vector<int>> ablation_subsets{{5}, {4, 5}, {3, 4, 5}};
    ProbeConfig probe;
    bool timing = true;
    std::size_t timing_reps = 20;
    std::function<void(const std::string&)> log;
};

/// Held-out evaluation of one bank; returns the eval JSON document.
inline nlohmann::json evaluate(const CodecModel& codec, const FaceletBank& bank, const synth::Dataset& ds,
                               const ReportOptions& opt) {
    check_bank(codec, bank);
    auto say = [&](const std::string& m) {
        if (opt.log) opt.log(m);
    };
    const std::string attr = bank.metadata.extra.value("pos_attr", std::string("mustache"));
    const bool positive = bank.metadata.extra.value("positive_polarity", true);
    const auto train = pipeline::split(ds, false), test = pipeline::split(ds, true);
    if (test.empty()) throw Error("eval: dataset has no held-out samples");

    // Held-out images from the source domain: the ones the effect should change.
    pipeline::Portraits sources;
    for (const auto* p : test)
        if (!pipeline::in_target(*p, attr, positive)) sources.push_back(p);
    if (sources.empty()) throw Error("eval: no held-out source-domain images");

    nlohmann::json out;
    out["schema"] = "facelet-eval/1";
    out["effect"] = bank.effect_name;
    out["attribute"] = attr;
    out["codec_fingerprint"] = codec.fingerprint();
    out["dataset"] = ds.id();
    out["k"] = opt.k;

    std::vector<double> ps;
    for (const auto* p : test) ps.push_back(psnr(reconstruct(codec, p->image), p->image));
    out["reconstruction"] = {{"median_psnr_db", median(ps)}, {"images", ps.size()}};
    say("reconstruction median PSNR " + std::to_string(median(ps)));

    const auto domains = pipeline::build_domains(codec, ds, attr, positive);
    const int dil = opt.dilation_cells * finest_cell_pixels(codec.config());
    const FeaturePyramid gm = pseudo::global_mean_direction(domains.x, domains.y);
    std::vector<double> fb, fk, fg;
    std::size_t wins = 0;
    for (const auto* p : sources) {
        if (fb.size() >= opt.locality_images) break;
        const synth::Box& box = p->regions.at(opt.region);
        const FeaturePyramid psi = encode(codec, p->image);
        const auto pl = pseudo::pseudo_label_from_features(p->sample_id, psi, domains.x, domains.y, opt.k);
        const std::size_t S = codec.config().image_size;
        fb.push_back(locality_fraction(heatmap(facelet_forward(bank, psi), S), box, dil));
        fk.push_back(locality_fraction(heatmap(pl.delta, S), box, dil));
        fg.push_back(locality_fraction(heatmap(gm, S), box, dil));
        wins += fb.back() > fk.back();
    }
    out["locality"] = {{"region", opt.region},
                       {"dilation_px", dil},
                       {"images", fb.size()},
                       {"bank_median", median(fb)},
                       {"knn_median", median(fk)},
                       {"global_mean_median", median(fg)},
                       {"bank_beats_knn", wins},
                       {"bank_beats_knn_fraction", static_cast<double>(wins) / static_cast<double>(fb.size())}};
    say("locality bank " + std::to_string(median(fb)) + " knn " + std::to_string(median(fk)) + " wins " +
        std::to_string(wins) + "/" + std::to_string(fb.size()));

    const AttributeProbe probe = attribute_probe_train(train, test, attr, opt.probe);
    out["probe"] = {{"attribute", attr}, {"heldout_accuracy", probe.heldout_accuracy}};

    std::vector<double> rho;
    std::vector<Tensor> sweep_images;
    nlohmann::json curves = nlohmann::json::array();
    for (const auto* p : sources) {
        if (rho.size() >= opt.sweep_images) break;
        const SweepResult s = strength_sweep(codec, bank, probe, p->image);
        rho.push_back(s.spearman_unit);
        sweep_images.push_back(p->image);
        curves.push_back({{"sample_id", p->sample_id}, {"scores", s.scores}, {"spearman_unit", s.spearman_unit}});
    }
    out["strength"] = {{"lambdas", default_lambdas()}, {"median_spearman_unit", median(rho)}, {"images", rho.size()},
                       {"curves", curves}};
    say("strength median Spearman " + std::to_string(median(rho)));

    const auto ab = layer_ablation(codec, bank, probe, sweep_images, opt.ablation_subsets);
    nlohmann::json abl = nlohmann::json::array();
    bool monotone = true;
    for (std::size_t i = 0; i < ab.size(); ++i) {
        abl.push_back({{"levels", ab[i].levels}, {"mean_delta", ab[i].mean_delta}});
        if (i && ab[i].mean_delta < ab[i - 1].mean_delta) monotone = false;
    }
    out["ablation"] = {{"subsets", abl}, {"monotone", monotone}};

    const std::vector<std::pair<int, int>> shifts{{4, 0}, {-4, 0}, {0, 4}, {0, -4}, {4, 4}, {-4, -4}, {4, -4}, {-4, 4}};
    double cov_err = 0, cov_mag = 0;
    std::size_t cov_cells = 0, cov_pairs = 0, cov_skipped = 0, cov_images = 0;
    std::vector<int> cov_levels;
    for (const auto* p : sources) {
        if (cov_images >= opt.covariance_images) break;
        ++cov_images;
        for (auto [dx, dy] : shifts) {
            CovarianceResult r;
            try {
                r = translation_covariance(codec, bank, *p, dx, dy);
            } catch (const Error&) {
                ++cov_skipped;  // a region would leave the frame
                continue;
            }
            ++cov_pairs;
            cov_err = std::max(cov_err, r.max_error);
            cov_mag = std::max(cov_mag, r.max_magnitude);
            cov_cells += r.cells;
            cov_levels = r.levels;
        }
    }
    out["translation"] = {{"max_interior_error", cov_err},
                          {"max_magnitude", cov_mag},
                          {"interior_cells", cov_cells},
                          {"pairs", cov_pairs},
                          {"skipped", cov_skipped},
                          {"levels", cov_levels}};
    say("translation max interior error " + std::to_string(cov_err) + " over " + std::to_string(cov_pairs) + " pairs");

    if (opt.timing) out["timing"] = bench_json(bench(codec, bank, domains.x, domains.y, opt.k, sources[0]->image, opt.timing_reps));
    return out;
}

}  // namespace facelet::eval
