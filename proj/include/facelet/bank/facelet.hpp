#pragma once

#include <array>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include <json.hpp>

#include "facelet/bank/shift.hpp"
#include "facelet/codec/serialize.hpp"
#include "facelet/codec/train.hpp"
#include "facelet/io/fclt.hpp"

namespace facelet {

struct BankMetadata {
    std::string trained_on;
    std::size_t k_neighbors = 0;
    std::string created_at;
    nlohmann::json extra = nlohmann::json::object();
};

/// Per-effect network V: conv-relu-conv-relu-conv at every tap level, channel preserving.
struct FaceletBank {
    std::string effect_name;
    std::string codec_fingerprint;
    std::map<int, std::array<ConvLayer, 3>> levels;
    BankMetadata metadata;

    FaceletBank() = default;

    /// Uniform(-init_range, init_range) kernels, zero biases.
    FaceletBank(std::string name, const CodecModel& codec, std::uint64_t seed, float init_range = 0.05f)
        : effect_name(std::move(name)), codec_fingerprint(codec.fingerprint()) {
        if (effect_name.empty()) throw Error("facelet bank: effect name must be non-empty");
        Rng rng(derive_seed(seed, 0xFB));
        for (int l : codec.config().tap_levels) {
            const std::size_t c = codec.config().channels(l);
            auto& convs = levels[l];
            for (auto& conv : convs) {
                conv.pad = 1;
                conv.weight = Parameter(uniform_tensor<float>({c, c, 3, 3}, rng, -init_range, init_range));
                conv.bias = Parameter(Tensor::zeros({c}));
            }
        }
    }

    std::vector<Parameter*> parameters() {
        std::vector<Parameter*> ps;
        for (auto& [l, convs] : levels)
            for (auto& conv : convs) {
                ps.push_back(&conv.weight);
                ps.push_back(&conv.bias);
            }
        return ps;
    }

    std::map<int, Var> forward_var(const std::map<int, Var>& psi) const {
        if (psi.size() != levels.size()) throw ShapeError("facelet_forward: pyramid and bank level sets differ");
        std::map<int, Var> out;
        for (const auto& [l, convs] : levels) {
            auto it = psi.find(l);
            if (it == psi.end()) throw ShapeError("facelet_forward: pyramid lacks level " + std::to_string(l));
            const auto d = image_dims(it->second.shape(), "facelet_forward");
            if (d.c != convs[0].in_channels())
                throw ShapeError("facelet_forward: level " + std::to_string(l) + " has " + std::to_string(d.c) +
                                 " channels, bank expects " + std::to_string(convs[0].in_channels()));
            Var h = relu(convs[0].forward(it->second));
            h = relu(convs[1].forward(h));
            out[l] = convs[2].forward(h);
        }
        return out;
    }

    std::string checksum() const {
        io::Sha256 h;
        h.update(effect_name);
        for (const auto& [l, convs] : levels)
            for (const auto& conv : convs) h.update(conv.weight.value).update(conv.bias.value);
        return h.hex();
    }
};

/// V(psi): the predicted shift for a per-sample or batched pyramid.
inline FeaturePyramid facelet_forward(const FaceletBank& bank, const FeaturePyramid& psi) {
    NoGradGuard ng;
    return pyramid_values(bank.forward_var(pyramid_vars(psi)));
}

inline void check_bank(const CodecModel& codec, const FaceletBank& bank) {
    if (bank.codec_fingerprint != codec.fingerprint())
        throw FingerprintError("fingerprint mismatch: bank '" + bank.effect_name + "' was trained against codec " +
                               bank.codec_fingerprint.substr(0, 12) + ", loaded codec is " +
                               codec.fingerprint().substr(0, 12));
}

// ---- training --------------------------------------------------------------

struct FaceletTrainConfig {
    TrainSchedule schedule{.epochs = 10, .batch_size = 16, .lr = 1e-3, .decay_every = 0};
    std::map<int, float> level_weights;  // missing levels weigh 1
    float init_range = 0.05f;
};

/// Regresses V(psi_i) onto the pseudo-labels dv*_i, summed over all levels.
inline FaceletBank train_facelet(const CodecModel& codec, const std::string& effect_name,
                                 const std::vector<FeaturePyramid>& features, const std::vector<FeaturePyramid>& labels,
                                 const FaceletTrainConfig& cfg, TrainLog* log = nullptr) {
    if (!codec.encoder_frozen()) throw Error("train_facelet: encoder must be frozen");
    if (features.size() != labels.size())
        throw Error("train_facelet: " + std::to_string(features.size()) + " samples but " +
                    std::to_string(labels.size()) + " labels");
    if (features.empty()) throw Error("train_facelet: no training samples");
    for (std::size_t i = 0; i < features.size(); ++i) {
        check_pyramid(codec.config(), features[i], "train_facelet");
        check_pyramid(codec.config(), labels[i], "train_facelet");
    }
    FaceletBank bank(effect_name, codec, cfg.schedule.seed, cfg.init_range);
    auto gather = [](const std::vector<FeaturePyramid>& src, const std::vector<std::size_t>& idx) {
        std::vector<const FeaturePyramid*> ps;
        for (auto i : idx) ps.push_back(&src[i]);
        return stack_pyramids(ps);
    };
    auto l = detail::run_epochs(bank.parameters(), features.size(), cfg.schedule, "facelet",
                                [&](const std::vector<std::size_t>& idx, std::size_t) {
                                    const FeaturePyramid target = gather(labels, idx);
                                    auto pred = bank.forward_var(pyramid_vars(gather(features, idx)));
                                    Var loss;
                                    for (const auto& [lv, v] : pred) {
                                        Var term = mse(v, Var::constant(target.at(lv)));
                                        auto w = cfg.level_weights.find(lv);
                                        if (w != cfg.level_weights.end()) term = scale(term, w->second);
                                        loss = loss ? add(loss, term) : term;
                                    }
                                    return loss;
                                });
    codec.verify_encoder();
    if (log) *log = std::move(l);
    return bank;
}

// ---- editing ---------------------------------------------------------------

/// Encoded image with lazily computed per-effect shifts; re-rendering with a new lambda
/// runs only apply_shift + decode.
class EditCache {
public:
    EditCache(const CodecModel& codec, const Tensor& image) : psi_(encode(codec, image)) {}

    const FeaturePyramid& psi() const { return psi_; }

    const FeaturePyramid& delta(const FaceletBank& bank) {
        auto it = deltas_.find(bank.effect_name);
        if (it == deltas_.end()) it = deltas_.emplace(bank.effect_name, facelet_forward(bank, psi_)).first;
        return it->second;
    }

    bool has_delta(const std::string& effect) const { return deltas_.count(effect) != 0; }

    Tensor render(const CodecModel& codec, const FaceletBank& bank, float lambda) {
        return decode(codec, apply_shift(psi_, delta(bank), lambda));
    }

private:
    FeaturePyramid psi_;
    std::map<std::string, FeaturePyramid> deltas_;
};

/// decode(E(x) + lambda * V(E(x))).
inline Tensor edit_image(const CodecModel& codec, const FaceletBank& bank, const Tensor& image, float lambda) {
    check_bank(codec, bank);
    EditCache cache(codec, image);
    return cache.render(codec, bank, lambda);
}

/// Zeroes the shift on levels outside `keep`.
inline FeaturePyramid mask_levels(const FeaturePyramid& delta, const std::vector<int>& keep) {
    FeaturePyramid out = delta;
    for (auto& [l, t] : out.levels)
        if (std::find(keep.begin(), keep.end(), l) == keep.end()) t.fill(0.0f);
    return out;
}

// ---- persistence -----------------------------------------------------------

inline io::FcltFile bank_to_fclt(const FaceletBank& bank) {
    io::FcltFile f;
    std::vector<int> lv;
    for (const auto& [l, c] : bank.levels) lv.push_back(l);
    f.info = {{"kind", "facelet_bank"},
              {"effect_name", bank.effect_name},
              {"codec_fingerprint", bank.codec_fingerprint},
              {"levels", lv},
              {"trained_on", bank.metadata.trained_on},
              {"k_neighbors", bank.metadata.k_neighbors},
              {"created_at", bank.metadata.created_at},
              {"extra", bank.metadata.extra}};
    for (const auto& [l, convs] : bank.levels)
        for (std::size_t i = 0; i < convs.size(); ++i) {
            const std::string base = "level" + std::to_string(l) + ".conv" + std::to_string(i);
            f.tensors[base + ".weight"] = convs[i].weight.value;
            f.tensors[base + ".bias"] = convs[i].bias.value;
        }
    return f;
}

inline FaceletBank bank_from_fclt(const io::FcltFile& f) {
    if (f.info.value("kind", "") != "facelet_bank") throw io::FormatError("not a facelet bank container");
    FaceletBank bank;
    try {
        bank.effect_name = f.info.at("effect_name").get<std::string>();
        bank.codec_fingerprint = f.info.at("codec_fingerprint").get<std::string>();
        bank.metadata.trained_on = f.info.at("trained_on").get<std::string>();
        bank.metadata.k_neighbors = f.info.at("k_neighbors").get<std::size_t>();
        bank.metadata.created_at = f.info.at("created_at").get<std::string>();
        bank.metadata.extra = f.info.value("extra", nlohmann::json::object());
        for (int l : f.info.at("levels").get<std::vector<int>>()) {
            auto& convs = bank.levels[l];
            for (std::size_t i = 0; i < convs.size(); ++i) {
                const std::string base = "level" + std::to_string(l) + ".conv" + std::to_string(i);
                const Tensor& w = f.tensors.at(base + ".weight");
                const Tensor& b = f.tensors.at(base + ".bias");
                if (w.rank() != 4 || w.dim(0) != w.dim(1) || w.dim(2) != 3 || w.dim(3) != 3 || b.shape() != Shape{w.dim(0)})
                    throw io::FormatError("bank tensor " + base + " is not a channel-preserving 3x3 conv");
                convs[i].weight = Parameter(w);
                convs[i].bias = Parameter(b);
                convs[i].pad = 1;
            }
        }
    } catch (const io::FormatError&) {
        throw;
    } catch (const std::exception& e) {
        throw io::FormatError(std::string("malformed bank container: ") + e.what());
    }
    if (bank.effect_name.empty()) throw io::FormatError("bank has an empty effect name");
    if (f.tensors.size() != bank.levels.size() * 6) throw io::FormatError("bank container has unexpected tensors");
    return bank;
}

inline void save_bank(const std::string& path, const FaceletBank& bank) { io::save_fclt(path, bank_to_fclt(bank)); }
inline FaceletBank load_bank(const std::string& path) { return bank_from_fclt(io::load_fclt(path)); }

// ---- registry --------------------------------------------------------------

/// Effect name -> immutable bank, bound to one codec. Lookups see a consistent snapshot;
/// swaps publish a new map atomically.
class BankRegistry {
public:
    using BankPtr = std::shared_ptr<const FaceletBank>;
    using Snapshot = std::shared_ptr<const std::map<std::string, BankPtr>>;

    BankRegistry(std::string codec_fingerprint, std::map<int, Shape> level_shapes)
        : fingerprint_(std::move(codec_fingerprint)),
          level_shapes_(std::move(level_shapes)),
          snapshot_(std::make_shared<const std::map<std::string, BankPtr>>()) {}

    explicit BankRegistry(const CodecModel& codec) : BankRegistry(codec.fingerprint(), shapes_of(codec.config())) {}

    const std::string& codec_fingerprint() const { return fingerprint_; }

    /// Replace-or-insert by effect name.
    void swap(BankPtr bank) {
        if (!bank) throw Error("registry_swap: null bank");
        if (bank->effect_name.empty()) throw Error("registry_swap: empty effect name");
        if (bank->codec_fingerprint != fingerprint_)
            throw FingerprintError("registry_swap: bank '" + bank->effect_name + "' fingerprint mismatch");
        std::map<int, Shape> shapes;
        for (const auto& [l, convs] : bank->levels) {
            const std::size_t c = convs[0].weight.value.dim(0);
            shapes[l] = {c};
        }
        for (const auto& [l, s] : level_shapes_) {
            auto it = shapes.find(l);
            if (it == shapes.end() || it->second[0] != s[0])
                throw FingerprintError("registry_swap: bank '" + bank->effect_name + "' level shapes do not match codec");
        }
        if (shapes.size() != level_shapes_.size())
            throw FingerprintError("registry_swap: bank '" + bank->effect_name + "' has extra levels");
        std::lock_guard<std::mutex> lk(mu_);
        auto next = std::make_shared<std::map<std::string, BankPtr>>(*snapshot_);
        (*next)[bank->effect_name] = std::move(bank);
        snapshot_ = std::move(next);
    }

    void swap(FaceletBank bank) { swap(std::make_shared<const FaceletBank>(std::move(bank))); }

    BankPtr lookup(const std::string& name) const {
        auto s = snapshot();
        auto it = s->find(name);
        return it == s->end() ? nullptr : it->second;
    }

    Snapshot snapshot() const {
        std::lock_guard<std::mutex> lk(mu_);
        return snapshot_;
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        for (const auto& [n, b] : *snapshot()) out.push_back(n);
        return out;
    }

    static std::map<int, Shape> shapes_of(const CodecConfig& cfg) {
        std::map<int, Shape> out;
        for (int l : cfg.tap_levels) out[l] = cfg.level_shape(l);
        return out;
    }

private:
    std::string fingerprint_;
    std::map<int, Shape> level_shapes_;
    mutable std::mutex mu_;
    Snapshot snapshot_;
};

}  // namespace facelet
