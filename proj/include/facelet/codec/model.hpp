#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "facelet/core/autograd.hpp"
#include "facelet/core/ops.hpp"
#include "facelet/core/random.hpp"
#include "facelet/io/sha256.hpp"

namespace facelet {

/// Raised on any attempt to mutate a frozen encoder.
class FrozenError : public Error {
public:
    using Error::Error;
};

struct CodecConfig {
    std::size_t input_channels = 3;
    std::size_t base_channels = 16;
    std::size_t levels = 5;
    std::vector<int> tap_levels{3, 4, 5};
    std::size_t image_size = 64;

    std::size_t channels(int level) const { return base_channels << (level - 1); }
    std::size_t resolution(int level) const { return image_size >> (level - 1); }
    int deepest_tap() const { return tap_levels.back(); }
    bool has_tap(int level) const {
        return std::find(tap_levels.begin(), tap_levels.end(), level) != tap_levels.end();
    }
    Shape level_shape(int level) const { return {channels(level), resolution(level), resolution(level)}; }

    void validate() const {
        if (input_channels == 0 || base_channels == 0) throw Error("codec config: channel counts must be positive");
        if (levels != 5) throw Error("codec config: the encoder has exactly 5 blocks");
        if (image_size < 32 || (image_size & (image_size - 1)) != 0)
            throw Error("codec config: image_size must be a power of two >= 32, got " + std::to_string(image_size));
        if (tap_levels.empty()) throw Error("codec config: tap_levels must be non-empty");
        for (std::size_t i = 0; i < tap_levels.size(); ++i) {
            if (tap_levels[i] < 3 || tap_levels[i] > 5) throw Error("codec config: tap levels must lie in {3,4,5}");
            if (i && tap_levels[i] <= tap_levels[i - 1])
                throw Error("codec config: tap levels must be strictly ascending");
        }
    }

    std::string describe() const {
        std::string s = "in=" + std::to_string(input_channels) + ";base=" + std::to_string(base_channels) +
                        ";levels=" + std::to_string(levels) + ";size=" + std::to_string(image_size) + ";taps=";
        for (int t : tap_levels) s += std::to_string(t);
        return s;
    }

    friend bool operator==(const CodecConfig&, const CodecConfig&) = default;
};

/// Multi-level deep representation: one [C,H,W] map per tap level (or [N,C,H,W] when batched).
struct FeaturePyramid {
    std::map<int, Tensor> levels;

    Tensor& at(int level) { return levels.at(level); }
    const Tensor& at(int level) const { return levels.at(level); }
    bool has(int level) const { return levels.count(level) != 0; }

    std::size_t numel() const {
        std::size_t n = 0;
        for (const auto& [l, t] : levels) n += t.numel();
        return n;
    }

    friend bool operator==(const FeaturePyramid&, const FeaturePyramid&) = default;
};

/// Throws unless the pyramid carries exactly the configured tap levels with per-sample shapes.
inline void check_pyramid(const CodecConfig& cfg, const FeaturePyramid& p, const char* who) {
    if (p.levels.size() != cfg.tap_levels.size())
        throw ShapeError(std::string(who) + ": pyramid has " + std::to_string(p.levels.size()) + " levels, expected " +
                         std::to_string(cfg.tap_levels.size()));
    for (int l : cfg.tap_levels) {
        if (!p.has(l)) throw ShapeError(std::string(who) + ": pyramid lacks level " + std::to_string(l));
        auto s = p.at(l).shape();
        if (s.size() == 4) s.erase(s.begin());
        if (s != cfg.level_shape(l))
            throw ShapeError(std::string(who) + ": level " + std::to_string(l) + " has shape " + shape_str(s) +
                             ", expected " + shape_str(cfg.level_shape(l)));
    }
}

struct ConvLayer {
    Parameter weight;
    Parameter bias;
    std::size_t pad = 1;

    ConvLayer() = default;
    ConvLayer(std::size_t in, std::size_t out, std::size_t k, Rng& rng) : pad(k / 2) {
        const double bound = std::sqrt(6.0 / static_cast<double>(in * k * k));
        weight = Parameter(uniform_tensor<float>({out, in, k, k}, rng, -bound, bound));
        bias = Parameter(Tensor::zeros({out}));
    }

    std::size_t in_channels() const { return weight.value.dim(1); }
    std::size_t out_channels() const { return weight.value.dim(0); }

    Var forward(const Var& x) const { return conv2d(x, param_var(weight), param_var(bias), pad, 1); }

    static Var param_var(const Parameter& p) {
        if (p.trainable && grad_enabled()) return Var::param(const_cast<Parameter&>(p));
        return Var::constant(p.value);
    }
};

/// Frozen encoder E plus decoder D with skip concatenation at tap levels.
class CodecModel {
public:
    CodecModel() = default;

    CodecModel(CodecConfig cfg, std::uint64_t seed) : config_(std::move(cfg)) {
        config_.validate();
        Rng rng(derive_seed(seed, 0xE1));
        std::size_t in = config_.input_channels;
        for (int l = 1; l <= 5; ++l) {
            const std::size_t c = config_.channels(l);
            encoder_.emplace_back(in, c, 3, rng);
            encoder_.emplace_back(c, c, 3, rng);
            in = c;
        }
        reinit_decoder(derive_seed(seed, 0xD1));
    }

    const CodecConfig& config() const { return config_; }

    /// Same weights, configured for a different input size (every layer is fully convolutional).
    CodecModel on_canvas(std::size_t image_size) const {
        CodecModel m = *this;
        m.config_.image_size = image_size;
        m.config_.validate();
        return m;
    }

    /// Fresh decoder weights; the encoder is untouched.
    void reinit_decoder(std::uint64_t seed) {
        Rng rng(seed);
        decoder_.clear();
        const int deepest = config_.deepest_tap();
        for (int l = deepest; l >= 1; --l) {
            const std::size_t c = config_.channels(l);
            std::size_t in = c;
            if (l != deepest && config_.has_tap(l)) in += c;
            const std::size_t out = l > 1 ? config_.channels(l - 1) : c;
            decoder_.emplace_back(in, c, 3, rng);
            decoder_.emplace_back(c, out, 3, rng);
        }
        decoder_.emplace_back(config_.channels(1), config_.input_channels, 1, rng);
        decoder_.back().bias.value.fill(0.5f);
    }

    void freeze_encoder() {
        for (auto& layer : encoder_) {
            layer.weight.trainable = false;
            layer.bias.trainable = false;
        }
        frozen_ = true;
        frozen_checksum_ = encoder_checksum();
    }

    bool encoder_frozen() const { return frozen_; }
    const std::string& frozen_checksum() const { return frozen_checksum_; }

    std::string encoder_checksum() const {
        io::Sha256 h;
        for (const auto& layer : encoder_) h.update(layer.weight.value).update(layer.bias.value);
        return h.hex();
    }

    /// Binds banks and label files to this exact model.
    std::string fingerprint() const {
        io::Sha256 h;
        h.update(config_.describe());
        for (const auto& layer : encoder_) h.update(layer.weight.value).update(layer.bias.value);
        for (const auto& layer : decoder_) h.update(layer.weight.value).update(layer.bias.value);
        return h.hex();
    }

    /// Throws if the frozen encoder no longer matches its recorded checksum.
    void verify_encoder() const {
        if (frozen_ && encoder_checksum() != frozen_checksum_)
            throw FrozenError("encoder parameters changed after freezing");
    }

    const std::vector<ConvLayer>& encoder_layers() const { return encoder_; }
    const std::vector<ConvLayer>& decoder_layers() const { return decoder_; }

    std::vector<ConvLayer>& mutable_encoder_layers() {
        if (frozen_) throw FrozenError("encoder is frozen");
        return encoder_;
    }
    std::vector<ConvLayer>& mutable_decoder_layers() { return decoder_; }

    std::vector<Parameter*> encoder_parameters() {
        if (frozen_) throw FrozenError("encoder is frozen");
        return collect(encoder_);
    }
    std::vector<Parameter*> decoder_parameters() { return collect(decoder_); }

    /// Encoder forward; returns the pre-downsample activation of every tap block.
    std::map<int, Var> encode_var(const Var& images) const {
        const auto d = image_dims(images.shape(), "encode");
        if (d.c != config_.input_channels || d.h != config_.image_size || d.w != config_.image_size)
            throw ShapeError("encode: expected images of shape (" + std::to_string(config_.input_channels) + "," +
                             std::to_string(config_.image_size) + "," + std::to_string(config_.image_size) +
                             "), got " + shape_str(images.shape()));
        std::map<int, Var> taps;
        Var h = images;
        const int deepest = config_.deepest_tap();
        for (int l = 1; l <= deepest; ++l) {
            h = relu(encoder_[2 * (l - 1)].forward(h));
            h = relu(encoder_[2 * (l - 1) + 1].forward(h));
            if (config_.has_tap(l)) taps[l] = h;
            if (l < deepest) h = downsample2x(h);
        }
        return taps;
    }

    Var decode_var(const std::map<int, Var>& pyramid) const {
        const int deepest = config_.deepest_tap();
        Var h = pyramid.at(deepest);
        std::size_t li = 0;
        for (int l = deepest; l >= 1; --l) {
            if (l != deepest) {
                h = upsample2x(h);
                if (config_.has_tap(l)) h = concat_channels(h, pyramid.at(l));
            }
            h = relu(decoder_[li++].forward(h));
            h = relu(decoder_[li++].forward(h));
        }
        return clamp(decoder_[li].forward(h), 0.0f, 1.0f);
    }

private:
    static std::vector<Parameter*> collect(std::vector<ConvLayer>& layers) {
        std::vector<Parameter*> ps;
        for (auto& l : layers) {
            ps.push_back(&l.weight);
            ps.push_back(&l.bias);
        }
        return ps;
    }

    CodecConfig config_;
    std::vector<ConvLayer> encoder_;
    std::vector<ConvLayer> decoder_;
    bool frozen_ = false;
    std::string frozen_checksum_;

    friend struct CodecSerializer;
};

// ---- batching helpers ------------------------------------------------------

/// Stacks equally shaped tensors along a new leading axis.
inline Tensor stack(const std::vector<const Tensor*>& items) {
    if (items.empty()) throw ShapeError("stack of zero tensors");
    Shape s = items.front()->shape();
    std::vector<float> data;
    data.reserve(items.size() * items.front()->numel());
    for (const Tensor* t : items) {
        if (t->shape() != s) throw ShapeError("stack: mismatched shapes");
        data.insert(data.end(), t->storage().begin(), t->storage().end());
    }
    s.insert(s.begin(), items.size());
    return Tensor(std::move(s), std::move(data));
}

inline Tensor stack(const std::vector<Tensor>& items) {
    std::vector<const Tensor*> ptrs;
    for (const auto& t : items) ptrs.push_back(&t);
    return stack(ptrs);
}

/// Sample i of a batched tensor.
inline Tensor unstack(const Tensor& batch, std::size_t i) {
    Shape s(batch.shape().begin() + 1, batch.shape().end());
    const std::size_t per = shape_numel(s);
    return Tensor(std::move(s), std::vector<float>(batch.data() + i * per, batch.data() + (i + 1) * per));
}

inline FeaturePyramid stack_pyramids(const std::vector<const FeaturePyramid*>& items) {
    FeaturePyramid out;
    for (const auto& [l, t] : items.front()->levels) {
        std::vector<const Tensor*> ts;
        for (const auto* p : items) ts.push_back(&p->at(l));
        out.levels[l] = stack(ts);
    }
    return out;
}

inline FeaturePyramid unstack_pyramid(const FeaturePyramid& batch, std::size_t i) {
    FeaturePyramid out;
    for (const auto& [l, t] : batch.levels) out.levels[l] = unstack(t, i);
    return out;
}

inline std::map<int, Var> pyramid_vars(const FeaturePyramid& p) {
    std::map<int, Var> out;
    for (const auto& [l, t] : p.levels) out[l] = Var::constant(t);
    return out;
}

inline FeaturePyramid pyramid_values(const std::map<int, Var>& vars) {
    FeaturePyramid out;
    for (const auto& [l, v] : vars) out.levels[l] = v.value();
    return out;
}

// ---- tensor-level API ------------------------------------------------------

/// E(x) for one [3,S,S] image or a batch.
inline FeaturePyramid encode(const CodecModel& model, const Tensor& images) {
    NoGradGuard ng;
    return pyramid_values(model.encode_var(Var::constant(images)));
}

/// D(pyramid); accepts per-sample or batched pyramids.
inline Tensor decode(const CodecModel& model, const FeaturePyramid& pyramid) {
    check_pyramid(model.config(), pyramid, "decode");
    NoGradGuard ng;
    return model.decode_var(pyramid_vars(pyramid)).value();
}

inline Tensor reconstruct(const CodecModel& model, const Tensor& images) {
    return decode(model, encode(model, images));
}

}  // namespace facelet
