#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "facelet/codec/model.hpp"
#include "facelet/core/adam.hpp"

namespace facelet {

struct TrainSchedule {
    std::size_t epochs = 1;
    std::size_t batch_size = 8;
    double lr = 1e-4;
    std::size_t decay_every = 10;  // epochs between step decays
    double decay = 0.5;
    std::size_t max_steps = 0;  // 0 = no cap
    std::uint64_t seed = 1;
    std::function<void(const std::string&)> log;
    std::function<void(std::size_t steps_done)> after_step;

    double lr_at(std::size_t epoch) const {
        return lr * std::pow(decay, static_cast<double>(decay_every ? epoch / decay_every : 0));
    }
};

struct TrainLog {
    std::vector<double> step_losses;  // per-sample (batch-normalised) loss of each step
    std::vector<double> epoch_means;
};

namespace detail {

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, 0xA000 + epoch));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    return order;
}

/// Generic mini-batch loop. `batch_loss(indices)` returns the summed loss over the batch.
inline TrainLog run_epochs(const std::vector<Parameter*>& params, std::size_t n_samples, const TrainSchedule& sched,
                           const std::string& phase,
                           const std::function<Var(const std::vector<std::size_t>&, std::size_t step)>& batch_loss) {
    if (sched.batch_size == 0) throw Error(phase + ": batch size must be positive");
    if (n_samples < sched.batch_size)
        throw Error(phase + ": dataset of " + std::to_string(n_samples) + " samples is smaller than batch size " +
                    std::to_string(sched.batch_size));
    Adam opt(params, sched.lr);
    TrainLog log;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < sched.epochs; ++epoch) {
        opt.set_lr(sched.lr_at(epoch));
        const auto order = epoch_order(n_samples, sched.seed, epoch);
        double epoch_sum = 0;
        std::size_t epoch_batches = 0;
        for (std::size_t start = 0; start < n_samples; start += sched.batch_size) {
            if (sched.max_steps && step >= sched.max_steps) break;
            const std::size_t end = std::min(n_samples, start + sched.batch_size);
            std::vector<std::size_t> idx(order.begin() + start, order.begin() + end);
            opt.zero_grad();
            Var loss = batch_loss(idx, step);
            backward(loss);
            const double inv = 1.0 / static_cast<double>(idx.size());
            opt.scale_grads(static_cast<float>(inv));
            opt.step();
            const double l = loss.value().item() * inv;
            log.step_losses.push_back(l);
            epoch_sum += l;
            ++epoch_batches;
            ++step;
            if (sched.after_step) sched.after_step(step);
        }
        if (epoch_batches) log.epoch_means.push_back(epoch_sum / static_cast<double>(epoch_batches));
        if (sched.log && epoch_batches)
            sched.log(phase + " epoch " + std::to_string(epoch + 1) + "/" + std::to_string(sched.epochs) +
                      " mean loss " + std::to_string(log.epoch_means.back()));
        if (sched.max_steps && step >= sched.max_steps) break;
    }
    return log;
}

inline Tensor gather(const std::vector<Tensor>& images, const std::vector<std::size_t>& idx) {
    std::vector<const Tensor*> ptrs;
    for (auto i : idx) ptrs.push_back(&images[i]);
    return stack(ptrs);
}

}  // namespace detail

/// Pixel term plus omega-weighted feature-consistency term, summed over the batch.
inline Var decoder_loss_var(const CodecModel& model, const Tensor& images, double omega) {
    FeaturePyramid feats = encode(model, images);
    Var x = Var::constant(images);
    Var z = model.decode_var(pyramid_vars(feats));
    Var loss = mse(z, x);
    if (omega != 0.0) {
        auto fz = model.encode_var(z);
        for (const auto& [l, t] : feats.levels)
            loss = add(loss, scale(mse(Var::constant(t), fz.at(l)), static_cast<float>(omega)));
    }
    return loss;
}

inline double decoder_loss(const CodecModel& model, const Tensor& images, double omega = 1.0) {
    NoGradGuard ng;
    return decoder_loss_var(model, images, omega).value().item();
}

/// Feature consistency on shifted features E(x) + lambda * dv.
inline Var pretrain_loss_var(const CodecModel& model, const FeaturePyramid& shifted) {
    Var z = model.decode_var(pyramid_vars(shifted));
    auto fz = model.encode_var(z);
    Var loss;
    for (const auto& [l, t] : shifted.levels) {
        Var term = mse(Var::constant(t), fz.at(l));
        loss = loss ? add(loss, term) : term;
    }
    return loss;
}

/// Mean per-sample pre-training loss over every (image, lambda) pair; no parameter updates.
inline double pretrain_probe_loss(const CodecModel& model, const std::vector<Tensor>& images,
                                  const std::vector<FeaturePyramid>& shifts, const std::vector<float>& lambdas) {
    NoGradGuard ng;
    std::vector<const Tensor*> ptrs;
    for (const auto& im : images) ptrs.push_back(&im);
    const FeaturePyramid base = encode(model, stack(ptrs));
    double total = 0;
    for (float lambda : lambdas) {
        FeaturePyramid feats = base;
        for (auto& [l, t] : feats.levels) {
            const std::size_t per = t.numel() / images.size();
            for (std::size_t b = 0; b < images.size(); ++b) {
                const auto& dv = shifts[b].at(l);
                float* dst = t.data() + b * per;
                for (std::size_t i = 0; i < per; ++i) dst[i] += lambda * dv[i];
            }
        }
        total += pretrain_loss_var(model, feats).value().item();
    }
    return total / static_cast<double>(images.size() * lambdas.size());
}

/// Plain pixel-L2 autoencoder training of encoder and decoder together.
inline TrainLog train_autoencoder(CodecModel& model, const std::vector<Tensor>& images, const TrainSchedule& sched) {
    auto params = model.encoder_parameters();
    for (auto* p : model.decoder_parameters()) params.push_back(p);
    return detail::run_epochs(params, images.size(), sched, "autoencoder",
                              [&](const std::vector<std::size_t>& idx, std::size_t) {
                                  Tensor batch = detail::gather(images, idx);
                                  Var x = Var::constant(batch);
                                  return mse(model.decode_var(model.encode_var(x)), x);
                              });
}

/// Encoder phase: autoencoder training, then freeze the encoder and re-initialise the decoder.
inline CodecModel train_encoder(const CodecConfig& config, const std::vector<Tensor>& images,
                                const TrainSchedule& sched, TrainLog* log = nullptr) {
    if (images.size() < sched.batch_size)
        throw Error("train_encoder: dataset of " + std::to_string(images.size()) +
                    " samples is smaller than batch size " + std::to_string(sched.batch_size));
    CodecModel model(config, sched.seed);
    TrainLog l;
    if (sched.epochs > 0) l = train_autoencoder(model, images, sched);
    model.freeze_encoder();
    model.reinit_decoder(derive_seed(sched.seed, 0xD2));
    if (log) *log = std::move(l);
    return model;
}

/// Decoder training against pixel + feature consistency; the encoder must be frozen.
inline TrainLog train_decoder(CodecModel& model, const std::vector<Tensor>& images, const TrainSchedule& sched,
                              double omega = 1.0) {
    if (!model.encoder_frozen()) throw Error("train_decoder: encoder must be frozen first");
    auto log = detail::run_epochs(model.decoder_parameters(), images.size(), sched, "decoder",
                                  [&](const std::vector<std::size_t>& idx, std::size_t) {
                                      return decoder_loss_var(model, detail::gather(images, idx), omega);
                                  });
    model.verify_encoder();
    return log;
}

/// Decoder pre-training on pseudo-label-shifted features. `shifts[i]` pairs with `images[i]`.
/// An empty shift list skips the phase (with a log message).
inline TrainLog pretrain_decoder(CodecModel& model, const std::vector<Tensor>& images,
                                 const std::vector<FeaturePyramid>& shifts, const std::vector<float>& lambda_samples,
                                 const TrainSchedule& sched) {
    if (shifts.empty()) {
        if (sched.log) sched.log("warning: no pseudo-label shifts supplied; skipping decoder pre-training");
        return {};
    }
    if (!model.encoder_frozen()) throw Error("pretrain_decoder: encoder must be frozen first");
    if (shifts.size() != images.size())
        throw Error("pretrain_decoder: " + std::to_string(shifts.size()) + " shifts for " +
                    std::to_string(images.size()) + " images");
    if (lambda_samples.empty()) throw Error("pretrain_decoder: lambda_samples must be non-empty");
    for (const auto& s : shifts) check_pyramid(model.config(), s, "pretrain_decoder");
    Rng lambda_rng(derive_seed(sched.seed, 0x1A));
    auto log = detail::run_epochs(
        model.decoder_parameters(), images.size(), sched, "pretrain",
        [&](const std::vector<std::size_t>& idx, std::size_t) {
            const float lambda = lambda_samples[lambda_rng.below(lambda_samples.size())];
            FeaturePyramid feats = encode(model, detail::gather(images, idx));
            for (auto& [l, t] : feats.levels) {
                const std::size_t per = t.numel() / idx.size();
                for (std::size_t b = 0; b < idx.size(); ++b) {
                    const auto& dv = shifts[idx[b]].at(l);
                    float* dst = t.data() + b * per;
                    for (std::size_t i = 0; i < per; ++i) dst[i] += lambda * dv[i];
                }
            }
            return pretrain_loss_var(model, feats);
        });
    model.verify_encoder();
    return log;
}

}  // namespace facelet
