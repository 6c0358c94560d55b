#pragma once

#include <map>
#include <string>
#include <vector>

#include "facelet/bank/facelet.hpp"
#include "facelet/codec/serialize.hpp"
#include "facelet/codec/train.hpp"
#include "facelet/pseudo/knn.hpp"
#include "facelet/pseudo/label_file.hpp"
#include "facelet/synth/dataset.hpp"

namespace facelet::pipeline {

using Portraits = std::vector<const synth::SyntheticPortrait*>;
using LogFn = std::function<void(const std::string&)>;

inline Portraits split(const synth::Dataset& ds, bool test) {
    Portraits out;
    for (const auto& e : ds.entries)
        if (synth::is_test_split(e.portrait.sample_id) == test) out.push_back(&e.portrait);
    return out;
}

inline std::vector<Tensor> images_of(const Portraits& ps) {
    std::vector<Tensor> out;
    out.reserve(ps.size());
    for (const auto* p : ps) out.push_back(p->image);
    return out;
}

/// Batched encode of many images, one pyramid per image.
inline std::vector<FeaturePyramid> encode_all(const CodecModel& codec, const Portraits& ps, std::size_t batch = 32) {
    std::vector<FeaturePyramid> out;
    out.reserve(ps.size());
    for (std::size_t start = 0; start < ps.size(); start += batch) {
        const std::size_t end = std::min(ps.size(), start + batch);
        std::vector<const Tensor*> imgs;
        for (std::size_t i = start; i < end; ++i) imgs.push_back(&ps[i]->image);
        const FeaturePyramid f = encode(codec, stack(imgs));
        for (std::size_t i = start; i < end; ++i) out.push_back(unstack_pyramid(f, i - start));
    }
    return out;
}

struct CodecTrainOptions {
    CodecConfig config;
    std::size_t encoder_epochs = 3;
    double encoder_lr = 1e-3;
    std::size_t epochs = 3;  // decoder phase
    double lr = 1e-4;
    std::size_t batch_size = 8;
    std::size_t decay_every = 0;
    double decay = 0.5;
    std::size_t pretrain_steps = 100;
    std::vector<float> pretrain_lambdas{0.0f, 0.5f, 1.0f};
    std::size_t checkpoint_every = 0;  // 0 = no pre-training checkpoints
    std::size_t checkpoint_images = 16;
    std::uint64_t seed = 1;
    LogFn log;
};

struct CodecTrainLogs {
    TrainLog encoder, pretrain, decoder;
    // Fixed-batch pre-training loss at step 0 and every `checkpoint_every` steps.
    std::vector<std::pair<std::size_t, double>> pretrain_checkpoints;
};

/// Encoder phase (skipped when `encoder_from` is given), optional pre-training against
/// pseudo-label shifts, then the reconstruction phase. Uses the training split only.
inline CodecModel train_codec(const synth::Dataset& ds, const CodecTrainOptions& opt,
                              const pseudo::LabelSet* labels = nullptr, const CodecModel* encoder_from = nullptr,
                              CodecTrainLogs* logs = nullptr) {
    const Portraits train = split(ds, false);
    const std::vector<Tensor> images = images_of(train);
    CodecTrainLogs l;
    TrainSchedule s;
    s.batch_size = opt.batch_size;
    s.decay_every = opt.decay_every;
    s.decay = opt.decay;
    s.seed = opt.seed;
    s.log = opt.log;

    CodecModel model;
    if (encoder_from) {
        if (!encoder_from->encoder_frozen()) throw Error("train-codec: --encoder-from codec has no frozen encoder");
        model = *encoder_from;
        model.reinit_decoder(derive_seed(opt.seed, 0xD2));
    } else {
        TrainSchedule es = s;
        es.epochs = opt.encoder_epochs;
        es.lr = opt.encoder_lr;
        model = train_encoder(opt.config, images, es, &l.encoder);
    }

    if (labels) {
        pseudo::check_labels(model, *labels);
        std::map<std::string, const Tensor*> by_id;
        for (const auto* p : train) by_id[p->sample_id] = &p->image;
        std::vector<Tensor> x_images;
        std::vector<FeaturePyramid> shifts;
        for (const auto& pl : labels->labels) {
            auto it = by_id.find(pl.sample_id);
            if (it == by_id.end()) throw Error("train-codec: label sample " + pl.sample_id + " is not in the training split");
            x_images.push_back(*it->second);
            shifts.push_back(pl.delta);
        }
        TrainSchedule ps = s;
        ps.lr = opt.lr;
        ps.max_steps = opt.pretrain_steps;
        ps.epochs = (opt.pretrain_steps * opt.batch_size + x_images.size() - 1) / x_images.size() + 1;
        if (opt.checkpoint_every) {
            const std::size_t n = std::min(opt.checkpoint_images, x_images.size());
            const std::vector<Tensor> probe_x(x_images.begin(), x_images.begin() + static_cast<long>(n));
            const std::vector<FeaturePyramid> probe_s(shifts.begin(), shifts.begin() + static_cast<long>(n));
            auto probe = [&model, &l, &opt, probe_x, probe_s](std::size_t step) {
                l.pretrain_checkpoints.emplace_back(step, pretrain_probe_loss(model, probe_x, probe_s, opt.pretrain_lambdas));
            };
            probe(0);
            ps.after_step = [&opt, probe](std::size_t step) {
                if (step % opt.checkpoint_every == 0) probe(step);
            };
        }
        l.pretrain = pretrain_decoder(model, x_images, shifts, opt.pretrain_lambdas, ps);
    }

    TrainSchedule dec = s;
    dec.epochs = opt.epochs;
    dec.lr = opt.lr;
    l.decoder = train_decoder(model, images, dec);
    if (logs) *logs = std::move(l);
    return model;
}

inline nlohmann::json codec_training_info(const synth::Dataset& ds, const CodecTrainOptions& opt, bool pretrained) {
    return {{"dataset", ds.id()},
            {"seed", opt.seed},
            {"encoder_epochs", opt.encoder_epochs},
            {"encoder_lr", opt.encoder_lr},
            {"epochs", opt.epochs},
            {"lr", opt.lr},
            {"batch_size", opt.batch_size},
            {"pretrain_steps", pretrained ? opt.pretrain_steps : 0}};
}

/// X = training samples without `pos_attr` (with it, when polarity is flipped); Y = the rest.
struct Domains {
    pseudo::FeatureIndex x, y;
};

inline bool in_target(const synth::SyntheticPortrait& p, const std::string& attr, bool positive) {
    return p.attributes.get(attr) == positive;
}

inline Domains build_domains(const CodecModel& codec, const synth::Dataset& ds, const std::string& pos_attr,
                             bool positive = true) {
    const Portraits train = split(ds, false);
    Domains d;
    d.x = pseudo::build_index(codec, train, [&](const auto& p) { return !in_target(p, pos_attr, positive); }, "X");
    d.y = pseudo::build_index(codec, train, [&](const auto& p) { return in_target(p, pos_attr, positive); }, "Y");
    return d;
}

inline pseudo::LabelSet build_labels(const CodecModel& codec, const synth::Dataset& ds, const std::string& effect,
                                     const std::string& pos_attr, bool positive, std::size_t k,
                                     const Domains* domains = nullptr) {
    Domains local;
    if (!domains) {
        local = build_domains(codec, ds, pos_attr, positive);
        domains = &local;
    }
    if (k == 0 || k > domains->x.size() || k > domains->y.size())
        throw Error("build-labels: K=" + std::to_string(k) + " but the domains hold " + std::to_string(domains->x.size()) +
                    " and " + std::to_string(domains->y.size()) + " samples");
    pseudo::LabelSet set;
    set.effect_name = effect;
    set.pos_attr = pos_attr;
    set.positive_polarity = positive;
    set.k = k;
    set.encoder_checksum = codec.encoder_checksum();
    set.dataset_id = ds.id();
    set.dataset_dir = ds.directory;
    set.labels.reserve(domains->x.size());
    for (std::size_t i = 0; i < domains->x.size(); ++i)
        set.labels.push_back(pseudo::pseudo_label_from_features(domains->x.ids[i], domains->x.entry(i), domains->x,
                                                                domains->y, k));
    return set;
}

/// Trains V on the labelled samples, re-encoding their images from the dataset.
inline FaceletBank train_bank(const CodecModel& codec, const synth::Dataset& ds, const pseudo::LabelSet& labels,
                              const FaceletTrainConfig& cfg, TrainLog* log = nullptr) {
    pseudo::check_labels(codec, labels);
    std::map<std::string, const synth::SyntheticPortrait*> by_id;
    for (const auto& e : ds.entries) by_id[e.portrait.sample_id] = &e.portrait;
    Portraits xs;
    std::vector<FeaturePyramid> targets;
    for (const auto& pl : labels.labels) {
        auto it = by_id.find(pl.sample_id);
        if (it == by_id.end()) throw Error("train-facelet: label sample " + pl.sample_id + " is not in the dataset");
        xs.push_back(it->second);
        targets.push_back(pl.delta);
    }
    FaceletBank bank = train_facelet(codec, labels.effect_name, encode_all(codec, xs), targets, cfg, log);
    bank.metadata.trained_on = labels.dataset_id;
    bank.metadata.k_neighbors = labels.k;
    bank.metadata.created_at = io::timestamp_utc();
    bank.metadata.extra = {{"pos_attr", labels.pos_attr},
                           {"positive_polarity", labels.positive_polarity},
                           {"label_count", labels.labels.size()},
                           {"epochs", cfg.schedule.epochs},
                           {"lr", cfg.schedule.lr},
                           {"seed", cfg.schedule.seed}};
    return bank;
}

}  // namespace facelet::pipeline
