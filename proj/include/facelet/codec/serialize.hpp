#pragma once

#include <cstdio>
#include <string>

#include "facelet/codec/model.hpp"
#include "facelet/io/fclt.hpp"

namespace facelet {

class FingerprintError : public Error {
public:
    using Error::Error;
};

inline nlohmann::json config_json(const CodecConfig& c) {
    return {{"input_channels", c.input_channels},
            {"base_channels", c.base_channels},
            {"levels", c.levels},
            {"tap_levels", c.tap_levels},
            {"image_size", c.image_size}};
}

inline CodecConfig config_from_json(const nlohmann::json& j) {
    CodecConfig c;
    c.input_channels = j.at("input_channels").get<std::size_t>();
    c.base_channels = j.at("base_channels").get<std::size_t>();
    c.levels = j.at("levels").get<std::size_t>();
    c.tap_levels = j.at("tap_levels").get<std::vector<int>>();
    c.image_size = j.at("image_size").get<std::size_t>();
    c.validate();
    return c;
}

inline std::string layer_key(const char* part, std::size_t i, const char* field) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%s.%02zu.%s", part, i, field);
    return buf;
}

struct CodecSerializer {
    /// `extra` lands under info.training (seeds, schedules); it never affects the fingerprint.
    static io::FcltFile to_fclt(const CodecModel& m, const nlohmann::json& extra = nlohmann::json::object()) {
        io::FcltFile f;
        f.info = {{"kind", "codec"},
                  {"config", config_json(m.config_)},
                  {"fingerprint", m.fingerprint()},
                  {"encoder_checksum", m.encoder_checksum()},
                  {"encoder_frozen", m.frozen_},
                  {"training", extra}};
        for (std::size_t i = 0; i < m.encoder_.size(); ++i) {
            f.tensors[layer_key("encoder", i, "weight")] = m.encoder_[i].weight.value;
            f.tensors[layer_key("encoder", i, "bias")] = m.encoder_[i].bias.value;
        }
        for (std::size_t i = 0; i < m.decoder_.size(); ++i) {
            f.tensors[layer_key("decoder", i, "weight")] = m.decoder_[i].weight.value;
            f.tensors[layer_key("decoder", i, "bias")] = m.decoder_[i].bias.value;
        }
        return f;
    }

    static CodecModel from_fclt(const io::FcltFile& f) {
        if (f.info.value("kind", "") != "codec") throw io::FormatError("not a codec container");
        CodecModel m(config_from_json(f.info.at("config")), 0);
        auto fill = [&](std::vector<ConvLayer>& layers, const char* part) {
            for (std::size_t i = 0; i < layers.size(); ++i) {
                for (auto [field, param] : {std::pair{"weight", &layers[i].weight}, std::pair{"bias", &layers[i].bias}}) {
                    auto it = f.tensors.find(layer_key(part, i, field));
                    if (it == f.tensors.end()) throw io::FormatError("codec container lacks " + layer_key(part, i, field));
                    if (it->second.shape() != param->value.shape())
                        throw io::FormatError(layer_key(part, i, field) + " has shape " + shape_str(it->second.shape()) +
                                              ", expected " + shape_str(param->value.shape()));
                    param->value = it->second;
                    param->grad = Tensor::zeros(param->value.shape());
                }
            }
        };
        fill(m.encoder_, "encoder");
        fill(m.decoder_, "decoder");
        if (f.tensors.size() != 2 * (m.encoder_.size() + m.decoder_.size()))
            throw io::FormatError("codec container has unexpected extra tensors");
        if (f.info.value("encoder_frozen", false)) m.freeze_encoder();
        const std::string want = f.info.value("fingerprint", "");
        if (want != m.fingerprint()) throw FingerprintError("codec fingerprint does not match its parameters");
        return m;
    }
};

inline void save_codec(const std::string& path, const CodecModel& m,
                       const nlohmann::json& extra = nlohmann::json::object()) {
    io::save_fclt(path, CodecSerializer::to_fclt(m, extra));
}

inline CodecModel load_codec(const std::string& path) { return CodecSerializer::from_fclt(io::load_fclt(path)); }

}  // namespace facelet
