#pragma once

#include <string>
#include <vector>

#include "facelet/codec/serialize.hpp"
#include "facelet/io/fclt.hpp"
#include "facelet/pseudo/knn.hpp"

namespace facelet::pseudo {

/// Pseudo-labels for every X-domain training sample, bound to the encoder that produced them.
/// Labels depend on E only, so the binding is the encoder checksum rather than the full codec fingerprint.
struct LabelSet {
    std::string effect_name;
    std::string pos_attr;
    bool positive_polarity = true;  // Y = samples with pos_attr set
    std::size_t k = 0;
    std::string encoder_checksum;
    std::string dataset_id;
    std::string dataset_dir;  // where the labelled images live; empty for in-memory datasets
    std::vector<PseudoLabel> labels;
};

inline io::FcltFile labels_to_fclt(const LabelSet& set) {
    if (set.labels.empty()) throw Error("label set is empty");
    io::FcltFile f;
    nlohmann::json ids = nlohmann::json::array(), nx = nlohmann::json::array(), ny = nlohmann::json::array();
    for (const auto& l : set.labels) {
        ids.push_back(l.sample_id);
        nx.push_back(l.neighbor_ids_x);
        ny.push_back(l.neighbor_ids_y);
    }
    f.info = {{"kind", "pseudo_labels"},
              {"effect_name", set.effect_name},
              {"pos_attr", set.pos_attr},
              {"positive_polarity", set.positive_polarity},
              {"k", set.k},
              {"encoder_checksum", set.encoder_checksum},
              {"dataset_id", set.dataset_id},
              {"dataset_dir", set.dataset_dir},
              {"domain_filters",
               {{"X", (set.positive_polarity ? "!" : "") + set.pos_attr},
                {"Y", (set.positive_polarity ? "" : "!") + set.pos_attr}}},
              {"sample_ids", ids},
              {"neighbors_x", nx},
              {"neighbors_y", ny}};
    for (const auto& [l, t] : set.labels.front().delta.levels) {
        std::vector<const Tensor*> rows;
        for (const auto& pl : set.labels) rows.push_back(&pl.delta.at(l));
        f.tensors["delta.level" + std::to_string(l)] = stack(rows);
    }
    return f;
}

inline LabelSet labels_from_fclt(const io::FcltFile& f) {
    if (f.info.value("kind", "") != "pseudo_labels") throw io::FormatError("not a pseudo-label container");
    LabelSet set;
    try {
        set.effect_name = f.info.at("effect_name").get<std::string>();
        set.pos_attr = f.info.at("pos_attr").get<std::string>();
        set.positive_polarity = f.info.at("positive_polarity").get<bool>();
        set.k = f.info.at("k").get<std::size_t>();
        set.encoder_checksum = f.info.at("encoder_checksum").get<std::string>();
        set.dataset_id = f.info.at("dataset_id").get<std::string>();
        set.dataset_dir = f.info.value("dataset_dir", "");
        const auto ids = f.info.at("sample_ids").get<std::vector<std::string>>();
        const auto nx = f.info.at("neighbors_x").get<std::vector<std::vector<std::string>>>();
        const auto ny = f.info.at("neighbors_y").get<std::vector<std::vector<std::string>>>();
        if (nx.size() != ids.size() || ny.size() != ids.size()) throw io::FormatError("neighbor lists do not match ids");
        set.labels.resize(ids.size());
        for (std::size_t i = 0; i < ids.size(); ++i) {
            set.labels[i].sample_id = ids[i];
            set.labels[i].k_used = set.k;
            set.labels[i].neighbor_ids_x = nx[i];
            set.labels[i].neighbor_ids_y = ny[i];
        }
        for (const auto& [name, t] : f.tensors) {
            if (name.rfind("delta.level", 0) != 0) throw io::FormatError("unexpected tensor " + name);
            const int level = std::stoi(name.substr(11));
            if (t.rank() != 4 || t.dim(0) != ids.size()) throw io::FormatError(name + " does not have one row per sample");
            for (std::size_t i = 0; i < ids.size(); ++i) set.labels[i].delta.levels[level] = unstack(t, i);
        }
    } catch (const io::FormatError&) {
        throw;
    } catch (const std::exception& e) {
        throw io::FormatError(std::string("malformed label container: ") + e.what());
    }
    return set;
}

inline void save_labels(const std::string& path, const LabelSet& set) { io::save_fclt(path, labels_to_fclt(set)); }
inline LabelSet load_labels(const std::string& path) { return labels_from_fclt(io::load_fclt(path)); }

inline void check_labels(const CodecModel& codec, const LabelSet& set) {
    if (set.encoder_checksum != codec.encoder_checksum())
        throw FingerprintError("label set was built with a different encoder");
}

}  // namespace facelet::pseudo
