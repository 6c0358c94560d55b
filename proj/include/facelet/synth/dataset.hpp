#pragma once

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "facelet/io/png.hpp"
#include "facelet/synth/portrait.hpp"

namespace facelet::synth {

namespace fs = std::filesystem;

inline constexpr int kManifestVersion = 1;

struct DatasetEntry {
    std::string file;  // relative to the dataset directory
    SyntheticPortrait portrait;
};

struct Dataset {
    int version = kManifestVersion;
    int image_size = 64;
    std::uint64_t generator_seed = 0;
    std::string directory;
    std::vector<DatasetEntry> entries;

    std::size_t size() const { return entries.size(); }
    std::string id() const { return "synthetic-s" + std::to_string(generator_seed) + "-n" + std::to_string(entries.size()) +
                                    "-" + std::to_string(image_size); }
    std::vector<Tensor> images() const {
        std::vector<Tensor> out;
        out.reserve(entries.size());
        for (const auto& e : entries) out.push_back(e.portrait.image);
        return out;
    }
};

inline nlohmann::json box_json(const Box& b) { return {{"x", b.x}, {"y", b.y}, {"w", b.w}, {"h", b.h}}; }

inline Box box_from_json(const nlohmann::json& j) {
    return {j.at("x").get<int>(), j.at("y").get<int>(), j.at("w").get<int>(), j.at("h").get<int>()};
}

inline nlohmann::json manifest_json(const Dataset& ds) {
    nlohmann::json entries = nlohmann::json::array();
    std::size_t counts[4] = {0, 0, 0, 0};
    for (const auto& e : ds.entries) {
        const auto& p = e.portrait;
        nlohmann::json attrs, regions = nlohmann::json::object();
        for (std::size_t i = 0; i < attribute_names().size(); ++i) {
            const bool v = p.attributes.get(attribute_names()[i]);
            attrs[attribute_names()[i]] = v;
            counts[i] += v;
        }
        for (const auto& [name, box] : p.regions) regions[name] = box_json(box);
        entries.push_back({{"file", e.file},
                           {"sample_id", p.sample_id},
                           {"split", is_test_split(p.sample_id) ? "test" : "train"},
                           {"attributes", attrs},
                           {"regions", regions},
                           {"jitter", {{"dx", p.jitter.dx}, {"dy", p.jitter.dy}, {"applied", p.jitter.applied}}}});
    }
    nlohmann::json totals;
    for (std::size_t i = 0; i < attribute_names().size(); ++i) totals[attribute_names()[i]] = counts[i];
    return {{"version", ds.version},
            {"image_size", ds.image_size},
            {"generator_seed", ds.generator_seed},
            {"count", ds.entries.size()},
            {"attribute_counts", totals},
            {"entries", entries}};
}

inline Dataset make_dataset(std::uint64_t seed, std::size_t count, int size, const AttributeSpec& spec = {}) {
    Dataset ds;
    ds.image_size = size;
    ds.generator_seed = seed;
    for (auto& p : generate_portraits(seed, count, size, spec)) {
        std::string file = "images/" + p.sample_id + ".png";
        ds.entries.push_back({std::move(file), std::move(p)});
    }
    return ds;
}

/// Writes PNGs plus manifest.json under `dir` (created if missing).
inline void write_dataset(const Dataset& ds, const std::string& dir) {
    std::error_code ec;
    fs::create_directories(fs::path(dir) / "images", ec);
    if (ec) throw Error("cannot create dataset directory " + dir + ": " + ec.message());
    for (const auto& e : ds.entries) io::save_png((fs::path(dir) / e.file).string(), e.portrait.image);
    std::ofstream out(fs::path(dir) / "manifest.json", std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write manifest in " + dir);
    out << manifest_json(ds).dump(1) << '\n';
    if (!out) throw Error("short write of manifest in " + dir);
}

class ManifestError : public Error {
public:
    using Error::Error;
};

/// Loads and validates a dataset directory. Any inconsistency throws ManifestError.
inline Dataset load_dataset(const std::string& dir) {
    const fs::path root(dir);
    std::ifstream in(root / "manifest.json", std::ios::binary);
    if (!in) throw ManifestError("missing manifest.json in " + dir);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const std::exception& e) {
        throw ManifestError(std::string("manifest.json is not valid JSON: ") + e.what());
    }
    Dataset ds;
    ds.directory = dir;
    try {
        ds.version = j.at("version").get<int>();
        if (ds.version != kManifestVersion) throw ManifestError("unsupported manifest version " + std::to_string(ds.version));
        ds.image_size = j.at("image_size").get<int>();
        ds.generator_seed = j.at("generator_seed").get<std::uint64_t>();
        const auto& entries = j.at("entries");
        if (j.contains("count") && j["count"].get<std::size_t>() != entries.size())
            throw ManifestError("manifest count does not match number of entries");
        std::set<std::string> seen;
        for (const auto& je : entries) {
            DatasetEntry e;
            e.file = je.at("file").get<std::string>();
            auto& p = e.portrait;
            p.sample_id = je.at("sample_id").get<std::string>();
            if (!seen.insert(p.sample_id).second) throw ManifestError("duplicate sample_id " + p.sample_id);
            const auto& a = je.at("attributes");
            p.attributes.mustache = a.at("mustache").get<bool>();
            p.attributes.smile = a.at("smile").get<bool>();
            p.attributes.bright = a.at("bright").get<bool>();
            p.attributes.wide_jaw = a.value("wide_jaw", false);
            for (const auto& [name, jb] : je.at("regions").items()) p.regions[name] = box_from_json(jb);
            const auto& jj = je.at("jitter");
            p.jitter = {jj.at("dx").get<int>(), jj.at("dy").get<int>(), jj.at("applied").get<bool>()};
            const fs::path file = root / e.file;
            if (!fs::exists(file)) throw ManifestError("missing image file " + e.file);
            p.image = io::load_png(file.string());
            if (p.image.dim(1) != static_cast<std::size_t>(ds.image_size) ||
                p.image.dim(2) != static_cast<std::size_t>(ds.image_size))
                throw ManifestError(e.file + " is " + shape_str(p.image.shape()) + ", expected size " +
                                    std::to_string(ds.image_size));
            for (const auto& name : attribute_names()) {
                if (!p.attributes.get(name)) continue;
                auto it = p.regions.find(name);
                if (it == p.regions.end()) throw ManifestError(p.sample_id + ": attribute " + name + " has no region");
                if (!it->second.inside(ds.image_size, ds.image_size))
                    throw ManifestError(p.sample_id + ": region " + name + " leaves the image");
            }
            ds.entries.push_back(std::move(e));
        }
    } catch (const ManifestError&) {
        throw;
    } catch (const nlohmann::json::exception& e) {
        throw ManifestError(std::string("malformed manifest: ") + e.what());
    } catch (const io::FormatError& e) {
        throw ManifestError(std::string("bad image: ") + e.what());
    }
    if (ds.entries.empty()) throw ManifestError("manifest has no entries");
    return ds;
}

/// Indices of entries in the requested split.
inline std::vector<std::size_t> split_indices(const Dataset& ds, bool test) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < ds.entries.size(); ++i)
        if (is_test_split(ds.entries[i].portrait.sample_id) == test) out.push_back(i);
    return out;
}

}  // namespace facelet::synth
