#pragma once

// FCLT container: "FCLT" | u32 version | u32 meta_len | JSON metadata | zero pad | payload.
// Every tensor starts on a 64-byte boundary of the payload; byte_offset is relative to the payload start,
// which itself sits at the first 64-byte boundary after the metadata.

#include <algorithm>
#include <bit>
#include <cstdlib>
#include <ctime>
#include <cstdint>
#include <cstring>
#include <map>
#include <string>

#include <json.hpp>

#include "facelet/core/tensor.hpp"
#include "facelet/io/png.hpp"

namespace facelet::io {

static_assert(std::endian::native == std::endian::little, "FCLT payloads are written in host byte order");

inline constexpr std::uint32_t kFcltVersion = 1;
inline constexpr std::size_t kFcltAlign = 64;

struct FcltFile {
    nlohmann::json info = nlohmann::json::object();
    std::map<std::string, Tensor> tensors;
};

namespace detail {

inline std::size_t align_up(std::size_t n) { return (n + kFcltAlign - 1) / kFcltAlign * kFcltAlign; }

inline void put_u32(Bytes& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const Bytes& in, std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[at + i]) << (8 * i);
    return v;
}

}  // namespace detail

inline Bytes serialize_fclt(const FcltFile& file) {
    nlohmann::json table = nlohmann::json::object();
    std::size_t offset = 0, end = 0;
    for (const auto& [name, t] : file.tensors) {
        if (name.empty()) throw Error("FCLT: empty tensor name");
        const std::size_t len = t.numel() * sizeof(float);
        table[name] = {{"shape", t.shape()}, {"dtype", "f32"}, {"byte_offset", offset}, {"byte_len", len}};
        end = offset + len;
        offset = detail::align_up(end);
    }
    nlohmann::json meta = {{"info", file.info}, {"tensors", table}};
    const std::string text = meta.dump();

    Bytes out{'F', 'C', 'L', 'T'};
    detail::put_u32(out, kFcltVersion);
    detail::put_u32(out, static_cast<std::uint32_t>(text.size()));
    out.insert(out.end(), text.begin(), text.end());
    out.resize(detail::align_up(out.size()), 0);
    const std::size_t payload = out.size();
    out.resize(payload + end, 0);
    for (const auto& [name, t] : file.tensors) {
        const std::size_t at = payload + table[name]["byte_offset"].get<std::size_t>();
        std::memcpy(out.data() + at, t.data(), t.numel() * sizeof(float));
    }
    return out;
}

/// Parses and validates a container. Any structural problem throws FormatError.
inline FcltFile parse_fclt(const Bytes& bytes) {
    if (bytes.size() < 12 || std::memcmp(bytes.data(), "FCLT", 4) != 0) throw FormatError("FCLT: bad magic");
    const std::uint32_t version = detail::get_u32(bytes, 4);
    if (version != kFcltVersion) throw FormatError("FCLT: unsupported version " + std::to_string(version));
    const std::size_t meta_len = detail::get_u32(bytes, 8);
    if (12 + meta_len > bytes.size()) throw FormatError("FCLT: metadata runs past end of file");
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + static_cast<std::ptrdiff_t>(meta_len));
    } catch (const std::exception& e) {
        throw FormatError(std::string("FCLT: metadata is not JSON: ") + e.what());
    }
    if (!meta.is_object() || !meta.contains("tensors") || !meta["tensors"].is_object())
        throw FormatError("FCLT: metadata lacks a tensor table");
    const std::size_t payload = detail::align_up(12 + meta_len);
    if (payload > bytes.size()) throw FormatError("FCLT: payload start past end of file");
    const std::size_t payload_len = bytes.size() - payload;

    FcltFile file;
    file.info = meta.value("info", nlohmann::json::object());
    std::vector<std::pair<std::size_t, std::size_t>> spans;
    try {
        for (const auto& [name, d] : meta["tensors"].items()) {
            if (d.at("dtype").get<std::string>() != "f32") throw FormatError("FCLT: tensor " + name + " is not f32");
            const auto shape = d.at("shape").get<Shape>();
            const auto off = d.at("byte_offset").get<std::size_t>();
            const auto len = d.at("byte_len").get<std::size_t>();
            if (shape.empty() || shape_numel(shape) == 0) throw FormatError("FCLT: tensor " + name + " has empty shape");
            if (len != shape_numel(shape) * sizeof(float))
                throw FormatError("FCLT: tensor " + name + " length does not match its shape");
            if (off % kFcltAlign != 0) throw FormatError("FCLT: tensor " + name + " is misaligned");
            if (off > payload_len || len > payload_len - off)
                throw FormatError("FCLT: tensor " + name + " runs past end of payload");
            spans.emplace_back(off, len);
            std::vector<float> data(shape_numel(shape));
            std::memcpy(data.data(), bytes.data() + payload + off, len);
            Tensor t(shape, std::move(data));
            if (!t.all_finite()) throw FormatError("FCLT: tensor " + name + " holds non-finite values");
            file.tensors.emplace(name, std::move(t));
        }
    } catch (const FormatError&) {
        throw;
    } catch (const std::exception& e) {
        throw FormatError(std::string("FCLT: malformed tensor table: ") + e.what());
    }
    std::sort(spans.begin(), spans.end());
    std::size_t end = 0;
    for (std::size_t i = 0; i < spans.size(); ++i) {
        if (i > 0 && spans[i - 1].first + spans[i - 1].second > spans[i].first) throw FormatError("FCLT: overlapping tensors");
        end = std::max(end, spans[i].first + spans[i].second);
    }
    if (end != payload_len) throw FormatError("FCLT: file size does not match the tensor table");
    return file;
}

inline void save_fclt(const std::string& path, const FcltFile& file) { write_file(path, serialize_fclt(file)); }
inline FcltFile load_fclt(const std::string& path) { return parse_fclt(read_file(path)); }

/// created_at stamp: SOURCE_DATE_EPOCH when set (reproducible builds), otherwise the wall clock.
inline std::string timestamp_utc() {
    std::time_t t = std::time(nullptr);
    if (const char* e = std::getenv("SOURCE_DATE_EPOCH")) t = static_cast<std::time_t>(std::strtoll(e, nullptr, 10));
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

}  // namespace facelet::io
