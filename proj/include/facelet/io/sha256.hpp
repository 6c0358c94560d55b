#pragma once

#include <openssl/evp.h>

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>

#include "facelet/core/tensor.hpp"

namespace facelet::io {

/// Incremental SHA-256 (OpenSSL EVP).
class Sha256 {
public:
    Sha256() : ctx_(EVP_MD_CTX_new(), &EVP_MD_CTX_free) {
        if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) throw Error("sha256 init failed");
    }

    Sha256& update(const void* data, std::size_t len) {
        EVP_DigestUpdate(ctx_.get(), data, len);
        return *this;
    }
    Sha256& update(std::string_view s) { return update(s.data(), s.size()); }

    template <class T>
    Sha256& update(const BasicTensor<T>& t) {
        for (auto e : t.shape()) {
            const std::uint64_t v = e;
            update(&v, sizeof v);
        }
        return update(t.data(), t.numel() * sizeof(T));
    }

    std::string hex() {
        std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
        unsigned int len = 0;
        EVP_DigestFinal_ex(ctx_.get(), md.data(), &len);
        static constexpr char digits[] = "0123456789abcdef";
        std::string out;
        for (unsigned int i = 0; i < len; ++i) {
            out += digits[md[i] >> 4];
            out += digits[md[i] & 15];
        }
        return out;
    }

private:
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

inline std::string sha256_hex(std::string_view bytes) { return Sha256().update(bytes).hex(); }

}  // namespace facelet::io
