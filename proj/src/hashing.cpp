// SPDX-License-Identifier: Apache-2.0

#include "freeinsert/hashing.hpp"

#include <array>
#include <cstdio>
#include <fstream>

#include <openssl/evp.h>

#include "freeinsert/errors.hpp"

namespace freeinsert {

struct Sha256::Impl {
    EVP_MD_CTX* ctx = nullptr;
};

Sha256::Sha256() : m_impl(std::make_unique<Impl>()) {
    m_impl->ctx = EVP_MD_CTX_new();
    if (m_impl->ctx == nullptr || EVP_DigestInit_ex(m_impl->ctx, EVP_sha256(), nullptr) != 1) {
        throw Error("sha256 init failed");
    }
}

Sha256::~Sha256() {
    EVP_MD_CTX_free(m_impl->ctx);
}

Sha256& Sha256::update(std::span<const std::uint8_t> bytes) {
    if (!bytes.empty()) {
        EVP_DigestUpdate(m_impl->ctx, bytes.data(), bytes.size());
    }
    return *this;
}

Sha256& Sha256::update(std::string_view text) {
    // Length prefix keeps ("ab", "c") and ("a", "bc") apart.
    const std::uint64_t n = text.size();
    update_pod(n);
    return update(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

Sha256& Sha256::update_floats(std::span<const float> values) {
    const std::uint64_t n = values.size();
    update_pod(n);
    return update(std::span(reinterpret_cast<const std::uint8_t*>(values.data()), values.size_bytes()));
}

std::string Sha256::hex_digest() {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    EVP_DigestFinal_ex(m_impl->ctx, md.data(), &len);
    std::string out;
    out.reserve(len * 2);
    char buf[3];
    for (unsigned int i = 0; i < len; ++i) {
        std::snprintf(buf, sizeof(buf), "%02x", md[i]);
        out += buf;
    }
    return out;
}

std::uint64_t Sha256::digest64() {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    EVP_DigestFinal_ex(m_impl->ctx, md.data(), &len);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        v = (v << 8) | md[static_cast<std::size_t>(i)];
    }
    return v;
}

std::string sha256_hex(std::string_view text) {
    Sha256 h;
    h.update(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
    return h.hex_digest();
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
    Sha256 h;
    h.update(bytes);
    return h.hex_digest();
}

std::string sha256_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error("cannot open " + path.string());
    }
    Sha256 h;
    std::array<char, 1 << 16> buf{};
    while (in) {
        in.read(buf.data(), buf.size());
        const auto got = in.gcount();
        if (got > 0) {
            h.update(std::span(reinterpret_cast<const std::uint8_t*>(buf.data()), static_cast<std::size_t>(got)));
        }
    }
    return h.hex_digest();
}

std::string base64_encode(std::span<const std::uint8_t> bytes) {
    std::string out(4 * ((bytes.size() + 2) / 3), '\0');
    const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                  static_cast<int>(bytes.size()));
    out.resize(static_cast<std::size_t>(n));
    return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
    std::string clean;
    clean.reserve(text.size());
    for (char c : text) {
        if (c != '\n' && c != '\r' && c != ' ') {
            clean.push_back(c);
        }
    }
    if (clean.size() % 4 != 0) {
        throw Error("base64 input length is not a multiple of 4");
    }
    std::vector<std::uint8_t> out(clean.size() / 4 * 3);
    const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(clean.data()),
                                  static_cast<int>(clean.size()));
    if (n < 0) {
        throw Error("invalid base64 input");
    }
    // EVP_DecodeBlock keeps the bytes encoded by '=' padding.
    std::size_t pad = 0;
    for (std::size_t i = clean.size(); i > 0 && clean[i - 1] == '='; --i) {
        ++pad;
    }
    out.resize(static_cast<std::size_t>(n) - pad);
    return out;
}

}  // namespace freeinsert
