#include "mergelab/digest.hpp"

#include "mergelab/error.hpp"

#include <openssl/evp.h>

#include <bit>
#include <fstream>
#include <iterator>
#include <memory>

namespace mergelab {

namespace {

class sha256 {
public:
    sha256() : ctx_(EVP_MD_CTX_new(), &EVP_MD_CTX_free) {
        if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) {
            throw std::runtime_error("EVP sha256 init failed");
        }
    }

    void update(const void * data, std::size_t n) { EVP_DigestUpdate(ctx_.get(), data, n); }

    void update_u64(std::uint64_t v) {
        std::uint8_t b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
        update(b, 8);
    }

    std::string hex() {
        unsigned char md[EVP_MAX_MD_SIZE];
        unsigned int len = 0;
        EVP_DigestFinal_ex(ctx_.get(), md, &len);
        static const char * digits = "0123456789abcdef";
        std::string s;
        for (unsigned int i = 0; i < len; ++i) {
            s.push_back(digits[md[i] >> 4]);
            s.push_back(digits[md[i] & 0xf]);
        }
        return s;
    }

private:
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

} // namespace

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
    sha256 h;
    h.update(bytes.data(), bytes.size());
    return h.hex();
}

std::string sha256_hex(std::string_view text) {
    sha256 h;
    h.update(text.data(), text.size());
    return h.hex();
}

std::string file_sha256(const std::filesystem::path & path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        fail(error_kind::io, "cannot open '" + path.string() + "'");
    }
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return sha256_hex(bytes);
}

std::string content_digest(const checkpoint & c) {
    sha256 h;
    h.update_u64(c.tensors.size());
    for (const auto & [name, t] : c.tensors) {
        h.update_u64(name.size());
        h.update(name.data(), name.size());
        h.update_u64(static_cast<std::uint64_t>(t.type));
        h.update_u64(t.shape.size());
        for (auto d : t.shape) h.update_u64(static_cast<std::uint64_t>(d));
        for (float v : t.data) {
            const auto bits = std::bit_cast<std::uint32_t>(v);
            std::uint8_t b[4] = {static_cast<std::uint8_t>(bits), static_cast<std::uint8_t>(bits >> 8),
                                 static_cast<std::uint8_t>(bits >> 16), static_cast<std::uint8_t>(bits >> 24)};
            h.update(b, 4);
        }
    }
    return h.hex();
}

} // namespace mergelab
