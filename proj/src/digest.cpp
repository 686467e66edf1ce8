#include "qfta/digest.hpp"

#include <openssl/evp.h>

#include <stdexcept>

namespace qfta {

namespace {
std::string to_hex(const unsigned char *buf, unsigned int len) {
  static const char *digits = "0123456789abcdef";
  std::string out(len * 2, '0');
  for (unsigned int i = 0; i < len; ++i) {
    out[2 * i] = digits[buf[i] >> 4];
    out[2 * i + 1] = digits[buf[i] & 0xf];
  }
  return out;
}
}  // namespace

Sha256::Sha256() {
  EVP_MD_CTX *ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256 init failed");
  ctx_ = ctx;
}

Sha256::~Sha256() {
  if (ctx_) EVP_MD_CTX_free(static_cast<EVP_MD_CTX *>(ctx_));
}

void Sha256::update(const void *data, size_t len) {
  if (EVP_DigestUpdate(static_cast<EVP_MD_CTX *>(ctx_), data, len) != 1)
    throw std::runtime_error("sha256 update failed");
}

std::string Sha256::hex() {
  unsigned char buf[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_DigestFinal_ex(static_cast<EVP_MD_CTX *>(ctx_), buf, &len) != 1)
    throw std::runtime_error("sha256 final failed");
  return to_hex(buf, len);
}

std::string sha256_hex(const void *data, size_t len) {
  Sha256 h;
  h.update(data, len);
  return h.hex();
}

std::string sha256_hex(const std::string &s) { return sha256_hex(s.data(), s.size()); }

}  // namespace qfta
