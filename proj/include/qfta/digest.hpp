#pragma once

#include <string>
#include <vector>

namespace qfta {

std::string sha256_hex(const void *data, size_t len);
std::string sha256_hex(const std::string &s);

// Incremental hasher for streaming larger payloads (model weights etc).
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256 &) = delete;
  Sha256 &operator=(const Sha256 &) = delete;
  void update(const void *data, size_t len);
  void update(const std::string &s) { update(s.data(), s.size()); }
  void update(double d) { update(&d, sizeof(d)); }
  std::string hex();  // finalizes

 private:
  void *ctx_;
};

}  // namespace qfta
