#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>

namespace isodream {

// Minimal SHA-256, used for config hashes and checkpoint manifests.
class Sha256 {
 public:
  Sha256();
  void update(const void* data, size_t len);
  std::array<uint8_t, 32> digest();  // finalizes; do not update() afterwards

  static std::string hex(const std::array<uint8_t, 32>& d);
  static std::string hash_hex(const void* data, size_t len);
  static std::string hash_hex(const std::string& s);

 private:
  void process_block(const uint8_t* p);

  std::array<uint32_t, 8> state_;
  std::array<uint8_t, 64> buf_;
  size_t buf_len_ = 0;
  uint64_t total_len_ = 0;
  bool finalized_ = false;
};

}  // namespace isodream
