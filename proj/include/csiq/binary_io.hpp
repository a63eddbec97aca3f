// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
// http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Little-endian byte serialization shared by the dataset, checkpoint and
// feedback-record formats.

#ifndef CSIQ_BINARY_IO_HPP
#define CSIQ_BINARY_IO_HPP

#include "csiq/errors.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace csiq::io {

class ByteWriter {
 public:
  void put_u8(std::uint8_t v) { bytes_.push_back(v); }
  void put_u32(std::uint32_t v) { put_le(v, 4); }
  void put_u64(std::uint64_t v) { put_le(v, 8); }
  void put_f32(float v) { put_u32(std::bit_cast<std::uint32_t>(v)); }
  void put_bytes(std::span<const std::uint8_t> b) { bytes_.insert(bytes_.end(), b.begin(), b.end()); }
  void put_string(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }

  const std::vector<std::uint8_t>& bytes() const { return bytes_; }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  void put_le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes_.push_back(std::uint8_t(v >> (8 * i)));
  }
  std::vector<std::uint8_t> bytes_;
};

/// Bounds-checked reader; every getter names the field it was reading on failure.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint8_t u8(std::string_view field) { return std::uint8_t(get_le(1, field)); }
  std::uint32_t u32(std::string_view field) { return std::uint32_t(get_le(4, field)); }
  std::uint64_t u64(std::string_view field) { return get_le(8, field); }
  float f32(std::string_view field) { return std::bit_cast<float>(u32(field)); }
  std::span<const std::uint8_t> bytes(std::size_t n, std::string_view field) {
    require(n, field);
    auto out = bytes_.subspan(pos_, n);
    pos_ += n;
    return out;
  }
  std::string string(std::size_t n, std::string_view field) {
    auto b = bytes(n, field);
    return std::string(b.begin(), b.end());
  }

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void require(std::size_t n, std::string_view field) const {
    if (bytes_.size() - pos_ < n) {
      throw DataError("truncated input while reading '" + std::string(field) + "' at byte " + std::to_string(pos_));
    }
  }
  std::uint64_t get_le(int n, std::string_view field) {
    require(std::size_t(n), field);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= std::uint64_t(bytes_[pos_ + std::size_t(i)]) << (8 * i);
    pos_ += std::size_t(n);
    return v;
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

/// FNV-1a, used for config and content hashes.
std::uint64_t fnv1a(std::span<const std::uint8_t> bytes, std::uint64_t seed = 14695981039346656037ull);
std::uint64_t fnv1a(std::string_view text);
std::string hex64(std::uint64_t v);

}  // namespace csiq::io

#endif  // CSIQ_BINARY_IO_HPP
