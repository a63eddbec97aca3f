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

#include "csiq/binary_io.hpp"
#include "csiq/channel.hpp"

#include <cstdio>
#include <fstream>
#include <iterator>

namespace csiq::io {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw DataError("short write to " + path.string());
}

std::uint64_t fnv1a(std::span<const std::uint8_t> bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 1099511628211ull;
  }
  return h;
}

std::uint64_t fnv1a(std::string_view text) {
  return fnv1a(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace csiq::io

namespace csiq::channel {

namespace {

constexpr char kDatasetMagic[8] = {'C', 'S', 'I', 'Q', 'D', 'S', '1', '\0'};
constexpr std::uint32_t kHasUplink = 1u << 0;
constexpr std::uint32_t kMagnitudeOnly = 1u << 1;

void put_plane(io::ByteWriter& w, const ComplexMatrix& m, bool imag) {
  for (Index r = 0; r < m.rows(); ++r) {
    for (Index c = 0; c < m.cols(); ++c) w.put_f32(float(imag ? m(r, c).imag() : m(r, c).real()));
  }
}

void get_plane(io::ByteReader& r, ComplexMatrix& m, bool imag, const char* field) {
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) {
      const double v = r.f32(field);
      if (imag) m(i, j).imag(v); else m(i, j).real(v);
    }
  }
}

}  // namespace

void write_dataset(const std::filesystem::path& path, const Dataset& data) {
  io::ByteWriter w;
  w.put_bytes(std::span(reinterpret_cast<const std::uint8_t*>(kDatasetMagic), 8));
  w.put_u32(std::uint32_t(data.antennas));
  w.put_u32(std::uint32_t(data.subcarriers));
  w.put_u32(std::uint32_t(data.delay_rows));
  w.put_u64(std::uint64_t(data.size()));
  w.put_u32((data.has_uplink() ? kHasUplink : 0u) | (data.magnitude_only ? kMagnitudeOnly : 0u));
  for (Index i = 0; i < data.size(); ++i) {
    const auto& dl = data.downlink[std::size_t(i)];
    if (dl.rows() != data.delay_rows || dl.cols() != data.antennas) {
      throw DimensionError("write_dataset: sample " + std::to_string(i) + " is not Qf x Nb");
    }
    put_plane(w, dl, false);
    put_plane(w, dl, true);
    if (data.has_uplink()) {
      put_plane(w, data.uplink[std::size_t(i)], false);
      put_plane(w, data.uplink[std::size_t(i)], true);
    }
  }
  io::write_file(path, w.bytes());
}

Dataset read_dataset(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  io::ByteReader r(bytes);
  if (r.string(8, "magic") != std::string(kDatasetMagic, 8)) throw DataError(path.string() + ": bad dataset magic");
  Dataset out;
  out.antennas = r.u32("Nb");
  out.subcarriers = r.u32("Nf");
  out.delay_rows = r.u32("Qf");
  const std::uint64_t count = r.u64("sample count");
  const std::uint32_t flags = r.u32("flags");
  out.magnitude_only = (flags & kMagnitudeOnly) != 0;
  const bool uplink = (flags & kHasUplink) != 0;
  const std::uint64_t plane = std::uint64_t(out.antennas * out.delay_rows) * 4u;
  if (r.remaining() != count * plane * (uplink ? 4u : 2u)) {
    throw DataError(path.string() + ": payload size does not match header (truncated or corrupt)");
  }
  for (std::uint64_t i = 0; i < count; ++i) {
    ComplexMatrix dl(out.delay_rows, out.antennas);
    get_plane(r, dl, false, "downlink real plane");
    get_plane(r, dl, true, "downlink imag plane");
    out.downlink.push_back(std::move(dl));
    if (uplink) {
      ComplexMatrix ul(out.delay_rows, out.antennas);
      get_plane(r, ul, false, "uplink real plane");
      get_plane(r, ul, true, "uplink imag plane");
      out.uplink.push_back(std::move(ul));
    }
  }
  return out;
}

}  // namespace csiq::channel
