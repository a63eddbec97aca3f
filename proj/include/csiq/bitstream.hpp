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

// Bit-exact serialization of quantization indices.
//
// Fixed-width packing stores each index as l-bit two's complement, MSB
// first. The arithmetic coder is the classic bit-level construction with
// 32-bit low/high registers and deferred ("pending") carry bits over an
// order-0 frequency model whose total never exceeds 2^16.
//
// An arithmetic stream of n symbols occupies exactly shifts + 2 bits, where
// shifts is the number of renormalisation steps; the decoder replays the same
// steps, so it knows where a stream ends and streams may be concatenated.

#ifndef CSIQ_BITSTREAM_HPP
#define CSIQ_BITSTREAM_HPP

#include "csiq/errors.hpp"
#include "csiq/quantizers.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace csiq::bits {

/// Bits packed MSB-first; unused trailing bits of the last byte are zero.
class BitBuffer {
 public:
  BitBuffer() = default;
  BitBuffer(std::vector<std::uint8_t> bytes, std::size_t bit_length);

  void push_bit(bool bit);
  void push_bits(std::uint64_t value, int count);
  void append(const BitBuffer& other);
  bool bit(std::size_t i) const { return (bytes_[i >> 3] >> (7 - (i & 7))) & 1u; }

  std::size_t bit_length() const { return bit_length_; }
  const std::vector<std::uint8_t>& bytes() const { return bytes_; }

  friend bool operator==(const BitBuffer&, const BitBuffer&) = default;

 private:
  std::vector<std::uint8_t> bytes_;
  std::size_t bit_length_ = 0;
};

/// Sequential reader; running past the end throws DataError with the bit position.
class BitReader {
 public:
  explicit BitReader(const BitBuffer& buffer, std::size_t start = 0) : buffer_(&buffer), pos_(start) {}

  bool read_bit();
  std::uint64_t read_bits(int count);
  /// Reads a bit, or 0 past the end (arithmetic decoder lookahead).
  bool peek_or_zero();

  std::size_t position() const { return pos_; }
  void seek(std::size_t pos) { pos_ = pos; }
  std::size_t remaining() const { return pos_ >= buffer_->bit_length() ? 0 : buffer_->bit_length() - pos_; }

 private:
  const BitBuffer* buffer_;
  std::size_t pos_;
};

// ------------------------------------------------------------ fixed width

BitBuffer pack_fixed(const quant::IndexVector& k);
quant::IndexVector unpack_fixed(const BitBuffer& buf, Index m, int bits, std::size_t start = 0);

/// Unsigned values of per-entry widths (phase indices).
void pack_unsigned(BitBuffer& out, std::span<const int> values, std::span<const int> widths);
std::vector<int> unpack_unsigned(BitReader& in, std::span<const int> widths);

/// Bits needed for unsigned symbols 0 .. alphabet - 1.
int width_for_alphabet(int alphabet);

// ----------------------------------------------------------- symbol model

inline constexpr std::uint32_t kMaxTotal = 1u << 16;

class SymbolModel {
 public:
  /// Adaptive: every symbol starts at frequency 1, each coded symbol adds `increment`.
  static SymbolModel adaptive(int alphabet, std::uint32_t increment = 1);
  /// Static table from observed counts, scaled to total <= 2^16 with every frequency >= 1.
  static SymbolModel from_counts(std::span<const std::uint64_t> counts);

  int alphabet() const { return int(freq_.size()); }
  bool is_adaptive() const { return adaptive_; }
  std::uint32_t total() const { return cum_.back(); }
  std::uint32_t freq(int s) const { return freq_.at(std::size_t(s)); }
  std::uint32_t cum_low(int s) const { return cum_[std::size_t(s)]; }
  std::uint32_t cum_high(int s) const { return cum_[std::size_t(s) + 1]; }
  /// Symbol whose cumulative interval contains `target`.
  int find(std::uint32_t target) const;

  double probability(int s) const { return double(freq(s)) / double(total()); }
  /// Adaptive models count the symbol; static models are unchanged.
  void update(int s);

  const std::vector<std::uint32_t>& frequencies() const { return freq_; }
  friend bool operator==(const SymbolModel&, const SymbolModel&) = default;

 private:
  void rebuild();
  std::vector<std::uint32_t> freq_;
  std::vector<std::uint32_t> cum_;
  bool adaptive_ = false;
  std::uint32_t increment_ = 1;
};

class ArithmeticEncoder {
 public:
  explicit ArithmeticEncoder(BitBuffer& out) : out_(&out) {}
  void encode(int symbol, SymbolModel& model);
  /// Flushes two disambiguating bits plus pending bits.
  void finish();

 private:
  void emit(bool bit);
  BitBuffer* out_;
  std::uint64_t low_ = 0;
  std::uint64_t high_ = 0xFFFFFFFFull;
  std::uint64_t pending_ = 0;
};

class ArithmeticDecoder {
 public:
  ArithmeticDecoder(const BitBuffer& in, std::size_t start = 0);
  int decode(SymbolModel& model);
  /// Checks the stream was long enough and returns the bit offset just past it.
  std::size_t finish();

 private:
  const BitBuffer* in_;
  std::size_t start_;
  BitReader reader_;
  std::uint64_t low_ = 0;
  std::uint64_t high_ = 0xFFFFFFFFull;
  std::uint64_t value_ = 0;
  std::size_t shifts_ = 0;
};

BitBuffer arith_encode(std::span<const int> symbols, SymbolModel model);
std::vector<int> arith_decode(const BitBuffer& buf, SymbolModel model, std::size_t n);
/// Decodes starting at `start` and advances it past the stream.
std::vector<int> arith_decode_at(const BitBuffer& buf, SymbolModel model, std::size_t n, std::size_t& start);

/// Sum of -log2 p(symbol) under the model as it evolves while coding.
double model_cost_bits(std::span<const int> symbols, SymbolModel model);
/// Empirical order-0 entropy in bits per symbol.
double empirical_entropy(std::span<const int> symbols);

/// Every sample coded with its own copy of `model`.
std::vector<BitBuffer> encode_batch(std::span<const std::vector<int>> samples, const SymbolModel& model);

// --------------------------------------------------- index <-> symbol maps

/// k -> k + offset where offset = -index_min, so the alphabet starts at 0.
struct SymbolMap {
  int index_min = 0;
  int index_max = 0;

  static SymbolMap for_quantizer(const quant::CodewordQuantizer& q);
  /// Index range of a learned quantizer truncated to `bits`.
  static SymbolMap signed_bits(int bits);
  int alphabet() const { return index_max - index_min + 1; }
  int to_symbol(int k) const;
  int to_index(int s) const { return s + index_min; }
};

enum class CoderMode : std::uint8_t { fixed = 0, adaptive = 1, static_table = 2 };

std::string to_string(CoderMode m);
CoderMode coder_mode_from_string(const std::string& s);

/// Encodes one index vector under `mode`. Fixed mode uses width_for_alphabet.
BitBuffer encode_indices(const Eigen::VectorXi& k, const SymbolMap& map, CoderMode mode,
                         const SymbolModel* table = nullptr);
Eigen::VectorXi decode_indices(const BitBuffer& buf, Index m, const SymbolMap& map, CoderMode mode,
                               const SymbolModel* table = nullptr);

/// Total coded bits divided by total values; each row is one sample coded
/// separately unless `one_stream`, which codes all rows as a single stream.
double measure_rate(const Eigen::MatrixXi& indices, const SymbolMap& map, CoderMode mode,
                    const SymbolModel* table = nullptr, bool one_stream = false);

/// Frequency counts of mapped symbols, one entry per alphabet symbol.
std::vector<std::uint64_t> symbol_counts(const Eigen::MatrixXi& indices, const SymbolMap& map);

/// Phase cell indices under a bit map Y (entry-wise alphabets 2^Y). Fixed mode
/// writes Y_i bits per entry; adaptive mode keeps one model per Y value so the
/// decoder, which re-derives Y, selects the same models.
BitBuffer encode_phase_indices(const Eigen::MatrixXi& index, const Eigen::MatrixXi& y, CoderMode mode);
Eigen::MatrixXi decode_phase_indices(const BitBuffer& buf, const Eigen::MatrixXi& y, CoderMode mode,
                                     std::size_t& start);

// ------------------------------------------------------ feedback records

struct FeedbackRecord {
  std::uint8_t variant = 0;  // 0 CsiQ, 1 DualQ
  std::uint32_t m = 0;
  std::uint8_t bits = 0;
  CoderMode mode = CoderMode::fixed;
  BitBuffer payload;
};

void write_record(std::vector<std::uint8_t>& out, const FeedbackRecord& r);
/// Reads one record at `offset` and advances it.
FeedbackRecord read_record(std::span<const std::uint8_t> bytes, std::size_t& offset);

void write_feedback_file(const std::filesystem::path& path, std::span<const FeedbackRecord> records);
std::vector<FeedbackRecord> read_feedback_file(const std::filesystem::path& path);

}  // namespace csiq::bits

#endif  // CSIQ_BITSTREAM_HPP
