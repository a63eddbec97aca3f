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

#include "csiq/bitstream.hpp"

#include "csiq/binary_io.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace csiq::bits {

BitBuffer::BitBuffer(std::vector<std::uint8_t> bytes, std::size_t bit_length)
    : bytes_(std::move(bytes)), bit_length_(bit_length) {
  if (bit_length_ > 8 * bytes_.size()) throw DataError("bit buffer: length exceeds storage");
  bytes_.resize((bit_length_ + 7) / 8);
  if (bit_length_ % 8) bytes_.back() &= std::uint8_t(0xFF << (8 - bit_length_ % 8));
}

void BitBuffer::push_bit(bool bit) {
  if (bit_length_ % 8 == 0) bytes_.push_back(0);
  if (bit) bytes_.back() |= std::uint8_t(1u << (7 - bit_length_ % 8));
  ++bit_length_;
}

void BitBuffer::push_bits(std::uint64_t value, int count) {
  for (int i = count - 1; i >= 0; --i) push_bit((value >> i) & 1u);
}

void BitBuffer::append(const BitBuffer& other) {
  for (std::size_t i = 0; i < other.bit_length(); ++i) push_bit(other.bit(i));
}

bool BitReader::read_bit() {
  if (pos_ >= buffer_->bit_length()) {
    throw DataError("bit stream truncated at bit " + std::to_string(pos_) + " of " +
                    std::to_string(buffer_->bit_length()));
  }
  return buffer_->bit(pos_++);
}

std::uint64_t BitReader::read_bits(int count) {
  std::uint64_t v = 0;
  for (int i = 0; i < count; ++i) v = (v << 1) | std::uint64_t(read_bit());
  return v;
}

bool BitReader::peek_or_zero() {
  const bool b = pos_ < buffer_->bit_length() && buffer_->bit(pos_);
  ++pos_;
  return b;
}

// -------------------------------------------------------------- fixed width

BitBuffer pack_fixed(const quant::IndexVector& k) {
  quant::check_bits(k.bits, "pack_fixed");
  if (!k.in_range()) throw ContractError("pack_fixed: index outside the signed " + std::to_string(k.bits) + "-bit range");
  BitBuffer out;
  const std::uint64_t mask = (std::uint64_t{1} << k.bits) - 1;
  for (Index i = 0; i < k.size(); ++i) out.push_bits(std::uint64_t(std::int64_t(k.k[i])) & mask, k.bits);
  return out;
}

quant::IndexVector unpack_fixed(const BitBuffer& buf, Index m, int bits, std::size_t start) {
  quant::check_bits(bits, "unpack_fixed");
  BitReader in(buf, start);
  quant::IndexVector out{Eigen::VectorXi(m), bits};
  for (Index i = 0; i < m; ++i) {
    const std::uint64_t raw = in.read_bits(bits);
    const bool negative = (raw >> (bits - 1)) & 1u;
    out.k[i] = negative ? int(std::int64_t(raw) - (std::int64_t{1} << bits)) : int(raw);
  }
  return out;
}

int width_for_alphabet(int alphabet) {
  if (alphabet < 1) throw ContractError("alphabet must be non-empty");
  int w = 0;
  while ((1L << w) < alphabet) ++w;
  return std::max(w, 1);
}

void pack_unsigned(BitBuffer& out, std::span<const int> values, std::span<const int> widths) {
  if (values.size() != widths.size()) throw DimensionError("pack_unsigned: values and widths differ in length");
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i] < 0 || (widths[i] < 31 && values[i] >= (1 << widths[i]))) {
      throw ContractError("pack_unsigned: value does not fit its width");
    }
    out.push_bits(std::uint64_t(values[i]), widths[i]);
  }
}

std::vector<int> unpack_unsigned(BitReader& in, std::span<const int> widths) {
  std::vector<int> out(widths.size());
  for (std::size_t i = 0; i < widths.size(); ++i) out[i] = int(in.read_bits(widths[i]));
  return out;
}

// ------------------------------------------------------------ symbol model

SymbolModel SymbolModel::adaptive(int alphabet, std::uint32_t increment) {
  if (alphabet < 1 || std::uint32_t(alphabet) > kMaxTotal / 2) {
    throw ContractError("symbol model: alphabet size " + std::to_string(alphabet) + " out of range");
  }
  if (increment < 1) throw ContractError("symbol model: increment must be >= 1");
  SymbolModel m;
  m.freq_.assign(std::size_t(alphabet), 1);
  m.adaptive_ = true;
  m.increment_ = increment;
  m.rebuild();
  return m;
}

SymbolModel SymbolModel::from_counts(std::span<const std::uint64_t> counts) {
  if (counts.empty() || counts.size() > kMaxTotal / 2) throw ContractError("symbol model: bad alphabet size");
  const std::uint64_t sum = std::accumulate(counts.begin(), counts.end(), std::uint64_t{0});
  const std::uint64_t budget = kMaxTotal - counts.size();
  SymbolModel m;
  m.freq_.resize(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i) {
    m.freq_[i] = sum == 0 ? 1 : std::uint32_t(1 + counts[i] * budget / sum);
  }
  m.rebuild();
  return m;
}

void SymbolModel::rebuild() {
  cum_.resize(freq_.size() + 1);
  cum_[0] = 0;
  for (std::size_t i = 0; i < freq_.size(); ++i) cum_[i + 1] = cum_[i] + freq_[i];
}

int SymbolModel::find(std::uint32_t target) const {
  auto it = std::upper_bound(cum_.begin() + 1, cum_.end(), target);
  return int(it - cum_.begin()) - 1;
}

void SymbolModel::update(int s) {
  if (!adaptive_) return;
  freq_.at(std::size_t(s)) += increment_;
  std::uint64_t total = std::uint64_t(cum_.back()) + increment_;
  if (total > kMaxTotal) {
    for (auto& f : freq_) f = std::max<std::uint32_t>(1, (f + 1) / 2);
  }
  rebuild();
}

// ------------------------------------------------------- arithmetic coder

namespace {

constexpr std::uint64_t kTop = 0xFFFFFFFFull;
constexpr std::uint64_t kHalf = 0x80000000ull;
constexpr std::uint64_t kQuarter = 0x40000000ull;
constexpr std::uint64_t kThreeQuarters = 0xC0000000ull;

void check_symbol(int s, const SymbolModel& model) {
  if (s < 0 || s >= model.alphabet()) {
    throw ContractError("arithmetic coder: symbol " + std::to_string(s) + " outside alphabet of " +
                        std::to_string(model.alphabet()));
  }
}

}  // namespace

void ArithmeticEncoder::emit(bool bit) {
  out_->push_bit(bit);
  for (; pending_ > 0; --pending_) out_->push_bit(!bit);
}

void ArithmeticEncoder::encode(int symbol, SymbolModel& model) {
  check_symbol(symbol, model);
  const std::uint64_t range = high_ - low_ + 1;
  const std::uint64_t total = model.total();
  high_ = low_ + range * model.cum_high(symbol) / total - 1;
  low_ = low_ + range * model.cum_low(symbol) / total;
  for (;;) {
    if (high_ < kHalf) {
      emit(false);
    } else if (low_ >= kHalf) {
      emit(true);
      low_ -= kHalf;
      high_ -= kHalf;
    } else if (low_ >= kQuarter && high_ < kThreeQuarters) {
      ++pending_;
      low_ -= kQuarter;
      high_ -= kQuarter;
    } else {
      break;
    }
    low_ = 2 * low_;
    high_ = 2 * high_ + 1;
  }
  model.update(symbol);
}

void ArithmeticEncoder::finish() {
  ++pending_;
  emit(low_ >= kQuarter);
}

ArithmeticDecoder::ArithmeticDecoder(const BitBuffer& in, std::size_t start)
    : in_(&in), start_(start), reader_(in, start) {
  for (int i = 0; i < 32; ++i) value_ = (value_ << 1) | std::uint64_t(reader_.peek_or_zero());
}

int ArithmeticDecoder::decode(SymbolModel& model) {
  const std::uint64_t range = high_ - low_ + 1;
  const std::uint64_t total = model.total();
  const std::uint64_t target = ((value_ - low_ + 1) * total - 1) / range;
  const int s = model.find(std::uint32_t(target));
  high_ = low_ + range * model.cum_high(s) / total - 1;
  low_ = low_ + range * model.cum_low(s) / total;
  for (;;) {
    if (high_ < kHalf) {
    } else if (low_ >= kHalf) {
      low_ -= kHalf;
      high_ -= kHalf;
      value_ -= kHalf;
    } else if (low_ >= kQuarter && high_ < kThreeQuarters) {
      low_ -= kQuarter;
      high_ -= kQuarter;
      value_ -= kQuarter;
    } else {
      break;
    }
    low_ = 2 * low_;
    high_ = 2 * high_ + 1;
    value_ = ((value_ << 1) | std::uint64_t(reader_.peek_or_zero())) & kTop;
    ++shifts_;
  }
  model.update(s);
  return s;
}

std::size_t ArithmeticDecoder::finish() {
  const std::size_t needed = shifts_ + 2;
  const std::size_t available = in_->bit_length() > start_ ? in_->bit_length() - start_ : 0;
  if (needed > available) {
    throw DataError("arithmetic stream truncated: stream starting at bit " + std::to_string(start_) + " needs " +
                    std::to_string(needed) + " bits, buffer holds " + std::to_string(available));
  }
  return start_ + needed;
}

BitBuffer arith_encode(std::span<const int> symbols, SymbolModel model) {
  BitBuffer out;
  ArithmeticEncoder enc(out);
  for (int s : symbols) enc.encode(s, model);
  enc.finish();
  return out;
}

std::vector<int> arith_decode_at(const BitBuffer& buf, SymbolModel model, std::size_t n, std::size_t& start) {
  ArithmeticDecoder dec(buf, start);
  std::vector<int> out(n);
  for (auto& s : out) s = dec.decode(model);
  start = dec.finish();
  return out;
}

std::vector<int> arith_decode(const BitBuffer& buf, SymbolModel model, std::size_t n) {
  std::size_t start = 0;
  return arith_decode_at(buf, std::move(model), n, start);
}

double model_cost_bits(std::span<const int> symbols, SymbolModel model) {
  double bits = 0.0;
  for (int s : symbols) {
    check_symbol(s, model);
    bits -= std::log2(model.probability(s));
    model.update(s);
  }
  return bits;
}

double empirical_entropy(std::span<const int> symbols) {
  if (symbols.empty()) return 0.0;
  std::map<int, std::size_t> counts;
  for (int s : symbols) ++counts[s];
  double h = 0.0;
  for (const auto& [s, c] : counts) {
    const double p = double(c) / double(symbols.size());
    h -= p * std::log2(p);
  }
  return h;
}

std::vector<BitBuffer> encode_batch(std::span<const std::vector<int>> samples, const SymbolModel& model) {
  std::vector<BitBuffer> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(arith_encode(s, model));
  return out;
}

// ------------------------------------------------------------- symbol maps

SymbolMap SymbolMap::for_quantizer(const quant::CodewordQuantizer& q) {
  return SymbolMap{q.index_min(), q.index_max()};
}

SymbolMap SymbolMap::signed_bits(int b) {
  quant::check_bits(b, "symbol map");
  return SymbolMap{quant::signed_min(b), quant::signed_max(b)};
}

int SymbolMap::to_symbol(int k) const {
  if (k < index_min || k > index_max) {
    throw ContractError("index " + std::to_string(k) + " outside [" + std::to_string(index_min) + ", " +
                        std::to_string(index_max) + "]");
  }
  return k - index_min;
}

std::string to_string(CoderMode m) {
  switch (m) {
    case CoderMode::fixed: return "fixed";
    case CoderMode::adaptive: return "adaptive";
    case CoderMode::static_table: return "static";
  }
  return "?";
}

CoderMode coder_mode_from_string(const std::string& s) {
  if (s == "fixed") return CoderMode::fixed;
  if (s == "adaptive") return CoderMode::adaptive;
  if (s == "static") return CoderMode::static_table;
  throw ContractError("unknown coder mode '" + s + "'");
}

namespace {

bool is_signed_range(const SymbolMap& map) {
  const int b = width_for_alphabet(map.alphabet());
  return map.alphabet() == (1 << b) && map.index_min == -(1 << (b - 1));
}

SymbolModel model_for(const SymbolMap& map, CoderMode mode, const SymbolModel* table) {
  if (mode == CoderMode::static_table) {
    if (!table) throw ContractError("static coder mode needs a frequency table");
    if (table->alphabet() != map.alphabet()) {
      throw ContractError("static frequency table has " + std::to_string(table->alphabet()) +
                          " symbols, quantizer needs " + std::to_string(map.alphabet()));
    }
    return *table;
  }
  return SymbolModel::adaptive(map.alphabet());
}

std::vector<int> to_symbols(const Eigen::VectorXi& k, const SymbolMap& map) {
  std::vector<int> s(std::size_t(k.size()));
  for (Index i = 0; i < k.size(); ++i) s[std::size_t(i)] = map.to_symbol(k[i]);
  return s;
}

}  // namespace

BitBuffer encode_indices(const Eigen::VectorXi& k, const SymbolMap& map, CoderMode mode, const SymbolModel* table) {
  if (mode == CoderMode::fixed) {
    const int width = width_for_alphabet(map.alphabet());
    if (is_signed_range(map)) return pack_fixed(quant::IndexVector{k, width});
    BitBuffer out;
    const std::vector<int> s = to_symbols(k, map);
    const std::vector<int> widths(s.size(), width);
    pack_unsigned(out, s, widths);
    return out;
  }
  return arith_encode(to_symbols(k, map), model_for(map, mode, table));
}

Eigen::VectorXi decode_indices(const BitBuffer& buf, Index m, const SymbolMap& map, CoderMode mode,
                               const SymbolModel* table) {
  if (mode == CoderMode::fixed) {
    const int width = width_for_alphabet(map.alphabet());
    if (is_signed_range(map)) return unpack_fixed(buf, m, width).k;
    BitReader in(buf);
    const std::vector<int> widths(std::size_t(m), width);
    const std::vector<int> s = unpack_unsigned(in, widths);
    Eigen::VectorXi k(m);
    for (Index i = 0; i < m; ++i) {
      if (s[std::size_t(i)] >= map.alphabet()) throw DataError("fixed-width symbol outside the alphabet");
      k[i] = map.to_index(s[std::size_t(i)]);
    }
    return k;
  }
  const std::vector<int> s = arith_decode(buf, model_for(map, mode, table), std::size_t(m));
  Eigen::VectorXi k(m);
  for (Index i = 0; i < m; ++i) k[i] = map.to_index(s[std::size_t(i)]);
  return k;
}

double measure_rate(const Eigen::MatrixXi& indices, const SymbolMap& map, CoderMode mode, const SymbolModel* table,
                    bool one_stream) {
  if (indices.size() == 0) throw ContractError("measure_rate: no indices");
  std::size_t total = 0;
  if (one_stream && mode != CoderMode::fixed) {
    std::vector<int> all;
    all.reserve(std::size_t(indices.size()));
    for (Index i = 0; i < indices.rows(); ++i)
      for (Index j = 0; j < indices.cols(); ++j) all.push_back(map.to_symbol(indices(i, j)));
    total = arith_encode(all, model_for(map, mode, table)).bit_length();
  } else {
    for (Index i = 0; i < indices.rows(); ++i) {
      total += encode_indices(indices.row(i).transpose(), map, mode, table).bit_length();
    }
  }
  return double(total) / double(indices.size());
}

std::vector<std::uint64_t> symbol_counts(const Eigen::MatrixXi& indices, const SymbolMap& map) {
  std::vector<std::uint64_t> counts(std::size_t(map.alphabet()), 0);
  for (Index i = 0; i < indices.size(); ++i) ++counts[std::size_t(map.to_symbol(indices(i)))];
  return counts;
}

BitBuffer encode_phase_indices(const Eigen::MatrixXi& index, const Eigen::MatrixXi& y, CoderMode mode) {
  if (index.rows() != y.rows() || index.cols() != y.cols()) throw DimensionError("phase indices and bit map differ");
  BitBuffer out;
  if (mode == CoderMode::fixed) {
    std::vector<int> values(index.data(), index.data() + index.size());
    std::vector<int> widths(y.data(), y.data() + y.size());
    pack_unsigned(out, values, widths);
    return out;
  }
  if (mode != CoderMode::adaptive) throw ContractError("phase indices support fixed or adaptive coding");
  std::map<int, SymbolModel> models;
  ArithmeticEncoder enc(out);
  for (Index i = 0; i < index.size(); ++i) {
    auto it = models.try_emplace(y(i), SymbolModel::adaptive(1 << y(i))).first;
    enc.encode(index(i), it->second);
  }
  enc.finish();
  return out;
}

Eigen::MatrixXi decode_phase_indices(const BitBuffer& buf, const Eigen::MatrixXi& y, CoderMode mode,
                                     std::size_t& start) {
  Eigen::MatrixXi out(y.rows(), y.cols());
  if (mode == CoderMode::fixed) {
    BitReader in(buf, start);
    std::vector<int> widths(y.data(), y.data() + y.size());
    const std::vector<int> v = unpack_unsigned(in, widths);
    for (Index i = 0; i < out.size(); ++i) out(i) = v[std::size_t(i)];
    start = in.position();
    return out;
  }
  if (mode != CoderMode::adaptive) throw ContractError("phase indices support fixed or adaptive coding");
  std::map<int, SymbolModel> models;
  ArithmeticDecoder dec(buf, start);
  for (Index i = 0; i < out.size(); ++i) {
    auto it = models.try_emplace(y(i), SymbolModel::adaptive(1 << y(i))).first;
    out(i) = dec.decode(it->second);
  }
  start = dec.finish();
  return out;
}

// -------------------------------------------------------- feedback records

namespace {
constexpr char kRecordMagic[8] = {'C', 'S', 'I', 'Q', 'F', 'B', '1', '\0'};
}

void write_record(std::vector<std::uint8_t>& out, const FeedbackRecord& r) {
  io::ByteWriter w;
  w.put_string(std::string_view(kRecordMagic, 8));
  w.put_u8(r.variant);
  w.put_u32(r.m);
  w.put_u8(r.bits);
  w.put_u8(std::uint8_t(r.mode));
  w.put_u64(r.payload.bit_length());
  w.put_bytes(r.payload.bytes());
  const auto& b = w.bytes();
  out.insert(out.end(), b.begin(), b.end());
}

FeedbackRecord read_record(std::span<const std::uint8_t> bytes, std::size_t& offset) {
  if (offset > bytes.size()) throw DataError("feedback record offset past end of file");
  io::ByteReader r(bytes.subspan(offset));
  if (r.string(8, "magic") != std::string(kRecordMagic, 8)) {
    throw DataError("feedback record at byte " + std::to_string(offset) + ": bad magic");
  }
  FeedbackRecord rec;
  rec.variant = r.u8("variant");
  if (rec.variant > 1) throw DataError("feedback record: unknown variant " + std::to_string(rec.variant));
  rec.m = r.u32("M");
  rec.bits = r.u8("bits");
  const std::uint8_t mode = r.u8("coder mode");
  if (mode > 2) throw DataError("feedback record: unknown coder mode " + std::to_string(mode));
  rec.mode = CoderMode(mode);
  const std::uint64_t bit_length = r.u64("payload bit length");
  if (bit_length > 8 * std::uint64_t(r.remaining())) {
    throw DataError("truncated input while reading 'payload' at byte " + std::to_string(offset + r.position()));
  }
  const auto payload = r.bytes(std::size_t((bit_length + 7) / 8), "payload");
  rec.payload = BitBuffer(std::vector<std::uint8_t>(payload.begin(), payload.end()), std::size_t(bit_length));
  offset += r.position();
  return rec;
}

void write_feedback_file(const std::filesystem::path& path, std::span<const FeedbackRecord> records) {
  std::vector<std::uint8_t> out;
  for (const auto& r : records) write_record(out, r);
  io::write_file(path, out);
}

std::vector<FeedbackRecord> read_feedback_file(const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = io::read_file(path);
  std::vector<FeedbackRecord> out;
  std::size_t offset = 0;
  while (offset < bytes.size()) out.push_back(read_record(bytes, offset));
  return out;
}

}  // namespace csiq::bits
