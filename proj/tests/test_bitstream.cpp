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

#include "doctest.h"

#include "csiq/binary_io.hpp"
#include "csiq/bitstream.hpp"

#include <cmath>
#include <filesystem>
#include <random>

using namespace csiq;
using namespace csiq::bits;

namespace {

std::string bit_string(const BitBuffer& b) {
  std::string s;
  for (std::size_t i = 0; i < b.bit_length(); ++i) s += b.bit(i) ? '1' : '0';
  return s;
}

// -log2 p summed under an add-one adaptive model, replayed independently.
double adaptive_cross_entropy(const std::vector<int>& s, int alphabet) {
  std::vector<double> f(std::size_t(alphabet), 1.0);
  double total = alphabet, bits = 0.0;
  for (int x : s) {
    bits -= std::log2(f[std::size_t(x)] / total);
    f[std::size_t(x)] += 1.0;
    total += 1.0;
  }
  return bits;
}

}  // namespace

TEST_CASE("pack_fixed: two's complement, MSB first") {
  quant::IndexVector k{Eigen::Vector4i(0, 1, -1, 2), 3};
  const BitBuffer b = pack_fixed(k);
  CHECK(b.bit_length() == 12);
  CHECK(bit_string(b) == "000001111010");
  CHECK(b.bytes().size() == 2);
  CHECK(b.bytes()[1] == 0xA0);  // 1010 then zero padding
  CHECK(unpack_fixed(b, 4, 3).k == k.k);
}

TEST_CASE("pack_fixed: out-of-range index is a contract error") {
  CHECK_THROWS_AS(pack_fixed({Eigen::Vector2i(0, 4), 3}), ContractError);
  CHECK_THROWS_AS(pack_fixed({Eigen::Vector2i(-5, 0), 3}), ContractError);
}

TEST_CASE("pack_fixed: random round trips, length M*l") {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 5000; ++t) {
    const int bits = 1 + t % 12;
    const Index m = 1 + Index(rng() % 64);
    std::uniform_int_distribution<int> d(quant::signed_min(bits), quant::signed_max(bits));
    quant::IndexVector k{Eigen::VectorXi(m), bits};
    for (auto& v : k.k) v = d(rng);
    const BitBuffer b = pack_fixed(k);
    REQUIRE(b.bit_length() == std::size_t(m * bits));
    REQUIRE(unpack_fixed(b, m, bits).k == k.k);
  }
}

TEST_CASE("bit buffer: padding zero, reader reports truncation position") {
  BitBuffer b;
  b.push_bits(0b101, 3);
  CHECK(b.bytes().size() == 1);
  CHECK(b.bytes()[0] == 0xA0);
  BitReader r(b);
  CHECK(r.read_bits(3) == 0b101);
  try {
    r.read_bit();
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("bit 3") != std::string::npos);
  }
  CHECK_THROWS_AS(BitBuffer(std::vector<std::uint8_t>{0}, 9), DataError);
}

TEST_CASE("symbol model: invariants under counting and rescale") {
  SymbolModel m = SymbolModel::adaptive(5, 512);
  std::mt19937_64 rng(2);
  for (int i = 0; i < 5000; ++i) {
    m.update(int(rng() % 3));
    REQUIRE(m.total() <= kMaxTotal);
    for (int s = 0; s < 5; ++s) {
      REQUIRE(m.freq(s) >= 1);
      REQUIRE(m.cum_high(s) > m.cum_low(s));
    }
  }
  const std::vector<std::uint64_t> counts{0, 1000000, 3, 0};
  const SymbolModel t = SymbolModel::from_counts(counts);
  CHECK(t.total() <= kMaxTotal);
  CHECK(t.freq(0) >= 1);
  CHECK(t.freq(3) >= 1);
  CHECK(t.freq(1) > t.freq(2));
  SymbolModel copy = t;
  copy.update(1);
  CHECK(copy == t);  // static tables do not adapt
  for (std::uint32_t target = 0; target < t.total(); target += 97) {
    const int s = t.find(target);
    CHECK(t.cum_low(s) <= target);
    CHECK(target < t.cum_high(s));
  }
}

TEST_CASE("arithmetic coder: uniform 4-symbol source of 1000 symbols fits in 2032 bits") {
  std::mt19937_64 rng(3);
  std::vector<int> s(1000);
  for (auto& x : s) x = int(rng() % 4);
  const SymbolModel flat = SymbolModel::from_counts(std::vector<std::uint64_t>{1, 1, 1, 1});
  const BitBuffer b = arith_encode(s, flat);
  CHECK(b.bit_length() <= 2032);
  CHECK(arith_decode(b, flat, s.size()) == s);
  const BitBuffer a = arith_encode(s, SymbolModel::adaptive(4));
  CHECK(a.bit_length() <= 2032 + 32);
}

TEST_CASE("arithmetic coder: constant stream compresses below 100 bits") {
  const std::vector<int> s(1000, 2);
  const BitBuffer b = arith_encode(s, SymbolModel::adaptive(8));
  CHECK(b.bit_length() < 100);
  CHECK(arith_decode(b, SymbolModel::adaptive(8), s.size()) == s);
}

TEST_CASE("arithmetic coder: lossless and within 32 bits of the model cost") {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 3000; ++t) {
    const int alphabet = 2 + int(rng() % 127);
    const std::size_t n = 1 + rng() % 300;
    // Skewed source: geometric-ish around a random centre.
    std::geometric_distribution<int> geo(0.3 + 0.6 * double(rng() % 100) / 100.0);
    std::vector<int> s(n);
    for (auto& x : s) x = std::min(alphabet - 1, geo(rng));
    const BitBuffer b = arith_encode(s, SymbolModel::adaptive(alphabet));
    REQUIRE(arith_decode(b, SymbolModel::adaptive(alphabet), n) == s);
    const double cost = adaptive_cross_entropy(s, alphabet);
    CHECK(std::abs(cost - model_cost_bits(s, SymbolModel::adaptive(alphabet))) < 1e-6 * (1.0 + cost));
    REQUIRE(double(b.bit_length()) <= cost + 32.0);
  }
}

TEST_CASE("arithmetic coder: encoder and decoder models stay in lock step") {
  std::mt19937_64 rng(5);
  std::vector<int> s(400);
  for (auto& x : s) x = int(rng() % 6);
  BitBuffer buf;
  SymbolModel enc_model = SymbolModel::adaptive(6, 32);
  std::vector<std::vector<std::uint32_t>> enc_tables;
  {
    ArithmeticEncoder enc(buf);
    for (int x : s) {
      enc.encode(x, enc_model);
      enc_tables.push_back(enc_model.frequencies());
    }
    enc.finish();
  }
  SymbolModel dec_model = SymbolModel::adaptive(6, 32);
  ArithmeticDecoder dec(buf);
  for (std::size_t i = 0; i < s.size(); ++i) {
    REQUIRE(dec.decode(dec_model) == s[i]);
    REQUIRE(dec_model.frequencies() == enc_tables[i]);
  }
  CHECK(dec.finish() == buf.bit_length());
}

TEST_CASE("arithmetic coder: truncated stream is a data error") {
  std::vector<int> s(200);
  std::mt19937_64 rng(6);
  for (auto& x : s) x = int(rng() % 16);
  const BitBuffer b = arith_encode(s, SymbolModel::adaptive(16));
  BitBuffer cut;
  for (std::size_t i = 0; i + 10 < b.bit_length(); ++i) cut.push_bit(b.bit(i));
  CHECK_THROWS_AS(arith_decode(cut, SymbolModel::adaptive(16), s.size()), DataError);
}

TEST_CASE("arithmetic coder: streams concatenate") {
  std::mt19937_64 rng(7);
  std::vector<std::vector<int>> samples(20);
  for (auto& v : samples) {
    v.resize(1 + rng() % 50);
    for (auto& x : v) x = int(rng() % 5);
  }
  const SymbolModel model = SymbolModel::adaptive(5);
  const auto parts = encode_batch(samples, model);
  BitBuffer joined;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    CHECK(parts[i] == arith_encode(samples[i], model));
    joined.append(parts[i]);
  }
  std::size_t pos = 0;
  for (const auto& v : samples) CHECK(arith_decode_at(joined, model, v.size(), pos) == v);
  CHECK(pos == joined.bit_length());
}

TEST_CASE("index coding: every mode round trips on 10,000 random vectors") {
  std::mt19937_64 rng(8);
  int cases = 0;
  for (int t = 0; t < 10000; ++t) {
    const int bits = 1 + t % 8;
    const SymbolMap map = t % 3 == 0 ? SymbolMap::signed_bits(bits) : SymbolMap{-(1 << bits) / 2, (1 << bits) / 2};
    const Index m = 1 + Index(rng() % 40);
    std::uniform_int_distribution<int> d(map.index_min, map.index_max);
    Eigen::VectorXi k(m);
    for (auto& v : k) v = d(rng);
    std::vector<std::uint64_t> counts(std::size_t(map.alphabet()), 1);
    counts[std::size_t(map.to_symbol(0))] += 50;
    const SymbolModel table = SymbolModel::from_counts(counts);
    for (CoderMode mode : {CoderMode::fixed, CoderMode::adaptive, CoderMode::static_table}) {
      const BitBuffer b = encode_indices(k, map, mode, &table);
      REQUIRE(decode_indices(b, m, map, mode, &table) == k);
      ++cases;
    }
    REQUIRE(encode_indices(k, map, CoderMode::fixed).bit_length() ==
            std::size_t(m * width_for_alphabet(map.alphabet())));
  }
  CHECK(cases == 30000);
}

TEST_CASE("measure_rate: fixed width at l = 5 is exactly 5 bits/value") {
  std::mt19937_64 rng(9);
  Eigen::MatrixXi idx(30, 32);
  std::uniform_int_distribution<int> d(-16, 15);
  for (Index i = 0; i < idx.size(); ++i) idx(i) = d(rng);
  CHECK(measure_rate(idx, SymbolMap::signed_bits(5), CoderMode::fixed) == 5.0);
  const auto counts = symbol_counts(idx, SymbolMap::signed_bits(5));
  std::uint64_t total = 0;
  for (auto c : counts) total += c;
  CHECK(total == std::uint64_t(idx.size()));
}

TEST_CASE("empirical entropy") {
  CHECK(empirical_entropy(std::vector<int>{0, 1, 2, 3}) == doctest::Approx(2.0));
  CHECK(empirical_entropy(std::vector<int>{5, 5, 5}) == 0.0);
}

TEST_CASE("phase index streams: fixed widths sum to total Y, both modes round trip") {
  std::mt19937_64 rng(10);
  Eigen::MatrixXi y(6, 5), idx(6, 5);
  for (Index i = 0; i < y.size(); ++i) {
    y(i) = 1 + int(rng() % 7);
    idx(i) = int(rng() % (1u << y(i)));
  }
  for (CoderMode mode : {CoderMode::fixed, CoderMode::adaptive}) {
    const BitBuffer b = encode_phase_indices(idx, y, mode);
    if (mode == CoderMode::fixed) CHECK(b.bit_length() == std::size_t(y.sum()));
    std::size_t pos = 0;
    CHECK(decode_phase_indices(b, y, mode, pos) == idx);
    CHECK(pos == b.bit_length());
  }
}

TEST_CASE("feedback records: file round trip and corruption") {
  const auto dir = std::filesystem::temp_directory_path() / "csiq_test_bits";
  std::filesystem::create_directories(dir);
  std::vector<FeedbackRecord> recs(3);
  const SymbolModel table = SymbolModel::from_counts(std::vector<std::uint64_t>(8, 1));
  for (std::size_t i = 0; i < recs.size(); ++i) {
    recs[i].variant = std::uint8_t(i % 2);
    recs[i].m = 4;
    recs[i].bits = 3;
    recs[i].mode = CoderMode(i);
    // only the static mode reads the table
    recs[i].payload = encode_indices(Eigen::Vector4i(0, 1, -1, 2), SymbolMap::signed_bits(3), recs[i].mode, &table);
  }
  write_feedback_file(dir / "fb.bin", recs);
  const auto back = read_feedback_file(dir / "fb.bin");
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back[i].variant == recs[i].variant);
    CHECK(back[i].m == 4);
    CHECK(back[i].bits == 3);
    CHECK(back[i].mode == recs[i].mode);
    CHECK(back[i].payload == recs[i].payload);
  }
  auto bytes = io::read_file(dir / "fb.bin");
  CHECK(std::string(bytes.begin(), bytes.begin() + 8) == std::string("CSIQFB1\0", 8));
  CHECK(bit_string(back[0].payload) == "000001111010");

  auto cut = bytes;
  cut.resize(cut.size() - 1);
  io::write_file(dir / "cut.bin", cut);
  CHECK_THROWS_AS(read_feedback_file(dir / "cut.bin"), DataError);
  bytes[0] = 'x';
  io::write_file(dir / "bad.bin", bytes);
  CHECK_THROWS_AS(read_feedback_file(dir / "bad.bin"), DataError);
  std::filesystem::remove_all(dir);
}
