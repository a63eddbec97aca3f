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
#include "csiq/channel.hpp"

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

using namespace csiq;
using namespace csiq::channel;

namespace {

// Unitary DFT by definition: X[k] = N^-1/2 sum_n x[n] e^{+j 2 pi n k / N} along rows.
ComplexMatrix direct_idft(const ComplexMatrix& h) {
  const Index n = h.rows();
  ComplexMatrix out = ComplexMatrix::Zero(n, h.cols());
  for (Index k = 0; k < n; ++k)
    for (Index t = 0; t < n; ++t)
      out.row(k) += std::polar(1.0, 2.0 * std::numbers::pi * double(t * k) / double(n)) * h.row(t);
  return out / std::sqrt(double(n));
}

ChannelConfig small_config() {
  ChannelConfig cfg;
  cfg.antennas = 8;
  cfg.subcarriers = 64;
  cfg.delay_rows = 16;
  return cfg;
}

}  // namespace

TEST_CASE("delay transform: zero, unitarity and direct DFT oracle") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g;
  ComplexMatrix h(32, 4);
  for (Index i = 0; i < h.size(); ++i) h.data()[i] = {g(rng), g(rng)};
  const CsiMatrix hf{h, Domain::frequency, Link::downlink};
  const CsiMatrix ht = to_delay_domain(hf);
  CHECK(ht.domain == Domain::delay);
  CHECK(std::abs(ht.entries.norm() - h.norm()) < 1e-10);
  CHECK((ht.entries - direct_idft(h)).cwiseAbs().maxCoeff() < 1e-10);

  const CsiMatrix zero{ComplexMatrix::Zero(16, 2), Domain::frequency, Link::uplink};
  CHECK(to_delay_domain(zero).entries.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("delay transform: flat column maps to sqrt(Nf) c at tap 0") {
  const Complex c{0.7, -0.2};
  const CsiMatrix hf{ComplexMatrix::Constant(64, 1, c), Domain::frequency, Link::downlink};
  const CsiMatrix ht = to_delay_domain(hf);
  CHECK(std::abs(ht.entries(0, 0) - 8.0 * c) < 1e-12);
  CHECK(ht.entries.bottomRows(63).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("delay transform: wrong domain is a contract error") {
  const CsiMatrix ht{ComplexMatrix::Zero(4, 1), Domain::delay, Link::downlink};
  CHECK_THROWS_AS(to_delay_domain(ht), ContractError);
}

TEST_CASE("single broadside path at zero delay is frequency flat and rank one") {
  ChannelConfig cfg = small_config();
  const std::vector<Path> paths{{0.0, 0.0, {0.5, 0.5}, {0.5, -0.5}}};
  const ChannelPair pair = synthesize(cfg, paths);
  for (Index r = 1; r < cfg.subcarriers; ++r)
    CHECK((pair.downlink.entries.row(r) - pair.downlink.entries.row(0)).norm() < 1e-12);
  Eigen::JacobiSVD<ComplexMatrix> svd(pair.downlink.entries);
  CHECK(svd.singularValues()(1) < 1e-9 * svd.singularValues()(0));
}

TEST_CASE("truncate: full height is identity, too many rows is a contract error") {
  ComplexMatrix m = ComplexMatrix::Random(8, 3);
  const CsiMatrix ht{m, Domain::delay, Link::downlink};
  CHECK(truncate(ht, 8).entries == m);
  CHECK(truncate(ht, 3).entries == m.topRows(3));
  CHECK_THROWS_AS(truncate(ht, 9), ContractError);
  CHECK_THROWS_AS(truncate(CsiMatrix{m, Domain::frequency, Link::downlink}, 2), ContractError);
}

TEST_CASE("truncate: tap-limited channel loses nothing") {
  ChannelConfig cfg = small_config();
  const std::vector<Path> paths{{0.0, 0.3, {1.0, 0.0}, {1.0, 0.0}}, {5.0, -0.4, {0.0, 0.5}, {0.0, 0.5}}};
  const CsiMatrix ht = to_delay_domain(synthesize(cfg, paths).downlink);
  CHECK(ht.entries.bottomRows(cfg.subcarriers - cfg.delay_rows).cwiseAbs().maxCoeff() < 1e-10);
  CHECK(energy_fraction(ht, cfg.delay_rows) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("generator contract: at least 90% of delay-domain energy in the first Qf rows") {
  for (const ChannelConfig& base : {ChannelConfig::indoor_like(), ChannelConfig::outdoor_like()}) {
    ChannelConfig cfg = base;
    cfg.subcarriers = 256;
    cfg.antennas = 8;
    cfg.delay_rows = 16;
    double worst = 1.0;
    for (std::uint64_t i = 0; i < 300; ++i) {
      Rng rng(derive_seed(cfg.seed, i));
      const auto pair = sample_channel_pair(cfg, rng);
      const CsiMatrix ht = to_delay_domain(pair.downlink);
      CHECK(ht.entries.norm() > 0.0);
      CHECK(std::isfinite(ht.entries.norm()));
      worst = std::min(worst, energy_fraction(ht, cfg.delay_rows));
    }
    CHECK(worst >= 0.90);
  }
}

TEST_CASE("generator: magnitudes correlate across the duplex gap, phases do not") {
  ChannelConfig cfg = small_config();
  const Dataset d = generate_dataset(cfg, 1000, true);
  std::vector<double> md, mu;
  Complex resultant{0.0, 0.0};
  std::size_t n = 0;
  for (Index s = 0; s < d.size(); ++s) {
    for (Index i = 0; i < d.downlink[std::size_t(s)].size(); ++i) {
      const Complex a = d.downlink[std::size_t(s)].data()[i], b = d.uplink[std::size_t(s)].data()[i];
      md.push_back(std::abs(a));
      mu.push_back(std::abs(b));
      resultant += std::polar(1.0, std::arg(a) - std::arg(b));
      ++n;
    }
  }
  const Eigen::Map<Eigen::VectorXd> x(md.data(), Index(md.size())), y(mu.data(), Index(mu.size()));
  const Eigen::VectorXd xc = x.array() - x.mean(), yc = y.array() - y.mean();
  const double corr = xc.dot(yc) / (xc.norm() * yc.norm());
  CHECK(corr > 0.9);
  CHECK(std::abs(resultant) / double(n) < 0.1);
}

TEST_CASE("generator: any split of the index range reproduces the same samples") {
  ChannelConfig cfg = small_config();
  const Dataset all = generate_dataset(cfg, 6, true);
  const Dataset tail = generate_dataset(cfg, 3, true, 3);
  for (int i = 0; i < 3; ++i) {
    CHECK(all.downlink[std::size_t(i + 3)] == tail.downlink[std::size_t(i)]);
    CHECK(all.uplink[std::size_t(i + 3)] == tail.uplink[std::size_t(i)]);
  }
  cfg.seed = 2;
  CHECK(generate_dataset(cfg, 1, false).downlink[0] != all.downlink[0]);
}

TEST_CASE("normalize: identity on [0,1], exact extremes, round trip") {
  std::vector<RealMatrix> unit{RealMatrix::Constant(2, 2, 0.0), RealMatrix::Constant(2, 2, 1.0)};
  unit[0](1, 1) = 0.25;
  const auto [same, s1] = normalize_dataset(std::span<const RealMatrix>(unit));
  CHECK(same[0] == unit[0]);
  CHECK(same[1] == unit[1]);

  std::vector<ComplexMatrix> xs{ComplexMatrix::Random(3, 4) * 5.0, ComplexMatrix::Random(3, 4)};
  const auto [n, st] = normalize_dataset(std::span<const ComplexMatrix>(xs));
  double lo = 1.0, hi = 0.0;
  for (const auto& m : n) {
    lo = std::min({lo, m.real().minCoeff(), m.imag().minCoeff()});
    hi = std::max({hi, m.real().maxCoeff(), m.imag().maxCoeff()});
  }
  CHECK(lo == 0.0);
  CHECK(hi == 1.0);
  for (std::size_t i = 0; i < xs.size(); ++i) CHECK((denormalize(n[i], st) - xs[i]).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("normalize: degenerate range and empty set are contract errors") {
  std::vector<RealMatrix> flat{RealMatrix::Constant(2, 2, 3.0)};
  CHECK_THROWS_AS(normalize_dataset(std::span<const RealMatrix>(flat)), ContractError);
  CHECK_THROWS_AS(NormStats::fit(std::span<const RealMatrix>()), ContractError);
}

TEST_CASE("split_mag_phase: point values and reconstruction") {
  ComplexMatrix h(1, 3);
  h << Complex(1, 0), Complex(0, 0), Complex(0, -2);
  const auto mp = split_mag_phase(h);
  CHECK(mp.magnitude(0, 0) == 1.0);
  CHECK(mp.phase(0, 0) == 0.0);
  CHECK(mp.magnitude(0, 1) == 0.0);
  CHECK(mp.phase(0, 1) == 0.0);
  CHECK(mp.magnitude(0, 2) == 2.0);
  CHECK(mp.phase(0, 2) == doctest::Approx(-std::numbers::pi / 2));

  const ComplexMatrix r = ComplexMatrix::Random(6, 5);
  const auto q = split_mag_phase(r);
  CHECK((combine_mag_phase(q.magnitude, q.phase) - r).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(q.phase.minCoeff() >= -std::numbers::pi);
  CHECK(q.phase.maxCoeff() < std::numbers::pi);
  // arg(-1) = pi is wrapped onto -pi.
  ComplexMatrix neg(1, 1);
  neg(0, 0) = Complex(-1.0, 0.0);
  CHECK(split_mag_phase(neg).phase(0, 0) == -std::numbers::pi);
}

TEST_CASE("dataset file: round trip at f32 precision, deterministic bytes") {
  const auto dir = std::filesystem::temp_directory_path() / "csiq_test_channel";
  std::filesystem::create_directories(dir);
  ChannelConfig cfg = small_config();
  const Dataset d = generate_dataset(cfg, 4, true);
  write_dataset(dir / "a.bin", d);
  write_dataset(dir / "b.bin", generate_dataset(cfg, 4, true));
  CHECK(io::read_file(dir / "a.bin") == io::read_file(dir / "b.bin"));
  const Dataset r = read_dataset(dir / "a.bin");
  CHECK(r.size() == 4);
  CHECK(r.has_uplink());
  CHECK(r.antennas == cfg.antennas);
  CHECK(r.subcarriers == cfg.subcarriers);
  CHECK(r.delay_rows == cfg.delay_rows);
  for (std::size_t i = 0; i < 4; ++i) {
    const double scale = d.downlink[i].cwiseAbs().maxCoeff();
    CHECK((r.downlink[i] - d.downlink[i]).cwiseAbs().maxCoeff() <= 1e-6 * scale);
  }
  const auto bytes = io::read_file(dir / "a.bin");
  CHECK(std::string(bytes.begin(), bytes.begin() + 8) == std::string("CSIQDS1\0", 8));

  // Corrupt magic and truncation are data errors.
  auto bad = bytes;
  bad[0] = 'X';
  io::write_file(dir / "bad.bin", bad);
  CHECK_THROWS_AS(read_dataset(dir / "bad.bin"), DataError);
  auto cut = bytes;
  cut.resize(cut.size() - 5);
  io::write_file(dir / "cut.bin", cut);
  CHECK_THROWS_AS(read_dataset(dir / "cut.bin"), DataError);
  std::filesystem::remove_all(dir);
}
