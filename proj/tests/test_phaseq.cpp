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
#include "test_support.hpp"

#include "csiq/checkpoint.hpp"
#include "csiq/phaseq.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <numeric>
#include <random>

using namespace csiq;
using namespace csiq::phaseq;
using std::numbers::pi;

namespace {

RealMatrix random_matrix(Index r, Index c, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  RealMatrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m(i) = u(rng);
  return m;
}

std::vector<RealMatrix> magnitudes(Index n, Index rows, Index cols, std::uint64_t seed) {
  channel::ChannelConfig cfg = channel::ChannelConfig::indoor_like();
  cfg.antennas = cols;
  cfg.subcarriers = 64;
  cfg.delay_rows = rows;
  cfg.seed = seed;
  const auto d = channel::generate_dataset(cfg, n, false);
  std::vector<RealMatrix> out;
  for (const auto& h : d.downlink) out.emplace_back(h.cwiseAbs());
  return out;
}

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * double(i + j);
    i = j + 1;
  }
  return r;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  const auto ra = ranks(a), rb = ranks(b);
  const Eigen::Map<const Eigen::VectorXd> x(ra.data(), Index(ra.size())), y(rb.data(), Index(rb.size()));
  const Eigen::VectorXd xc = x.array() - x.mean(), yc = y.array() - y.mean();
  const double den = xc.norm() * yc.norm();
  return den > 0 ? xc.dot(yc) / den : 0.0;
}

}  // namespace

TEST_CASE("heuristic: segment rule and strict threshold comparison") {
  const auto h = HeuristicAllocator::from_thresholds({1.0, 2.0, 3.0, 4.0});
  CHECK(h.bits_for(0.5) == 3);
  CHECK(h.bits_for(1.0) == 3);  // not strictly above the 0.5 threshold
  CHECK(h.bits_for(1.5) == 4);
  CHECK(h.bits_for(2.5) == 5);
  CHECK(h.bits_for(3.5) == 6);
  CHECK(h.bits_for(9.0) == 7);
  CHECK_THROWS_AS(HeuristicAllocator::from_thresholds({1.0, 3.0, 2.0, 4.0}), ContractError);
}

TEST_CASE("heuristic: all-equal magnitudes take the lowest segment") {
  const std::vector<RealMatrix> flat{RealMatrix::Constant(3, 3, 0.7)};
  const auto h = HeuristicAllocator::fit(flat);
  CHECK(h.allocate(flat[0]).bits == Eigen::MatrixXi::Constant(3, 3, 3));
}

TEST_CASE("heuristic: mean allocation on continuous magnitudes is 4.1 bits") {
  const auto mags = magnitudes(200, 8, 8, 3);
  const auto h = HeuristicAllocator::fit(mags);
  double total = 0.0;
  for (const auto& m : mags) total += h.allocate(m).mean();
  CHECK(total / double(mags.size()) == doctest::Approx(4.1).epsilon(0.05 / 4.1));
}

TEST_CASE("empirical quantile uses index floor(q (n - 1))") {
  CHECK(empirical_quantile({5, 1, 4, 2, 3}, 0.5) == 3.0);
  CHECK(empirical_quantile({5, 1, 4, 2, 3}, 0.9) == 4.0);
  CHECK(empirical_quantile({5, 1, 4, 2, 3}, 1.0) == 5.0);
}

TEST_CASE("lambda layer") {
  const double eps = kDefaultEpsilon;
  for (int b = 1; b <= 6; ++b) CHECK(lambda_layer(std::ldexp(1.0, -b) - eps, eps) == doctest::Approx(double(b)));
  CHECK(lambda_layer(1.0, 1e-15) == doctest::Approx(0.0).scale(1.0));
  CHECK(lambda_layer(0.0, std::ldexp(1.0, -7)) == doctest::Approx(7.0));
  for (double x = 0.0; x < 1.0; x += 0.01) CHECK(lambda_layer(x + 0.01) < lambda_layer(x));
}

TEST_CASE("quantize_phase: cell grid, error bound and index range") {
  BitAllocation y1{Eigen::MatrixXi::Ones(1, 1)};
  const auto q0 = quantize_phase(RealMatrix::Zero(1, 1), y1);
  CHECK(std::abs(std::abs(q0.phase(0, 0)) - pi / 2) < 1e-15);

  std::mt19937_64 rng(1);
  for (int t = 0; t < 200; ++t) {
    const RealMatrix p = random_matrix(6, 5, rng, -pi, pi);
    BitAllocation y{Eigen::MatrixXi(6, 5)};
    for (Index i = 0; i < y.bits.size(); ++i) y.bits(i) = 1 + int(rng() % 7);
    const auto q = quantize_phase(p, y);
    for (Index i = 0; i < p.size(); ++i) {
      CHECK(std::abs(q.phase(i) - p(i)) <= pi / std::ldexp(1.0, y.bits(i)) + 1e-12);
      CHECK(q.index(i) >= 0);
      CHECK(q.index(i) < (1 << y.bits(i)));
    }
    CHECK(dequantize_phase(q.index, y) == q.phase);
  }
  BitAllocation y7{Eigen::MatrixXi::Constant(4, 4, 7)};
  const RealMatrix p = random_matrix(4, 4, rng, -pi, pi);
  CHECK((quantize_phase(p, y7).phase - p).cwiseAbs().maxCoeff() <= pi / 128 + 1e-12);

  BitAllocation bad{Eigen::MatrixXi::Constant(2, 2, 8)};
  CHECK_THROWS_AS(quantize_phase(RealMatrix::Zero(2, 2), bad), ContractError);
  bad.bits.setZero();
  CHECK_THROWS_AS(quantize_phase(RealMatrix::Zero(2, 2), bad), ContractError);
}

TEST_CASE("phase loss: identities") {
  std::mt19937_64 rng(2);
  const RealMatrix m = random_matrix(3, 3, rng, 0, 2), p = random_matrix(3, 3, rng, -pi, pi);
  BitAllocation y{Eigen::MatrixXi::Constant(3, 3, 4)};
  CHECK(phase_loss(m, p, p, y, 0.01) == doctest::Approx(0.04));
  const RealMatrix ph = random_matrix(3, 3, rng, -pi, pi);
  CHECK(phase_loss(RealMatrix::Zero(3, 3), p, ph, y, 0.0) == 0.0);
  // Direct evaluation of mean |M (e^{jP^} - e^{jP})|^2.
  double acc = 0.0;
  for (Index i = 0; i < 9; ++i) acc += std::norm(m(i) * (std::polar(1.0, ph(i)) - std::polar(1.0, p(i))));
  CHECK(weighted_phase_error(m, p, ph) == doctest::Approx(acc / 9.0));
}

TEST_CASE("upper bound on the combined error holds on 1000 random draws") {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 1000; ++t) {
    const RealMatrix m = random_matrix(4, 4, rng, 0, 3), mh = random_matrix(4, 4, rng, 0, 3);
    const RealMatrix p = random_matrix(4, 4, rng, -pi, pi), ph = random_matrix(4, 4, rng, -pi, pi);
    REQUIRE(verify_upper_bound(m, p, ph, mh));
    REQUIRE(verify_upper_bound(m, p, ph, m));
  }
  const RealMatrix m = RealMatrix::Ones(2, 2), p = RealMatrix::Zero(2, 2);
  CHECK(verify_upper_bound(m, p, p, m));
}

TEST_CASE("MAPQ beats a uniform grid at a comparable budget") {
  const auto mags = magnitudes(100, 8, 8, 5);
  const auto h = HeuristicAllocator::fit(mags);
  std::mt19937_64 rng(6);
  double err_mapq = 0.0, err_uniform = 0.0, bits = 0.0;
  for (const auto& m : mags) {
    const RealMatrix p = random_matrix(m.rows(), m.cols(), rng, -pi, pi);
    const BitAllocation y = h.allocate(m);
    bits += y.mean();
    err_mapq += weighted_phase_error(m, p, quantize_phase(p, y).phase);
    // 4.1 bits spread uniformly: 90% of entries at 4 bits, 10% at 5, placed blindly.
    BitAllocation u{Eigen::MatrixXi::Constant(m.rows(), m.cols(), 4)};
    for (Index i = 0; i < u.bits.size(); i += 10) u.bits(i) = 5;
    err_uniform += weighted_phase_error(m, p, quantize_phase(p, u).phase);
  }
  CHECK(bits / double(mags.size()) == doctest::Approx(4.1).epsilon(0.02));
  CHECK(err_mapq < err_uniform);
}

TEST_CASE("expected distortion and its derivative") {
  CHECK(expected_phase_distortion(7) < expected_phase_distortion(1));
  for (double b = 0.5; b <= 7.0; b += 0.25) {
    const double h = 1e-6;
    const double fd = (expected_phase_distortion(b + h) - expected_phase_distortion(b - h)) / (2 * h);
    CHECK(expected_phase_distortion_derivative(b) == doctest::Approx(fd).epsilon(1e-5));
  }
  // Monte-Carlo check of 2 - 2 sin(a)/a for error uniform on [-a, a].
  std::mt19937_64 rng(7);
  const double a = pi / 8.0;
  std::uniform_real_distribution<double> u(-a, a);
  double mc = 0.0;
  for (int i = 0; i < 200000; ++i) mc += std::norm(std::polar(1.0, u(rng)) - 1.0);
  CHECK(mc / 200000 == doctest::Approx(expected_phase_distortion(3.0)).epsilon(0.01));
}

TEST_CASE("PhaseQuan: zero output conv gives a constant bit map") {
  PhaseQuanModel m = PhaseQuanModel::create(4, 4, 1);
  m.output_conv.kernels.value.data().setZero();
  m.output_conv.bias.value.data().setZero();
  m.norm = {0.0, 1.0};
  std::mt19937_64 rng(8);
  const auto y = phasequan_forward(m, random_matrix(4, 4, rng, 0, 1));
  // sigmoid(0) = 0.5 -> log2(1 / (0.5 + 1/128)) = 0.977 -> rounds to 1
  CHECK(y.bits == Eigen::MatrixXi::Constant(4, 4, 1));
  CHECK(phasequan_forward(m, random_matrix(4, 4, rng, 0, 1)).bits == y.bits);
}

TEST_CASE("PhaseQuan: surrogate loss gradient on a 2x2 toy") {
  PhaseQuanModel m = PhaseQuanModel::create(2, 2, 3);
  std::mt19937_64 rng(9);
  const Tensor x = testing::random_tensor({3, 1, 2, 2}, rng, 0.0, 1.0);
  const auto r = testing::check_gradients(m.all_parameters(), [&](gradflow::Tape& t, std::vector<gradflow::Parameter*>&) {
    return surrogate_loss_graph(t, m, x, 1e-2, 2.0);
  }, 1e-6, 1e-7, 24);
  CHECK(r.max_rel_error < 1e-3);
}

TEST_CASE("PhaseQuan: trained allocation follows magnitude and reloads exactly") {
  const auto train_mags = magnitudes(120, 8, 8, 11);
  const auto test_mags = magnitudes(30, 8, 8, 12);
  PhaseTrainConfig cfg;
  cfg.epochs = 25;
  cfg.batch_size = 20;
  cfg.learning_rate = 3e-3;
  cfg.lambda = 1e-3;
  std::vector<double> loss;
  const auto model = train_phasequan(train_mags, cfg, &loss);
  CHECK(loss.back() < loss.front());
  std::vector<double> mv, bv;
  const auto alloc = phasequan_forward_all(model, test_mags);
  for (std::size_t i = 0; i < test_mags.size(); ++i) {
    check_allocation(alloc[i]);
    for (Index k = 0; k < test_mags[i].size(); ++k) {
      mv.push_back(test_mags[i](k));
      bv.push_back(alloc[i].bits(k));
    }
  }
  CHECK(spearman(mv, bv) > 0.0);

  // Decoder re-derives Y from the same magnitudes after a checkpoint round trip.
  const auto dir = std::filesystem::temp_directory_path() / "csiq_test_phaseq";
  std::filesystem::create_directories(dir);
  checkpoint::save(dir / "pq.ckpt", model, cfg.canonical_json());
  // Encoder and decoder each load the deployed checkpoint.
  const auto encoder_side = checkpoint::load_phasequan(dir / "pq.ckpt", cfg.hash());
  const auto decoder_side = checkpoint::load_phasequan(dir / "pq.ckpt", cfg.hash());
  Index agree = 0, total = 0;
  for (std::size_t i = 0; i < test_mags.size(); ++i) {
    const auto enc = phasequan_forward(encoder_side, test_mags[i]);
    CHECK(phasequan_forward(decoder_side, test_mags[i]).bits == enc.bits);
    agree += (enc.bits.array() == alloc[i].bits.array()).count();
    total += enc.bits.size();
  }
  // f32 storage may move an entry sitting on a rounding boundary, nothing more.
  CHECK(double(agree) >= 0.99 * double(total));
  std::filesystem::remove_all(dir);
}

TEST_CASE("PhaseQuan config: JSON round trip") {
  PhaseTrainConfig c;
  c.lambda = 1e-2;
  c.seed = 9;
  const auto back = PhaseTrainConfig::from_json_text(c.canonical_json());
  CHECK(back.hash() == c.hash());
  c.epsilon = 0.0;
  CHECK_THROWS_AS(c.validate(), ContractError);
}
