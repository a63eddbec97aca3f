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

#include "csiq/channel.hpp"

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <cmath>
#include <numbers>

namespace csiq::channel {

using std::numbers::pi;

void ChannelConfig::validate() const {
  if (antennas < 1) throw ContractError("channel config: antennas must be >= 1");
  if (subcarriers < 1) throw ContractError("channel config: subcarriers must be >= 1");
  if (delay_rows < 1 || delay_rows > subcarriers) throw ContractError("channel config: need 1 <= Qf <= Nf");
  if (min_paths < 1 || max_paths < min_paths) throw ContractError("channel config: empty path count range");
  if (!(delay_spread >= 0.0 && delay_spread <= 1.0)) throw ContractError("channel config: delay_spread outside [0,1]");
  if (!(phase_correlation >= 0.0 && phase_correlation <= 1.0)) {
    throw ContractError("channel config: phase_correlation outside [0,1]");
  }
  if (!(shadowing_db >= 0.0)) throw ContractError("channel config: shadowing_db must be >= 0");
}

ChannelConfig ChannelConfig::indoor_like() {
  ChannelConfig cfg;
  cfg.min_paths = 2;
  cfg.max_paths = 6;
  cfg.delay_spread = 0.25;
  cfg.shadowing_db = 3.0;
  return cfg;
}

ChannelConfig ChannelConfig::outdoor_like() {
  ChannelConfig cfg;
  cfg.min_paths = 6;
  cfg.max_paths = 14;
  cfg.delay_spread = 0.6;
  cfg.shadowing_db = 6.0;
  return cfg;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  auto splitmix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  };
  return splitmix(seed ^ splitmix(stream + 0x632be59bd9b4e019ull));
}

std::vector<Path> draw_paths(const ChannelConfig& cfg, Rng& rng) {
  cfg.validate();
  std::uniform_int_distribution<int> count_dist(cfg.min_paths, cfg.max_paths);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> phase_dist(-pi, pi);
  std::uniform_real_distribution<double> angle_dist(-pi / 2, pi / 2);
  std::normal_distribution<double> shadow_dist(0.0, 1.0);

  const int n = count_dist(rng);
  const double max_delay = cfg.delay_spread * double(cfg.delay_rows);
  const double rms = std::max(max_delay / 3.0, 1e-9);

  std::vector<Path> paths(static_cast<std::size_t>(n));
  double power = 0.0;
  for (int p = 0; p < n; ++p) {
    Path& path = paths[std::size_t(p)];
    const double u = unit(rng);
    // Whole-sample taps: a fractional delay would leak sinc sidelobes past Qf.
    // Rounding up keeps later paths off the reference tap.
    path.delay = (p == 0 || max_delay == 0.0)
                     ? 0.0
                     : std::min(std::ceil(-rms * std::log1p(-u * (1.0 - std::exp(-max_delay / rms)))),
                                double(cfg.delay_rows - 1));
    // Rayleigh amplitude under an exponential power-delay profile
    const double amp = std::sqrt(std::exp(-path.delay / rms) * -std::log1p(-unit(rng)));
    const double phase_dl = phase_dist(rng);
    const double phase_ul = phase_dl + (1.0 - cfg.phase_correlation) * phase_dist(rng);
    path.angle = angle_dist(rng);
    path.downlink_gain = std::polar(amp, phase_dl);
    path.uplink_gain = std::polar(amp, phase_ul);
    power += amp * amp;
  }
  const double shadow = std::pow(10.0, cfg.shadowing_db * shadow_dist(rng) / 20.0);
  const double g = power > 0.0 ? shadow / std::sqrt(power) : 0.0;
  for (Path& path : paths) {
    path.downlink_gain *= g;
    path.uplink_gain *= g;
  }
  return paths;
}

ChannelPair synthesize(const ChannelConfig& cfg, std::span<const Path> paths) {
  const Index nf = cfg.subcarriers, nb = cfg.antennas;
  ChannelPair out{{ComplexMatrix::Zero(nf, nb), Domain::frequency, Link::downlink},
                  {ComplexMatrix::Zero(nf, nb), Domain::frequency, Link::uplink}};
  Eigen::VectorXcd freq(nf), steer(nb);
  for (const Path& p : paths) {
    for (Index n = 0; n < nf; ++n) freq[n] = std::polar(1.0, -2.0 * pi * double(n) * p.delay / double(nf));
    const double s = std::sin(p.angle);
    for (Index a = 0; a < nb; ++a) steer[a] = std::polar(1.0, -pi * double(a) * s);
    out.downlink.entries.noalias() += (p.downlink_gain * freq) * steer.transpose();
    out.uplink.entries.noalias() += (p.uplink_gain * freq) * steer.transpose();
  }
  return out;
}

ChannelPair sample_channel_pair(const ChannelConfig& cfg, Rng& rng) {
  const auto paths = draw_paths(cfg, rng);
  return synthesize(cfg, paths);
}

CsiMatrix to_delay_domain(const CsiMatrix& h) {
  if (h.domain != Domain::frequency) throw ContractError("to_delay_domain: input is not in the frequency domain");
  const Index nf = h.rows();
  CsiMatrix out{ComplexMatrix(nf, h.cols()), Domain::delay, h.link};
  Eigen::FFT<double> fft;
  Eigen::VectorXcd col(nf), res(nf);
  const double unitary = std::sqrt(double(nf));
  for (Index c = 0; c < h.cols(); ++c) {
    col = h.entries.col(c);
    fft.inv(res, col);  // (1/N) sum_n X[n] e^{+j 2 pi n k / N}
    out.entries.col(c) = res * unitary;
  }
  return out;
}

CsiMatrix truncate(const CsiMatrix& h, Index rows) {
  if (h.domain != Domain::delay) throw ContractError("truncate: input is not in the delay domain");
  if (rows < 1 || rows > h.rows()) {
    throw ContractError("truncate: Qf=" + std::to_string(rows) + " exceeds " + std::to_string(h.rows()) + " rows");
  }
  return CsiMatrix{h.entries.topRows(rows), Domain::delay, h.link};
}

double energy_fraction(const CsiMatrix& h, Index rows) {
  const double total = h.entries.squaredNorm();
  return total > 0.0 ? h.entries.topRows(rows).squaredNorm() / total : 1.0;
}

namespace {

NormStats checked(double lo, double hi) {
  if (!(hi > lo)) throw ContractError("normalize: degenerate value range (min == max)");
  return NormStats{lo, hi};
}

}  // namespace

NormStats NormStats::fit(std::span<const RealMatrix> samples) {
  if (samples.empty()) throw ContractError("normalize: empty sample set");
  double lo = samples.front().minCoeff(), hi = samples.front().maxCoeff();
  for (const auto& s : samples) {
    lo = std::min(lo, s.minCoeff());
    hi = std::max(hi, s.maxCoeff());
  }
  return checked(lo, hi);
}

NormStats NormStats::fit(std::span<const ComplexMatrix> samples) {
  if (samples.empty()) throw ContractError("normalize: empty sample set");
  double lo = samples.front().real().minCoeff(), hi = samples.front().real().maxCoeff();
  for (const auto& s : samples) {
    lo = std::min({lo, s.real().minCoeff(), s.imag().minCoeff()});
    hi = std::max({hi, s.real().maxCoeff(), s.imag().maxCoeff()});
  }
  return checked(lo, hi);
}

std::pair<std::vector<RealMatrix>, NormStats> normalize_dataset(std::span<const RealMatrix> samples) {
  const NormStats stats = NormStats::fit(samples);
  std::vector<RealMatrix> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.emplace_back(stats.normalize(s));
  return {std::move(out), stats};
}

std::pair<std::vector<ComplexMatrix>, NormStats> normalize_dataset(std::span<const ComplexMatrix> samples) {
  const NormStats stats = NormStats::fit(samples);
  std::vector<ComplexMatrix> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    ComplexMatrix n(s.rows(), s.cols());
    n.real() = stats.normalize(s.real());
    n.imag() = stats.normalize(s.imag());
    out.push_back(std::move(n));
  }
  return {std::move(out), stats};
}

ComplexMatrix denormalize(const ComplexMatrix& normalized, const NormStats& stats) {
  ComplexMatrix out(normalized.rows(), normalized.cols());
  out.real() = stats.denormalize(normalized.real());
  out.imag() = stats.denormalize(normalized.imag());
  return out;
}

double wrap_phase(double phase) {
  double w = std::fmod(phase + pi, 2.0 * pi);
  if (w < 0.0) w += 2.0 * pi;
  w -= pi;
  return w >= pi ? -pi : w;
}

MagPhasePair split_mag_phase(const ComplexMatrix& h) {
  MagPhasePair out{h.cwiseAbs(), RealMatrix(h.rows(), h.cols())};
  for (Index j = 0; j < h.cols(); ++j) {
    for (Index i = 0; i < h.rows(); ++i) {
      out.phase(i, j) = out.magnitude(i, j) == 0.0 ? 0.0 : wrap_phase(std::arg(h(i, j)));
    }
  }
  return out;
}

ComplexMatrix combine_mag_phase(const RealMatrix& magnitude, const RealMatrix& phase) {
  if (magnitude.rows() != phase.rows() || magnitude.cols() != phase.cols()) {
    throw DimensionError("combine_mag_phase: shape mismatch");
  }
  ComplexMatrix out(magnitude.rows(), magnitude.cols());
  for (Index j = 0; j < out.cols(); ++j) {
    for (Index i = 0; i < out.rows(); ++i) out(i, j) = std::polar(magnitude(i, j), phase(i, j));
  }
  return out;
}

Dataset Dataset::slice(Index begin, Index end) const {
  if (begin < 0 || end > size() || begin > end) throw ContractError("dataset slice out of range");
  Dataset out{antennas, subcarriers, delay_rows, {}, {}, magnitude_only};
  out.downlink.assign(downlink.begin() + begin, downlink.begin() + end);
  if (has_uplink()) out.uplink.assign(uplink.begin() + begin, uplink.begin() + end);
  return out;
}

Dataset generate_dataset(const ChannelConfig& cfg, Index count, bool with_uplink, Index first_index) {
  cfg.validate();
  Dataset out{cfg.antennas, cfg.subcarriers, cfg.delay_rows, {}, {}, false};
  out.downlink.reserve(std::size_t(count));
  for (Index i = 0; i < count; ++i) {
    Rng rng(derive_seed(cfg.seed, std::uint64_t(first_index + i)));
    const ChannelPair pair = sample_channel_pair(cfg, rng);
    out.downlink.push_back(truncate(to_delay_domain(pair.downlink), cfg.delay_rows).entries);
    if (with_uplink) out.uplink.push_back(truncate(to_delay_domain(pair.uplink), cfg.delay_rows).entries);
  }
  return out;
}

}  // namespace csiq::channel
