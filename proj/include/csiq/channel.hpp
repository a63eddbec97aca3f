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

// Synthetic FDD channel pairs and delay-domain preprocessing.
//
// The generator is a geometric multipath model on a half-wavelength ULA:
//
//   H_f[n, a] = sum_p g_p exp(-j 2 pi n tau_p / Nf) exp(-j pi a sin(theta_p))
//
// The first path is the timing reference (tau = 0); later paths draw
// delays from a truncated exponential profile bounded by delay_spread * Qf,
// rounded up to whole taps below Qf. Uplink and downlink share delays, angles and gain
// magnitudes. Uplink phases are re-drawn with weight (1 - phase_correlation),
// so magnitudes are strongly correlated across the duplex gap while phases
// are not.

#ifndef CSIQ_CHANNEL_HPP
#define CSIQ_CHANNEL_HPP

#include "csiq/tensor.hpp"

#include <complex>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <utility>
#include <vector>

namespace csiq::channel {

using Complex = std::complex<double>;
using ComplexMatrix = Eigen::MatrixXcd;
using RealMatrix = Eigen::MatrixXd;
using Rng = std::mt19937_64;

enum class Domain { frequency, delay };
enum class Link { downlink, uplink };

struct ChannelConfig {
  Index antennas = 32;      // Nb
  Index subcarriers = 1024; // Nf
  Index delay_rows = 32;    // Qf
  int min_paths = 3;
  int max_paths = 10;
  double delay_spread = 0.5;  // maximum excess delay as a fraction of Qf
  double phase_correlation = 0.0;
  double shadowing_db = 4.0;  // log-normal large-scale gain spread per sample
  std::uint64_t seed = 1;

  void validate() const;

  static ChannelConfig indoor_like();
  static ChannelConfig outdoor_like();
};

struct CsiMatrix {
  ComplexMatrix entries;
  Domain domain = Domain::frequency;
  Link link = Link::downlink;

  Index rows() const { return entries.rows(); }
  Index cols() const { return entries.cols(); }
};

struct Path {
  double delay = 0.0;  // in taps (1 / subcarrier-spacing units)
  double angle = 0.0;  // radians from broadside
  Complex downlink_gain{1.0, 0.0};
  Complex uplink_gain{1.0, 0.0};
};

struct ChannelPair {
  CsiMatrix downlink;
  CsiMatrix uplink;
};

std::vector<Path> draw_paths(const ChannelConfig& cfg, Rng& rng);
/// Frequency-domain response of an explicit path list.
ChannelPair synthesize(const ChannelConfig& cfg, std::span<const Path> paths);
ChannelPair sample_channel_pair(const ChannelConfig& cfg, Rng& rng);

/// H_t = F^H H_f along the subcarrier axis, F the unitary DFT.
CsiMatrix to_delay_domain(const CsiMatrix& h);
CsiMatrix truncate(const CsiMatrix& h, Index rows);
/// Fraction of Frobenius energy in the first `rows` rows.
double energy_fraction(const CsiMatrix& h, Index rows);

/// Affine map of real values onto [0, 1].
struct NormStats {
  double min = 0.0;
  double max = 1.0;

  template <typename Derived>
  auto normalize(const Eigen::MatrixBase<Derived>& x) const {
    return ((x.array() - min) / (max - min)).matrix();
  }
  template <typename Derived>
  auto denormalize(const Eigen::MatrixBase<Derived>& y) const {
    return (y.array() * (max - min) + min).matrix();
  }

  static NormStats fit(std::span<const RealMatrix> samples);
  /// Fits jointly over real and imaginary parts.
  static NormStats fit(std::span<const ComplexMatrix> samples);
};

std::pair<std::vector<RealMatrix>, NormStats> normalize_dataset(std::span<const RealMatrix> samples);
std::pair<std::vector<ComplexMatrix>, NormStats> normalize_dataset(std::span<const ComplexMatrix> samples);
ComplexMatrix denormalize(const ComplexMatrix& normalized, const NormStats& stats);

struct MagPhasePair {
  RealMatrix magnitude;
  RealMatrix phase;  // in [-pi, pi)
};

MagPhasePair split_mag_phase(const ComplexMatrix& h);
ComplexMatrix combine_mag_phase(const RealMatrix& magnitude, const RealMatrix& phase);
/// Wraps an angle into [-pi, pi).
double wrap_phase(double phase);

/// Truncated delay-domain samples ready for training.
struct Dataset {
  Index antennas = 0;
  Index subcarriers = 0;
  Index delay_rows = 0;
  std::vector<ComplexMatrix> downlink;
  std::vector<ComplexMatrix> uplink;
  bool magnitude_only = false;

  Index size() const { return Index(downlink.size()); }
  bool has_uplink() const { return !uplink.empty(); }
  Dataset slice(Index begin, Index end) const;
};

/// Sample i uses an RNG stream derived from (cfg.seed, first_index + i), so
/// any split of the index range reproduces the same samples.
Dataset generate_dataset(const ChannelConfig& cfg, Index count, bool with_uplink, Index first_index = 0);

void write_dataset(const std::filesystem::path& path, const Dataset& data);
Dataset read_dataset(const std::filesystem::path& path);

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace csiq::channel

#endif  // CSIQ_CHANNEL_HPP
