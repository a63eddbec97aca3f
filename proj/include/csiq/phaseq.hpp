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

// Magnitude-adaptive phase quantization (MAPQ).
//
// Phase entries are quantized on a uniform grid over [-pi, pi) with 2^Y cells
// and reconstructed at cell centres, so |P_hat - P| <= pi / 2^Y. The bit map Y
// is always derived from the magnitude the decoder will see, which lets the
// decoder rebuild the bit layout without side information.
//
// Two allocators produce Y: a CDF-threshold heuristic and PhaseQuan, a small
// convolutional network whose sigmoid output x is turned into bits by
// log2(1 / (x + eps)) followed by rounding onto 0..7 and a clamp to [1, 7].

#ifndef CSIQ_PHASEQ_HPP
#define CSIQ_PHASEQ_HPP

#include "csiq/channel.hpp"
#include "csiq/codec.hpp"
#include "csiq/nn.hpp"

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace csiq::phaseq {

using channel::NormStats;
using channel::RealMatrix;
using gradflow::Tape;
using gradflow::Var;

inline constexpr int kMinBits = 1;
inline constexpr int kMaxBits = 7;
inline constexpr double kDefaultEpsilon = 1.0 / 128.0;

/// Bits per phase entry, Qf x Nb.
struct BitAllocation {
  Eigen::MatrixXi bits;

  long total() const { return bits.cast<long>().sum(); }
  double mean() const { return bits.size() ? double(total()) / double(bits.size()) : 0.0; }
};

void check_allocation(const BitAllocation& y);

// ------------------------------------------------------------- heuristic

/// Five magnitude segments split at fixed CDF points; segment s gets 3 + s bits.
struct HeuristicAllocator {
  static constexpr std::array<double, 4> kCdfPoints{0.5, 0.7, 0.8, 0.9};
  static constexpr int kBaseBits = 3;

  std::array<double, 4> thresholds{};

  /// Thresholds are the empirical magnitude quantiles at kCdfPoints.
  static HeuristicAllocator fit(std::span<const RealMatrix> magnitudes);
  /// Unsorted thresholds are rejected.
  static HeuristicAllocator from_thresholds(const std::array<double, 4>& thresholds);

  /// bits = 3 + #{thresholds strictly below the magnitude}.
  int bits_for(double magnitude) const { return kBaseBits + count_below(magnitude); }
  BitAllocation allocate(const RealMatrix& magnitude) const;

 private:
  int count_below(double magnitude) const;
};

/// Empirical q-quantile (nearest rank on the sorted sample, index floor(q (n - 1))).
double empirical_quantile(std::vector<double> values, double q);

// ---------------------------------------------------------- phase grid

struct QuantizedPhase {
  RealMatrix phase;        // cell centres
  Eigen::MatrixXi index;   // 0 .. 2^Y - 1
};

/// index = floor((P + pi) / (2 pi) * 2^Y); phases are wrapped into [-pi, pi) first.
QuantizedPhase quantize_phase(const RealMatrix& phase, const BitAllocation& y);
RealMatrix dequantize_phase(const Eigen::MatrixXi& index, const BitAllocation& y);

/// mean |M_hat (e^{jP_hat} - e^{jP})|^2 + lambda mean(Y).
double phase_loss(const RealMatrix& m_hat, const RealMatrix& phase, const RealMatrix& phase_hat, const BitAllocation& y,
                  double lambda);
/// mean |M_hat (e^{jP_hat} - e^{jP})|^2.
double weighted_phase_error(const RealMatrix& m_hat, const RealMatrix& phase, const RealMatrix& phase_hat);

/// ||M e^{jP} - M_hat e^{jP_hat}||^2 <= 2 ||M (e^{jP} - e^{jP_hat})||^2 + 2 ||M - M_hat||^2.
bool verify_upper_bound(const RealMatrix& m, const RealMatrix& phase, const RealMatrix& phase_hat,
                        const RealMatrix& m_hat);

/// E|e^{jP} - e^{jP_hat}|^2 for phase error uniform on one cell: 2 - 2 sin(a) / a, a = pi / 2^Y.
double expected_phase_distortion(double bits);
double expected_phase_distortion_derivative(double bits);

// ------------------------------------------------------------ PhaseQuan

double lambda_layer(double x, double epsilon = kDefaultEpsilon);
Var lambda_layer(Var x, double epsilon = kDefaultEpsilon);

struct PhaseQuanModel {
  Index rows = 0;
  Index cols = 0;
  double epsilon = kDefaultEpsilon;
  double lambda = 1e-3;
  double leaky_slope = gradflow::kDefaultLeakySlope;
  NormStats norm;  // input magnitude normalisation

  nn::ConvLayer input_conv;
  nn::ResidualBlock residual1;
  nn::ResidualBlock residual2;
  nn::ConvLayer output_conv;

  static PhaseQuanModel create(Index rows, Index cols, std::uint64_t seed);

  std::vector<gradflow::Parameter*> all_parameters();
  std::vector<const gradflow::Parameter*> all_parameters() const;
};

/// Real-valued bit map [B, 1, Qf, Nb] from normalised magnitudes; soft rounding at `sharpness`.
Var phasequan_graph(Tape& tape, PhaseQuanModel& model, Var x, double sharpness);
/// Hard allocation for one magnitude matrix (in original units).
BitAllocation phasequan_forward(const PhaseQuanModel& model, const RealMatrix& magnitude);
std::vector<BitAllocation> phasequan_forward_all(const PhaseQuanModel& model, std::span<const RealMatrix> magnitudes);

struct PhaseTrainConfig {
  int epochs = 60;
  int batch_size = 50;
  double learning_rate = 1e-3;
  double lambda = 1e-3;
  double epsilon = kDefaultEpsilon;
  codec::SharpnessSchedule sharpness{2.0, 1.5, 10, 20.0};
  std::uint64_t seed = 1;

  void validate() const;
  std::string canonical_json() const;
  std::uint64_t hash() const;
  static PhaseTrainConfig from_json_text(const std::string& text);
};

/// Training objective on normalised magnitudes x [B, 1, Qf, Nb]:
/// mean(x^2 D(Y)) + lambda mean(Y), D the expected cell distortion.
Var surrogate_loss_graph(Tape& tape, PhaseQuanModel& model, const Tensor& x, double lambda, double sharpness);

/// Trains on decoder-side magnitudes M_hat.
PhaseQuanModel train_phasequan(std::span<const RealMatrix> magnitudes, const PhaseTrainConfig& cfg,
                               std::vector<double>* epoch_loss = nullptr);

/// Normalised [N, 1, Qf, Nb] tensor of magnitudes.
Tensor magnitude_tensor(const NormStats& norm, std::span<const RealMatrix> magnitudes);

}  // namespace csiq::phaseq

#endif  // CSIQ_PHASEQ_HPP
