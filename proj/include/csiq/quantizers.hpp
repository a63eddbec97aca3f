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

// Scalar quantizers for compressed CSI codewords.
//
// Conventions shared by every quantizer here:
//  * rounding is half away from zero (std::round), in hard and soft paths alike;
//  * a signed b-bit index lives in [-2^(b-1), 2^(b-1) - 1];
//  * soft rounding over integer levels lo..hi is
//      lo + sum_{i=lo}^{hi-1} sigmoid(r (x - i - 0.5)),
//    which for lo = -2^(b-1), hi = 2^(b-1) is the sigmoid-sum surrogate of
//    round() used to train through the learned quantizer.

#ifndef CSIQ_QUANTIZERS_HPP
#define CSIQ_QUANTIZERS_HPP

#include "csiq/gradflow.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace csiq::quant {

inline constexpr double kDefaultMu = 255.0;

inline int signed_min(int bits) { return -(1 << (bits - 1)); }
inline int signed_max(int bits) { return (1 << (bits - 1)) - 1; }
void check_bits(int bits, const char* who);

// ---------------------------------------------------------------- uniform

/// Delta = (s_max - s_min) / (2^bits - 1).
double uniform_step(double s_min, double s_max, int bits);
/// Index of Delta * round(clip(s) / Delta).
long uniform_index(double s, double s_min, double s_max, int bits);
/// Delta * round(clip(s) / Delta), clamped back into [s_min, s_max].
double uniform_quantize(double s, double s_min, double s_max, int bits);

template <typename Derived>
auto uniform_quantize(const Eigen::ArrayBase<Derived>& s, double s_min, double s_max, int bits) {
  const double step = uniform_step(s_min, s_max, bits);
  return s.derived().unaryExpr(
      [=](double v) { return std::clamp(step * std::round(std::clamp(v, s_min, s_max) / step), s_min, s_max); });
}

// ------------------------------------------------------------------ mu-law

double mu_compand(double x, double mu = kDefaultMu);
double mu_expand(double y, double mu = kDefaultMu);
/// compand -> uniform on [-1, 1] -> expand.
double mu_law_quantize(double x, int bits, double mu = kDefaultMu);

template <typename Derived>
auto mu_law_quantize(const Eigen::ArrayBase<Derived>& x, int bits, double mu = kDefaultMu) {
  return x.derived().unaryExpr([=](double v) { return mu_law_quantize(v, bits, mu); });
}

// ------------------------------------------------------------ soft rounding

double soft_round_levels(double x, int lo, int hi, double sharpness);
double soft_round_levels_derivative(double x, int lo, int hi, double sharpness);

inline double soft_round(double x, int bits, double sharpness) {
  return soft_round_levels(x, signed_min(bits), signed_max(bits) + 1, sharpness);
}
inline double soft_round_derivative(double x, int bits, double sharpness) {
  return soft_round_levels_derivative(x, signed_min(bits), signed_max(bits) + 1, sharpness);
}

template <typename Derived>
auto soft_round(const Eigen::ArrayBase<Derived>& x, int bits, double sharpness) {
  return x.derived().unaryExpr([=](double v) { return soft_round(v, bits, sharpness); });
}

gradflow::Var soft_round_levels(gradflow::Var x, int lo, int hi, double sharpness);
gradflow::Var soft_round(gradflow::Var x, int bits, double sharpness);

// --------------------------------------------------------- learned quantizer

/// Index vector k with its bit width.
struct IndexVector {
  Eigen::VectorXi k;
  int bits = 1;

  Index size() const { return k.size(); }
  bool in_range() const {
    return k.size() == 0 || (k.minCoeff() >= signed_min(bits) && k.maxCoeff() <= signed_max(bits));
  }
};

/// Forward weights w (interval d_i = 1 / w_i), inverse weights v.
struct QuantizerParams {
  Eigen::VectorXd w;
  Eigen::VectorXd v;
  int bits = 5;
  double sharpness = 200.0;

  Index size() const { return w.size(); }
  void validate() const;
};

IndexVector learned_forward_infer(const Eigen::VectorXd& s, const QuantizerParams& params);
Eigen::VectorXd learned_forward_train(const Eigen::VectorXd& s, const QuantizerParams& params);
Eigen::VectorXd learned_inverse(const IndexVector& k, const QuantizerParams& params);

enum class RegularizerNorm { l1, l2 };
double quantizer_regularizer(const Eigen::VectorXd& w, RegularizerNorm norm = RegularizerNorm::l1);
gradflow::Var quantizer_regularizer(gradflow::Var w, RegularizerNorm norm = RegularizerNorm::l1);

/// Floor division k' = floor(k / 2^(bits - target_bits)).
IndexVector truncate_index(const IndexVector& k, int target_bits);
/// Inverse for truncated indices: v_i 2^d (k'_i + 1/2), i.e. the coarse cell midpoint.
Eigen::VectorXd truncated_inverse(const IndexVector& truncated, int original_bits, const QuantizerParams& params);

inline long floor_div(long a, long b) {
  long q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

// ------------------------------------------------------ codeword quantizers

enum class QuantizerKind { none, uniform, mu_law, learned };

std::string to_string(QuantizerKind kind);
QuantizerKind quantizer_kind_from_string(const std::string& name);

/// A fitted codeword quantizer: hard index map plus reconstruction.
struct CodewordQuantizer {
  QuantizerKind kind = QuantizerKind::none;
  int bits = 0;
  double s_min = 0.0, s_max = 0.0;  // uniform range
  double scale = 1.0;               // mu-law normalisation (max |s|)
  double mu = kDefaultMu;
  QuantizerParams learned;

  static CodewordQuantizer uniform(double s_min, double s_max, int bits);
  static CodewordQuantizer mu_law(double scale, int bits, double mu = kDefaultMu);

  /// Integer indices; for uniform / mu-law these lie in [index_min(), index_max()].
  Eigen::VectorXi index(const Eigen::VectorXd& s) const;
  Eigen::VectorXd reconstruct(const Eigen::VectorXi& k) const;
  Eigen::VectorXd apply(const Eigen::VectorXd& s) const;
  int index_min() const;
  int index_max() const;
};

}  // namespace csiq::quant

#endif  // CSIQ_QUANTIZERS_HPP
