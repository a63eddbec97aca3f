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

#include "csiq/quantizers.hpp"

#include <stdexcept>

namespace csiq::quant {

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

void check_bits(int bits, const char* who) {
  if (bits < 1 || bits > 24) throw ContractError(std::string(who) + ": bit width must be in [1, 24], got " + std::to_string(bits));
}

double uniform_step(double s_min, double s_max, int bits) {
  check_bits(bits, "uniform_quantize");
  if (!(s_max > s_min)) throw ContractError("uniform_quantize: need s_min < s_max");
  return (s_max - s_min) / double((1L << bits) - 1);
}

long uniform_index(double s, double s_min, double s_max, int bits) {
  const double step = uniform_step(s_min, s_max, bits);
  return std::lround(std::clamp(s, s_min, s_max) / step);
}

// An endpoint that is not a multiple of the step rounds one level past the
// range; clamping the output keeps the endpoints as levels.
double uniform_quantize(double s, double s_min, double s_max, int bits) {
  return std::clamp(double(uniform_index(s, s_min, s_max, bits)) * uniform_step(s_min, s_max, bits), s_min, s_max);
}

double mu_compand(double x, double mu) {
  if (!(std::abs(x) <= 1.0)) throw ContractError("mu_compand: |x| > 1");
  return std::copysign(std::log1p(mu * std::abs(x)) / std::log1p(mu), x);
}

double mu_expand(double y, double mu) {
  if (!(std::abs(y) <= 1.0)) throw ContractError("mu_expand: |y| > 1");
  return std::copysign(std::expm1(std::abs(y) * std::log1p(mu)) / mu, y);
}

double mu_law_quantize(double x, int bits, double mu) {
  const double yq = uniform_quantize(mu_compand(x, mu), -1.0, 1.0, bits);
  return mu_expand(yq, mu);
}

// Terms further than `reach` from x are 0 or 1 to double precision, so
// only a window of sigmoids around x is evaluated.
double soft_round_levels(double x, int lo, int hi, double sharpness) {
  if (!(sharpness > 0.0)) throw ContractError("soft_round: sharpness must be positive");
  const double reach = 40.0 / sharpness;
  const long a = std::clamp<long>(long(std::ceil(x - reach - 0.5)), lo, hi);
  const long b = std::clamp<long>(long(std::floor(x + reach - 0.5)), long(lo) - 1, long(hi) - 1);
  double acc = double(a - lo);
  for (long i = a; i <= b; ++i) acc += sigmoid(sharpness * (x - double(i) - 0.5));
  return double(lo) + acc;
}

double soft_round_levels_derivative(double x, int lo, int hi, double sharpness) {
  if (!(sharpness > 0.0)) throw ContractError("soft_round: sharpness must be positive");
  const double reach = 40.0 / sharpness;
  const long a = std::clamp<long>(long(std::ceil(x - reach - 0.5)), lo, hi);
  const long b = std::clamp<long>(long(std::floor(x + reach - 0.5)), long(lo) - 1, long(hi) - 1);
  double acc = 0.0;
  for (long i = a; i <= b; ++i) {
    const double s = sigmoid(sharpness * (x - double(i) - 0.5));
    acc += sharpness * s * (1.0 - s);
  }
  return acc;
}

gradflow::Var soft_round_levels(gradflow::Var x, int lo, int hi, double sharpness) {
  return gradflow::map(
      x, [=](double v) { return soft_round_levels(v, lo, hi, sharpness); },
      [=](double v) { return soft_round_levels_derivative(v, lo, hi, sharpness); });
}

gradflow::Var soft_round(gradflow::Var x, int bits, double sharpness) {
  check_bits(bits, "soft_round");
  return soft_round_levels(x, signed_min(bits), signed_max(bits) + 1, sharpness);
}

void QuantizerParams::validate() const {
  check_bits(bits, "quantizer");
  if (w.size() != v.size()) throw ContractError("quantizer: len(w) != len(v)");
  if (w.size() > 0 && !(w.minCoeff() > 0.0)) throw ContractError("quantizer: forward weights must be positive");
  if (!(sharpness > 0.0)) throw ContractError("quantizer: sharpness must be positive");
}

IndexVector learned_forward_infer(const Eigen::VectorXd& s, const QuantizerParams& params) {
  params.validate();
  if (s.size() != params.size()) throw ContractError("learned_forward: codeword length != M");
  const int lo = signed_min(params.bits), hi = signed_max(params.bits);
  IndexVector out{Eigen::VectorXi(s.size()), params.bits};
  for (Index i = 0; i < s.size(); ++i) out.k[i] = int(std::clamp<long>(std::lround(s[i] * params.w[i]), lo, hi));
  return out;
}

Eigen::VectorXd learned_forward_train(const Eigen::VectorXd& s, const QuantizerParams& params) {
  params.validate();
  if (s.size() != params.size()) throw ContractError("learned_forward: codeword length != M");
  return soft_round(s.cwiseProduct(params.w).array(), params.bits, params.sharpness).matrix();
}

Eigen::VectorXd learned_inverse(const IndexVector& k, const QuantizerParams& params) {
  if (k.size() != params.size()) throw ContractError("learned_inverse: index length != M");
  if (!k.in_range()) throw ContractError("learned_inverse: index outside the signed range for its bit width");
  return k.k.cast<double>().cwiseProduct(params.v);
}

double quantizer_regularizer(const Eigen::VectorXd& w, RegularizerNorm norm) {
  return norm == RegularizerNorm::l1 ? w.lpNorm<1>() : w.norm();
}

gradflow::Var quantizer_regularizer(gradflow::Var w, RegularizerNorm norm) {
  if (norm == RegularizerNorm::l1) return gradflow::sum(gradflow::abs(w));
  return gradflow::map(gradflow::sum(gradflow::square(w)), [](double v) { return std::sqrt(v); },
                       [](double v) { return v > 0.0 ? 0.5 / std::sqrt(v) : 0.0; });
}

IndexVector truncate_index(const IndexVector& k, int target_bits) {
  if (target_bits < 1 || target_bits >= k.bits) {
    throw ContractError("truncate_index: need 1 <= target bits < " + std::to_string(k.bits));
  }
  const long divisor = 1L << (k.bits - target_bits);
  IndexVector out{Eigen::VectorXi(k.size()), target_bits};
  for (Index i = 0; i < k.size(); ++i) out.k[i] = int(floor_div(k.k[i], divisor));
  return out;
}

Eigen::VectorXd truncated_inverse(const IndexVector& truncated, int original_bits, const QuantizerParams& params) {
  if (truncated.size() != params.size()) throw ContractError("truncated_inverse: index length != M");
  if (truncated.bits >= original_bits) throw ContractError("truncated_inverse: not a truncated index");
  const double scale = double(1L << (original_bits - truncated.bits));
  return ((truncated.k.cast<double>().array() + 0.5) * scale * params.v.array()).matrix();
}

std::string to_string(QuantizerKind kind) {
  switch (kind) {
    case QuantizerKind::none: return "none";
    case QuantizerKind::uniform: return "UQ";
    case QuantizerKind::mu_law: return "muQ";
    case QuantizerKind::learned: return "CQNet";
  }
  return "?";
}

QuantizerKind quantizer_kind_from_string(const std::string& name) {
  if (name == "none" || name == "float") return QuantizerKind::none;
  if (name == "UQ" || name == "uniform") return QuantizerKind::uniform;
  if (name == "muQ" || name == "mu_law" || name == "μQ") return QuantizerKind::mu_law;
  if (name == "CQNet" || name == "learned") return QuantizerKind::learned;
  throw ContractError("unknown quantizer kind '" + name + "'");
}

CodewordQuantizer CodewordQuantizer::uniform(double s_min, double s_max, int bits) {
  uniform_step(s_min, s_max, bits);
  CodewordQuantizer q;
  q.kind = QuantizerKind::uniform;
  q.bits = bits;
  q.s_min = s_min;
  q.s_max = s_max;
  return q;
}

CodewordQuantizer CodewordQuantizer::mu_law(double scale, int bits, double mu) {
  check_bits(bits, "mu_law");
  if (!(scale > 0.0)) throw ContractError("mu_law: scale must be positive");
  CodewordQuantizer q;
  q.kind = QuantizerKind::mu_law;
  q.bits = bits;
  q.scale = scale;
  q.mu = mu;
  return q;
}

Eigen::VectorXi CodewordQuantizer::index(const Eigen::VectorXd& s) const {
  Eigen::VectorXi k(s.size());
  switch (kind) {
    case QuantizerKind::uniform:
      for (Index i = 0; i < s.size(); ++i) k[i] = int(uniform_index(s[i], s_min, s_max, bits));
      return k;
    case QuantizerKind::mu_law: {
      const double step = uniform_step(-1.0, 1.0, bits);
      for (Index i = 0; i < s.size(); ++i) {
        k[i] = int(std::lround(mu_compand(std::clamp(s[i] / scale, -1.0, 1.0), mu) / step));
      }
      return k;
    }
    case QuantizerKind::learned:
      return learned_forward_infer(s, learned).k;
    case QuantizerKind::none:
      break;
  }
  throw ContractError("codeword quantizer: 'none' has no index map");
}

Eigen::VectorXd CodewordQuantizer::reconstruct(const Eigen::VectorXi& k) const {
  Eigen::VectorXd out(k.size());
  switch (kind) {
    case QuantizerKind::uniform: {
      const double step = uniform_step(s_min, s_max, bits);
      return (k.cast<double>() * step).cwiseMax(s_min).cwiseMin(s_max);
    }
    case QuantizerKind::mu_law: {
      const double step = uniform_step(-1.0, 1.0, bits);
      for (Index i = 0; i < k.size(); ++i) out[i] = scale * mu_expand(std::clamp(k[i] * step, -1.0, 1.0), mu);
      return out;
    }
    case QuantizerKind::learned:
      return learned_inverse(IndexVector{k, learned.bits}, learned);
    case QuantizerKind::none:
      break;
  }
  throw ContractError("codeword quantizer: 'none' has no index map");
}

Eigen::VectorXd CodewordQuantizer::apply(const Eigen::VectorXd& s) const {
  if (kind == QuantizerKind::none) return s;
  return reconstruct(index(s));
}

int CodewordQuantizer::index_min() const {
  switch (kind) {
    case QuantizerKind::uniform: return int(std::lround(s_min / uniform_step(s_min, s_max, bits)));
    case QuantizerKind::mu_law: return -int(std::lround(1.0 / uniform_step(-1.0, 1.0, bits)));
    case QuantizerKind::learned: return signed_min(learned.bits);
    case QuantizerKind::none: break;
  }
  throw ContractError("codeword quantizer: 'none' has no index range");
}

int CodewordQuantizer::index_max() const {
  switch (kind) {
    case QuantizerKind::uniform: return int(std::lround(s_max / uniform_step(s_min, s_max, bits)));
    case QuantizerKind::mu_law: return int(std::lround(1.0 / uniform_step(-1.0, 1.0, bits)));
    case QuantizerKind::learned: return signed_max(learned.bits);
    case QuantizerKind::none: break;
  }
  throw ContractError("codeword quantizer: 'none' has no index range");
}

}  // namespace csiq::quant
