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

#include "csiq/phaseq.hpp"

#include "csiq/binary_io.hpp"
#include "csiq/quantizers.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

namespace csiq::phaseq {

namespace gf = gradflow;
using std::numbers::pi;

void check_allocation(const BitAllocation& y) {
  if (y.bits.size() == 0) return;
  if (y.bits.minCoeff() < kMinBits || y.bits.maxCoeff() > kMaxBits) {
    throw ContractError("phase bit allocation outside [" + std::to_string(kMinBits) + ", " +
                        std::to_string(kMaxBits) + "]");
  }
}

double empirical_quantile(std::vector<double> values, double q) {
  if (values.empty()) throw ContractError("quantile of an empty sample");
  const auto k = std::size_t(std::floor(std::clamp(q, 0.0, 1.0) * double(values.size() - 1)));
  std::nth_element(values.begin(), values.begin() + std::ptrdiff_t(k), values.end());
  return values[k];
}

HeuristicAllocator HeuristicAllocator::fit(std::span<const RealMatrix> magnitudes) {
  std::vector<double> all;
  for (const auto& m : magnitudes) all.insert(all.end(), m.data(), m.data() + m.size());
  if (all.empty()) throw ContractError("heuristic allocator: no training magnitudes");
  std::array<double, 4> t{};
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = empirical_quantile(all, kCdfPoints[i]);
  return from_thresholds(t);
}

HeuristicAllocator HeuristicAllocator::from_thresholds(const std::array<double, 4>& thresholds) {
  if (!std::is_sorted(thresholds.begin(), thresholds.end())) {
    throw ContractError("heuristic allocator: thresholds must be non-decreasing");
  }
  HeuristicAllocator a;
  a.thresholds = thresholds;
  return a;
}

int HeuristicAllocator::count_below(double magnitude) const {
  return int(std::count_if(thresholds.begin(), thresholds.end(), [&](double t) { return t < magnitude; }));
}

BitAllocation HeuristicAllocator::allocate(const RealMatrix& magnitude) const {
  BitAllocation y;
  y.bits = magnitude.unaryExpr([this](double m) { return bits_for(m); });
  return y;
}

// ------------------------------------------------------------ phase grid

QuantizedPhase quantize_phase(const RealMatrix& phase, const BitAllocation& y) {
  if (phase.rows() != y.bits.rows() || phase.cols() != y.bits.cols()) {
    throw DimensionError("quantize_phase: phase and bit map shapes differ");
  }
  check_allocation(y);
  QuantizedPhase out;
  out.index.resize(phase.rows(), phase.cols());
  for (Index i = 0; i < phase.size(); ++i) {
    const long cells = 1L << y.bits(i);
    const double p = channel::wrap_phase(phase(i));
    const long k = long(std::floor((p + pi) / (2.0 * pi) * double(cells)));
    out.index(i) = int(std::clamp(k, 0L, cells - 1));
  }
  out.phase = dequantize_phase(out.index, y);
  return out;
}

RealMatrix dequantize_phase(const Eigen::MatrixXi& index, const BitAllocation& y) {
  if (index.rows() != y.bits.rows() || index.cols() != y.bits.cols()) {
    throw DimensionError("dequantize_phase: index and bit map shapes differ");
  }
  check_allocation(y);
  RealMatrix out(index.rows(), index.cols());
  for (Index i = 0; i < index.size(); ++i) {
    const long cells = 1L << y.bits(i);
    if (index(i) < 0 || index(i) >= cells) throw ContractError("dequantize_phase: index outside its cell range");
    out(i) = -pi + (double(index(i)) + 0.5) * (2.0 * pi / double(cells));
  }
  return out;
}

double weighted_phase_error(const RealMatrix& m_hat, const RealMatrix& phase, const RealMatrix& phase_hat) {
  if (m_hat.size() == 0) return 0.0;
  // |e^{ja} - e^{jb}|^2 = 2 - 2 cos(a - b)
  const Eigen::ArrayXXd d = 2.0 - 2.0 * (phase_hat - phase).array().cos();
  return (m_hat.array().square() * d).mean();
}

double phase_loss(const RealMatrix& m_hat, const RealMatrix& phase, const RealMatrix& phase_hat, const BitAllocation& y,
                  double lambda) {
  if (m_hat.rows() != phase.rows() || m_hat.cols() != phase.cols() || phase_hat.rows() != phase.rows() ||
      phase_hat.cols() != phase.cols() || y.bits.rows() != phase.rows() || y.bits.cols() != phase.cols()) {
    throw DimensionError("phase_loss: shapes do not conform");
  }
  return weighted_phase_error(m_hat, phase, phase_hat) + lambda * y.mean();
}

bool verify_upper_bound(const RealMatrix& m, const RealMatrix& phase, const RealMatrix& phase_hat,
                        const RealMatrix& m_hat) {
  using channel::combine_mag_phase;
  const double lhs = (combine_mag_phase(m, phase) - combine_mag_phase(m_hat, phase_hat)).squaredNorm();
  const double phase_term = (m.array().square() * (2.0 - 2.0 * (phase_hat - phase).array().cos())).sum();
  const double mag_term = (m - m_hat).squaredNorm();
  const double rhs = 2.0 * phase_term + 2.0 * mag_term;
  return lhs <= rhs + 1e-12 * std::max(1.0, rhs);
}

double expected_phase_distortion(double bits) {
  const double a = pi * std::exp2(-bits);
  return 2.0 - 2.0 * std::sin(a) / a;
}

double expected_phase_distortion_derivative(double bits) {
  const double a = pi * std::exp2(-bits);
  const double dd_da = -2.0 * (a * std::cos(a) - std::sin(a)) / (a * a);
  return dd_da * (-a * std::numbers::ln2);
}

// ------------------------------------------------------------- PhaseQuan

double lambda_layer(double x, double epsilon) { return std::log2(1.0 / (x + epsilon)); }

Var lambda_layer(Var x, double epsilon) {
  return gf::map(
      x, [epsilon](double v) { return lambda_layer(v, epsilon); },
      [epsilon](double v) { return -1.0 / ((v + epsilon) * std::numbers::ln2); });
}

PhaseQuanModel PhaseQuanModel::create(Index rows, Index cols, std::uint64_t seed) {
  if (rows < 1 || cols < 1) throw ContractError("PhaseQuan: dimensions must be positive");
  nn::Rng rng(seed);
  PhaseQuanModel m;
  m.rows = rows;
  m.cols = cols;
  m.input_conv = nn::ConvLayer("phasequan.in", 1, 2, rng);
  m.residual1 = nn::ResidualBlock("phasequan.res1", 2, rng);
  m.residual2 = nn::ResidualBlock("phasequan.res2", 2, rng);
  m.output_conv = nn::ConvLayer("phasequan.out", 2, 1, rng);
  return m;
}

std::vector<gf::Parameter*> PhaseQuanModel::all_parameters() {
  std::vector<gf::Parameter*> out;
  input_conv.collect(out);
  residual1.collect(out);
  residual2.collect(out);
  output_conv.collect(out);
  return out;
}

std::vector<const gf::Parameter*> PhaseQuanModel::all_parameters() const {
  auto ps = const_cast<PhaseQuanModel*>(this)->all_parameters();
  return {ps.begin(), ps.end()};
}

namespace {

constexpr int kLevelsTop = (1 << 3) - 1;

Var real_bits_graph(Tape& tape, PhaseQuanModel& model, Var x) {
  const Shape xs = x.shape();
  if (xs.size() != 4 || xs[1] != 1 || xs[2] != model.rows || xs[3] != model.cols) {
    throw ContractError("PhaseQuan: expected input [B,1," + std::to_string(model.rows) + "," +
                        std::to_string(model.cols) + "], got " + shape_string(xs));
  }
  Var h = gf::leaky_relu(model.input_conv(tape, x), model.leaky_slope);
  h = gf::leaky_relu(model.residual1(tape, h, model.leaky_slope), model.leaky_slope);
  h = gf::leaky_relu(model.residual2(tape, h, model.leaky_slope), model.leaky_slope);
  return lambda_layer(gf::sigmoid(model.output_conv(tape, h)), model.epsilon);
}

}  // namespace

Var phasequan_graph(Tape& tape, PhaseQuanModel& model, Var x, double sharpness) {
  Var bits = quant::soft_round_levels(real_bits_graph(tape, model, x), 0, kLevelsTop, sharpness);
  return gf::clamp(bits, double(kMinBits), double(kMaxBits));
}

Tensor magnitude_tensor(const NormStats& norm, std::span<const RealMatrix> magnitudes) {
  if (magnitudes.empty()) return Tensor();
  const Index q = magnitudes.front().rows(), b = magnitudes.front().cols();
  Tensor t({Index(magnitudes.size()), 1, q, b});
  for (std::size_t i = 0; i < magnitudes.size(); ++i) {
    if (magnitudes[i].rows() != q || magnitudes[i].cols() != b) throw DimensionError("magnitude set is ragged");
    const RealMatrix n = norm.normalize(magnitudes[i]);
    for (Index r = 0; r < q; ++r)
      for (Index c = 0; c < b; ++c) t[(Index(i) * q + r) * b + c] = n(r, c);
  }
  return t;
}

std::vector<BitAllocation> phasequan_forward_all(const PhaseQuanModel& model, std::span<const RealMatrix> magnitudes) {
  std::vector<BitAllocation> out;
  if (magnitudes.empty()) return out;
  PhaseQuanModel m = model;
  const Tensor x = magnitude_tensor(model.norm, magnitudes);
  const Index q = model.rows, b = model.cols;
  constexpr Index chunk = 128;
  for (Index begin = 0; begin < x.dim(0); begin += chunk) {
    const Index end = std::min(x.dim(0), begin + chunk);
    Tensor part({end - begin, 1, q, b}, x.data().segment(begin * q * b, (end - begin) * q * b));
    Tape tape(false);
    const Tensor& bits = real_bits_graph(tape, m, tape.constant(std::move(part))).value();
    for (Index i = 0; i < end - begin; ++i) {
      BitAllocation y;
      y.bits.resize(q, b);
      for (Index r = 0; r < q; ++r)
        for (Index c = 0; c < b; ++c) {
          const double v = std::round(std::clamp(bits[(i * q + r) * b + c], 0.0, double(kLevelsTop)));
          y.bits(r, c) = std::clamp(int(v), kMinBits, kMaxBits);
        }
      out.push_back(std::move(y));
    }
  }
  return out;
}

BitAllocation phasequan_forward(const PhaseQuanModel& model, const RealMatrix& magnitude) {
  if (magnitude.rows() != model.rows || magnitude.cols() != model.cols) {
    throw ContractError("PhaseQuan: magnitude is " + std::to_string(magnitude.rows()) + "x" +
                        std::to_string(magnitude.cols()) + ", model expects " + std::to_string(model.rows) + "x" +
                        std::to_string(model.cols));
  }
  return phasequan_forward_all(model, std::span<const RealMatrix>(&magnitude, 1)).front();
}

// -------------------------------------------------------------- training

void PhaseTrainConfig::validate() const {
  if (epochs < 1) throw ContractError("phase config: epochs must be >= 1");
  if (batch_size < 1) throw ContractError("phase config: batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ContractError("phase config: learning_rate must be positive");
  if (!(lambda >= 0.0)) throw ContractError("phase config: lambda must be >= 0");
  if (!(epsilon > 0.0)) throw ContractError("phase config: epsilon must be positive");
  if (!(sharpness.initial > 0.0) || !(sharpness.cap > 0.0) || sharpness.every < 1) {
    throw ContractError("phase config: invalid sharpness schedule");
  }
}

std::string PhaseTrainConfig::canonical_json() const {
  const nlohmann::json j{{"epochs", epochs},
                         {"batch_size", batch_size},
                         {"learning_rate", learning_rate},
                         {"lambda", lambda},
                         {"epsilon", epsilon},
                         {"sharpness",
                          {{"initial", sharpness.initial},
                           {"factor", sharpness.factor},
                           {"every", sharpness.every},
                           {"cap", sharpness.cap}}},
                         {"seed", seed}};
  return j.dump();
}

std::uint64_t PhaseTrainConfig::hash() const { return io::fnv1a(canonical_json()); }

PhaseTrainConfig PhaseTrainConfig::from_json_text(const std::string& text) {
  PhaseTrainConfig c;
  try {
    const auto j = nlohmann::json::parse(text);
    if (!j.is_object()) throw DataError("phase config: expected a JSON object");
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.lambda = j.value("lambda", c.lambda);
    c.epsilon = j.value("epsilon", c.epsilon);
    if (j.contains("sharpness")) {
      const auto& s = j.at("sharpness");
      c.sharpness.initial = s.value("initial", c.sharpness.initial);
      c.sharpness.factor = s.value("factor", c.sharpness.factor);
      c.sharpness.every = s.value("every", c.sharpness.every);
      c.sharpness.cap = s.value("cap", c.sharpness.cap);
    }
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("phase config: ") + e.what());
  }
  c.validate();
  return c;
}

Var surrogate_loss_graph(Tape& tape, PhaseQuanModel& model, const Tensor& x, double lambda, double sharpness) {
  Var in = tape.constant(x);
  Var bits = phasequan_graph(tape, model, in, sharpness);
  Var distortion = gf::map(
      bits, [](double y) { return expected_phase_distortion(y); },
      [](double y) { return expected_phase_distortion_derivative(y); });
  Tensor weight(x.shape(), x.data().array().square().matrix());
  Var loss = gf::mean(gf::mul(tape.constant(std::move(weight)), distortion));
  if (lambda > 0.0) loss = gf::add(loss, gf::scale(gf::mean(bits), lambda));
  return loss;
}

PhaseQuanModel train_phasequan(std::span<const RealMatrix> magnitudes, const PhaseTrainConfig& cfg,
                               std::vector<double>* epoch_loss) {
  cfg.validate();
  if (magnitudes.empty()) throw ContractError("PhaseQuan training: empty magnitude set");
  PhaseQuanModel model = PhaseQuanModel::create(magnitudes.front().rows(), magnitudes.front().cols(), cfg.seed);
  model.epsilon = cfg.epsilon;
  model.lambda = cfg.lambda;
  model.norm = NormStats::fit(magnitudes);
  const Tensor x = magnitude_tensor(model.norm, magnitudes);
  const Index n = x.dim(0), plane = model.rows * model.cols;

  auto params = model.all_parameters();
  gf::Adam adam({cfg.learning_rate});
  std::mt19937_64 rng(channel::derive_seed(cfg.seed, 0x70686173ull));
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  if (epoch_loss) epoch_loss->clear();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double r = cfg.sharpness.at(epoch);
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t begin = 0; begin < order.size(); begin += std::size_t(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), begin + std::size_t(cfg.batch_size));
      Tensor batch({Index(end - begin), 1, model.rows, model.cols});
      for (std::size_t i = begin; i < end; ++i) {
        batch.data().segment(Index(i - begin) * plane, plane) = x.data().segment(order[i] * plane, plane);
      }
      Tape tape;
      Var loss = surrogate_loss_graph(tape, model, batch, cfg.lambda, r);
      const double value = loss.value()[0];
      if (!std::isfinite(value)) {
        throw codec::TrainingError("PhaseQuan training: loss became " + std::to_string(value) + " at epoch " +
                                   std::to_string(epoch));
      }
      nn::zero_grads(params);
      tape.backward(loss);
      adam.step(params);
      total += value * double(end - begin);
    }
    if (epoch_loss) epoch_loss->push_back(total / double(n));
  }
  nn::zero_grads(params);
  return model;
}

}  // namespace csiq::phaseq
