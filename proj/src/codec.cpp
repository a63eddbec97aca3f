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

#include "csiq/codec.hpp"

#include "csiq/binary_io.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace csiq::codec {

namespace gf = gradflow;
using channel::ComplexMatrix;
using channel::RealMatrix;
using nlohmann::json;

std::string to_string(Variant v) { return v == Variant::csiq ? "csiq" : "dualq"; }

std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::joint: return "joint";
    case TrainMode::retrain_decoder_only: return "rd";
    case TrainMode::no_quant_baseline: return "baseline";
  }
  return "?";
}

Variant variant_from_string(const std::string& s) {
  if (s == "csiq" || s == "CsiQ") return Variant::csiq;
  if (s == "dualq" || s == "DualQ") return Variant::dualq;
  throw ContractError("unknown codec variant '" + s + "'");
}

TrainMode train_mode_from_string(const std::string& s) {
  if (s == "joint") return TrainMode::joint;
  if (s == "rd" || s == "retrain_decoder_only") return TrainMode::retrain_decoder_only;
  if (s == "baseline" || s == "no_quant_baseline") return TrainMode::no_quant_baseline;
  throw ContractError("unknown training mode '" + s + "'");
}

double SharpnessSchedule::at(int epoch) const {
  return std::min(cap, initial * std::pow(factor, double(epoch / std::max(every, 1))));
}

void TrainConfig::validate() const {
  if (codeword_length < 1) throw ContractError("train config: codeword_length must be >= 1");
  if (epochs < 1) throw ContractError("train config: epochs must be >= 1");
  if (batch_size < 1) throw ContractError("train config: batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ContractError("train config: learning_rate must be positive");
  if (!(lambda >= 0.0)) throw ContractError("train config: lambda must be >= 0");
  quant::check_bits(bits, "train config");
  if (!(sharpness.initial > 0.0) || !(sharpness.cap > 0.0) || !(sharpness.factor >= 1.0) || sharpness.every < 1) {
    throw ContractError("train config: invalid sharpness schedule");
  }
  if (rd_quantizer != quant::QuantizerKind::uniform && rd_quantizer != quant::QuantizerKind::mu_law) {
    throw ContractError("train config: rd_quantizer must be UQ or muQ");
  }
}

namespace {

json config_to_json(const TrainConfig& c) {
  return json{{"variant", to_string(c.variant)},
              {"codeword_length", c.codeword_length},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"learning_rate", c.learning_rate},
              {"lambda", c.lambda},
              {"bits", c.bits},
              {"sharpness",
               {{"initial", c.sharpness.initial},
                {"factor", c.sharpness.factor},
                {"every", c.sharpness.every},
                {"cap", c.sharpness.cap}}},
              {"seed", c.seed},
              {"mode", to_string(c.mode)},
              {"leaky_slope", c.leaky_slope},
              {"regularizer", c.regularizer == quant::RegularizerNorm::l1 ? "l1" : "l2"},
              {"rd_quantizer", quant::to_string(c.rd_quantizer)}};
}

}  // namespace

std::string TrainConfig::canonical_json() const { return config_to_json(*this).dump(); }

std::uint64_t TrainConfig::hash() const { return io::fnv1a(canonical_json()); }

TrainConfig TrainConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw DataError(std::string("train config: ") + e.what());
  }
  if (!j.is_object()) throw DataError("train config: expected a JSON object");
  TrainConfig c;
  try {
    c.variant = variant_from_string(j.value("variant", to_string(c.variant)));
    c.codeword_length = j.value("codeword_length", c.codeword_length);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.lambda = j.value("lambda", c.lambda);
    c.bits = j.value("bits", c.bits);
    if (j.contains("sharpness")) {
      const json& s = j.at("sharpness");
      c.sharpness.initial = s.value("initial", c.sharpness.initial);
      c.sharpness.factor = s.value("factor", c.sharpness.factor);
      c.sharpness.every = s.value("every", c.sharpness.every);
      c.sharpness.cap = s.value("cap", c.sharpness.cap);
    }
    c.seed = j.value("seed", c.seed);
    c.mode = train_mode_from_string(j.value("mode", to_string(c.mode)));
    c.leaky_slope = j.value("leaky_slope", c.leaky_slope);
    const std::string reg = j.value("regularizer", std::string("l1"));
    if (reg != "l1" && reg != "l2") throw ContractError("train config: regularizer must be l1 or l2");
    c.regularizer = reg == "l1" ? quant::RegularizerNorm::l1 : quant::RegularizerNorm::l2;
    c.rd_quantizer = quant::quantizer_kind_from_string(j.value("rd_quantizer", std::string("UQ")));
  } catch (const json::exception& e) {
    throw DataError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

// ------------------------------------------------------------------ model

namespace {

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
double inverse_softplus(double y) { return y > 30.0 ? y : std::log(std::expm1(y)); }

}  // namespace

CodecModel CodecModel::create(Variant variant, Index codeword_length, Index rows, Index cols, std::uint64_t seed,
                              double leaky_slope) {
  if (codeword_length < 1 || rows < 1 || cols < 1) throw ContractError("codec: dimensions must be positive");
  nn::Rng rng(seed);
  CodecModel m;
  m.variant = variant;
  m.codeword_length = codeword_length;
  m.rows = rows;
  m.cols = cols;
  m.leaky_slope = leaky_slope;
  const Index c = m.input_channels();
  const Index pixels = rows * cols;
  m.encoder_conv = nn::ConvLayer("encoder.conv", c, 2, rng);
  m.encoder_fc = nn::DenseLayer("encoder.fc", 2 * pixels, codeword_length, rng);
  m.quant_omega = Parameter("quantizer.omega", Tensor::constant({codeword_length}, inverse_softplus(1.0)));
  m.quant_nu = Parameter("quantizer.nu", Tensor::constant({codeword_length}, 1.0));
  m.quant_scale = Eigen::VectorXd::Ones(codeword_length);
  m.decoder_fc = nn::DenseLayer("decoder.fc", codeword_length, c * pixels, rng);
  m.residual1 = nn::ResidualBlock("decoder.res1", 2, rng);
  m.residual2 = nn::ResidualBlock("decoder.res2", 2, rng);
  m.output_conv = nn::ConvLayer("decoder.out", 2, c, rng);
  return m;
}

std::vector<Parameter*> CodecModel::encoder_parameters() {
  std::vector<Parameter*> out;
  encoder_conv.collect(out);
  encoder_fc.collect(out);
  return out;
}

std::vector<Parameter*> CodecModel::quantizer_parameters() { return {&quant_omega, &quant_nu}; }

std::vector<Parameter*> CodecModel::decoder_parameters() {
  std::vector<Parameter*> out;
  decoder_fc.collect(out);
  residual1.collect(out);
  residual2.collect(out);
  output_conv.collect(out);
  return out;
}

std::vector<Parameter*> CodecModel::all_parameters() {
  std::vector<Parameter*> out = encoder_parameters();
  for (Parameter* p : quantizer_parameters()) out.push_back(p);
  for (Parameter* p : decoder_parameters()) out.push_back(p);
  return out;
}

std::vector<const Parameter*> CodecModel::all_parameters() const {
  auto ps = const_cast<CodecModel*>(this)->all_parameters();
  return {ps.begin(), ps.end()};
}

quant::QuantizerParams CodecModel::learned_params() const {
  quant::QuantizerParams p;
  p.w = quant_scale.cwiseProduct(quant_omega.value.data().unaryExpr([](double o) { return softplus(o); }));
  p.v = quant_nu.value.data().cwiseQuotient(quant_scale);
  p.bits = quantizer.kind == quant::QuantizerKind::learned ? quantizer.bits : quantizer.learned.bits;
  p.sharpness = quantizer.learned.sharpness;
  return p;
}

void CodecModel::set_learned_params(const Eigen::VectorXd& w, const Eigen::VectorXd& v) {
  if (w.size() != codeword_length || v.size() != codeword_length) {
    throw ContractError("codec: quantizer weights must have length M = " + std::to_string(codeword_length));
  }
  if ((w.array() <= 0.0).any()) throw ContractError("codec: forward weights must be positive");
  quant_scale = w;
  quant_omega.value.data().setConstant(inverse_softplus(1.0));
  quant_nu.value.data() = v.cwiseProduct(w);
}

quant::CodewordQuantizer CodecModel::effective_quantizer() const {
  quant::CodewordQuantizer q = quantizer;
  if (q.kind == quant::QuantizerKind::learned) {
    q.learned = learned_params();
    q.learned.bits = q.bits;
  }
  return q;
}

// ------------------------------------------------------------------- data

namespace {

std::vector<RealMatrix> magnitudes(const std::vector<ComplexMatrix>& xs) {
  std::vector<RealMatrix> out;
  out.reserve(xs.size());
  for (const auto& x : xs) out.emplace_back(x.cwiseAbs());
  return out;
}

void check_dataset(const CodecModel& model, const Dataset& data) {
  if (data.size() == 0) throw ContractError("codec: empty dataset");
  if (data.delay_rows != model.rows || data.antennas != model.cols) {
    throw ContractError("codec: dataset is " + std::to_string(data.delay_rows) + "x" + std::to_string(data.antennas) +
                        " but the model expects " + std::to_string(model.rows) + "x" + std::to_string(model.cols));
  }
  if (model.variant == Variant::dualq && !data.has_uplink()) {
    throw ContractError("codec: DualQ needs uplink magnitudes as side information");
  }
}

void put_plane(Tensor& t, Index offset, const RealMatrix& plane) {
  // Row-major (delay row, antenna) order.
  for (Index r = 0; r < plane.rows(); ++r)
    for (Index c = 0; c < plane.cols(); ++c) t[offset + r * plane.cols() + c] = plane(r, c);
}

RealMatrix get_plane(const Tensor& t, Index offset, Index rows, Index cols) {
  RealMatrix plane(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) plane(r, c) = t[offset + r * cols + c];
  return plane;
}

Tensor gather_rows(const Tensor& t, std::span<const Index> rows) {
  Shape shape = t.shape();
  const Index stride = t.size() / shape[0];
  shape[0] = Index(rows.size());
  Tensor out(shape);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.data().segment(Index(i) * stride, stride) = t.data().segment(rows[i] * stride, stride);
  }
  return out;
}

Tensor slice_rows(const Tensor& t, Index begin, Index end) {
  std::vector<Index> idx(std::size_t(end - begin));
  std::iota(idx.begin(), idx.end(), begin);
  return gather_rows(t, idx);
}

Tensor matrix_to_tensor(const Eigen::MatrixXd& m) {
  Tensor t({m.rows(), m.cols()});
  t.matrix(m.rows(), m.cols()) = m;
  return t;
}

constexpr Index kEvalChunk = 128;

}  // namespace

void fit_normalization(CodecModel& model, const Dataset& data) {
  check_dataset(model, data);
  model.subcarriers = data.subcarriers;
  if (model.variant == Variant::csiq) {
    model.norm = NormStats::fit(std::span<const ComplexMatrix>(data.downlink));
  } else {
    model.norm = NormStats::fit(std::span<const RealMatrix>(magnitudes(data.downlink)));
    model.uplink_norm = NormStats::fit(std::span<const RealMatrix>(magnitudes(data.uplink)));
  }
}

PreparedData prepare(const CodecModel& model, const Dataset& data) {
  check_dataset(model, data);
  const Index n = data.size(), q = model.rows, b = model.cols, c = model.input_channels();
  PreparedData out;
  out.inputs = Tensor({n, c, q, b});
  for (Index i = 0; i < n; ++i) {
    const ComplexMatrix& h = data.downlink[std::size_t(i)];
    if (model.variant == Variant::csiq) {
      put_plane(out.inputs, (i * 2) * q * b, model.norm.normalize(h.real()));
      put_plane(out.inputs, (i * 2 + 1) * q * b, model.norm.normalize(h.imag()));
    } else {
      put_plane(out.inputs, i * q * b, model.norm.normalize(RealMatrix(h.cwiseAbs())));
    }
  }
  if (model.variant == Variant::dualq) {
    Tensor side({n, 1, q, b});
    for (Index i = 0; i < n; ++i) {
      put_plane(side, i * q * b, model.uplink_norm.normalize(RealMatrix(data.uplink[std::size_t(i)].cwiseAbs())));
    }
    out.side = std::move(side);
  }
  return out;
}

// ----------------------------------------------------------------- graphs

Var encoder_graph(Tape& tape, CodecModel& model, Var x) {
  const Shape xs = x.shape();
  if (xs.size() != 4 || xs[1] != model.input_channels() || xs[2] != model.rows || xs[3] != model.cols) {
    throw ContractError("encoder: expected input [B," + std::to_string(model.input_channels()) + "," +
                        std::to_string(model.rows) + "," + std::to_string(model.cols) + "], got " + shape_string(xs));
  }
  Var h = gf::leaky_relu(model.encoder_conv(tape, x), model.leaky_slope);
  h = gf::reshape(h, {xs[0], 2 * model.rows * model.cols});
  return model.encoder_fc(tape, h);
}

namespace {

Var forward_weights(Tape& tape, CodecModel& model) {
  return gf::mul(gf::softplus(tape.parameter(model.quant_omega)), tape.constant(Tensor({model.codeword_length}, model.quant_scale)));
}

}  // namespace

Var soft_quantizer_graph(Tape& tape, CodecModel& model, Var s, double sharpness) {
  Var u = gf::mul_broadcast(s, forward_weights(tape, model));
  Var k = quant::soft_round(u, model.quantizer.bits, sharpness);
  Var v = gf::mul(tape.parameter(model.quant_nu), tape.constant(Tensor({model.codeword_length}, model.quant_scale.cwiseInverse())));
  return gf::mul_broadcast(k, v);
}

Var decoder_graph(Tape& tape, CodecModel& model, Var s_hat, std::optional<Var> side) {
  const Index batch = s_hat.shape().front();
  const Index c = model.input_channels();
  if (model.variant == Variant::dualq && !side) throw ContractError("decoder: DualQ requires side information");
  if (model.variant == Variant::csiq && side) throw ContractError("decoder: CsiQ takes no side information");
  Var h = model.decoder_fc(tape, s_hat);
  h = gf::reshape(h, {batch, c, model.rows, model.cols});
  if (side) {
    if (side->shape() != Shape{batch, 1, model.rows, model.cols}) {
      throw ContractError("decoder: side information has shape " + shape_string(side->shape()));
    }
    h = gf::concat(h, *side, 1);
  }
  h = gf::leaky_relu(model.residual1(tape, h, model.leaky_slope), model.leaky_slope);
  h = gf::leaky_relu(model.residual2(tape, h, model.leaky_slope), model.leaky_slope);
  return gf::sigmoid(model.output_conv(tape, h));
}

Var loss_graph(Tape& tape, CodecModel& model, const Tensor& inputs, const std::optional<Tensor>& side, TrainMode mode,
               double lambda, double sharpness, quant::RegularizerNorm norm, const Tensor* precomputed_codewords) {
  Var x = tape.constant(inputs);
  std::optional<Var> side_var;
  if (side) side_var = tape.constant(*side);
  Var s_hat;
  if (precomputed_codewords) {
    s_hat = tape.constant(*precomputed_codewords);
  } else {
    Var s = encoder_graph(tape, model, x);
    s_hat = mode == TrainMode::joint ? soft_quantizer_graph(tape, model, s, sharpness) : s;
  }
  Var loss = gf::mse(decoder_graph(tape, model, s_hat, side_var), x);
  if (mode == TrainMode::joint && lambda > 0.0) {
    loss = gf::add(loss, gf::scale(quant::quantizer_regularizer(forward_weights(tape, model), norm), lambda));
  }
  return loss;
}

// -------------------------------------------------------------- inference

Eigen::VectorXd encode_csi(const CodecModel& model, const Tensor& planes) {
  const Shape expected{model.input_channels(), model.rows, model.cols};
  if (planes.shape() != expected) {
    throw ContractError("encode: expected planes " + shape_string(expected) + ", got " + shape_string(planes.shape()));
  }
  CodecModel m = model;
  Tape tape(false);
  Var s = encoder_graph(tape, m, tape.constant(planes.reshaped({1, expected[0], expected[1], expected[2]})));
  return s.value().data();
}

Tensor decode_csi(const CodecModel& model, const Eigen::VectorXd& s_hat, const std::optional<Tensor>& side_info) {
  if (s_hat.size() != model.codeword_length) {
    throw ContractError("decode: codeword length " + std::to_string(s_hat.size()) + " != M = " +
                        std::to_string(model.codeword_length));
  }
  if (model.variant == Variant::dualq && !side_info) throw ContractError("decode: DualQ requires uplink magnitude");
  if (model.variant == Variant::csiq && side_info) throw ContractError("decode: CsiQ takes no side information");
  std::optional<Tensor> side;
  if (side_info) {
    const Shape expected{1, model.rows, model.cols};
    if (side_info->shape() != expected) {
      throw ContractError("decode: side information must be " + shape_string(expected) + ", got " +
                          shape_string(side_info->shape()));
    }
    side = side_info->reshaped({1, 1, model.rows, model.cols});
  }
  Tensor planes = decode_all(model, s_hat.transpose(), side);
  return planes.reshaped({model.input_channels(), model.rows, model.cols});
}

Eigen::MatrixXd encode_all(const CodecModel& model, const PreparedData& data) {
  CodecModel m = model;
  const Index n = data.size();
  Eigen::MatrixXd out(n, model.codeword_length);
  for (Index begin = 0; begin < n; begin += kEvalChunk) {
    const Index end = std::min(n, begin + kEvalChunk);
    Tape tape(false);
    Var s = encoder_graph(tape, m, tape.constant(slice_rows(data.inputs, begin, end)));
    out.middleRows(begin, end - begin) = s.value().matrix(end - begin, model.codeword_length);
  }
  return out;
}

Tensor decode_all(const CodecModel& model, const Eigen::MatrixXd& s_hat, const std::optional<Tensor>& side) {
  CodecModel m = model;
  const Index n = s_hat.rows(), c = model.input_channels();
  if (s_hat.cols() != model.codeword_length) throw ContractError("decode: codeword width != M");
  if (side && side->dim(0) != n) throw ContractError("decode: side information count mismatch");
  Tensor out({n, c, model.rows, model.cols});
  const Index stride = c * model.rows * model.cols;
  for (Index begin = 0; begin < n; begin += kEvalChunk) {
    const Index end = std::min(n, begin + kEvalChunk);
    Tape tape(false);
    std::optional<Var> side_var;
    if (side) side_var = tape.constant(slice_rows(*side, begin, end));
    Var y = decoder_graph(tape, m, tape.constant(matrix_to_tensor(s_hat.middleRows(begin, end - begin))), side_var);
    out.data().segment(begin * stride, (end - begin) * stride) = y.value().data();
  }
  return out;
}

std::vector<ComplexMatrix> planes_to_csi(const CodecModel& model, const Tensor& planes) {
  const Index q = model.rows, b = model.cols, c = model.input_channels();
  if (planes.rank() != 4 || planes.dim(1) != c || planes.dim(2) != q || planes.dim(3) != b) {
    throw ContractError("planes_to_csi: unexpected shape " + shape_string(planes.shape()));
  }
  std::vector<ComplexMatrix> out;
  out.reserve(std::size_t(planes.dim(0)));
  for (Index i = 0; i < planes.dim(0); ++i) {
    ComplexMatrix h(q, b);
    if (model.variant == Variant::csiq) {
      h.real() = model.norm.denormalize(get_plane(planes, (i * 2) * q * b, q, b));
      h.imag() = model.norm.denormalize(get_plane(planes, (i * 2 + 1) * q * b, q, b));
    } else {
      h.real() = model.norm.denormalize(get_plane(planes, i * q * b, q, b));
      h.imag().setZero();
    }
    out.push_back(std::move(h));
  }
  return out;
}

std::vector<ComplexMatrix> reference_csi(const CodecModel& model, const Dataset& data) {
  if (model.variant == Variant::csiq) return data.downlink;
  std::vector<ComplexMatrix> out;
  out.reserve(data.downlink.size());
  for (const auto& h : data.downlink) out.emplace_back(h.cwiseAbs().cast<channel::Complex>());
  return out;
}

EvalResult evaluate(const CodecModel& model, const Dataset& data, const EvalOptions& options) {
  const PreparedData prepared = prepare(model, data);
  EvalResult r;
  r.codewords = encode_all(model, prepared);
  const quant::CodewordQuantizer q = model.effective_quantizer();
  if (options.bypass_quantizer || q.kind == quant::QuantizerKind::none) {
    if (options.truncate_bits > 0) throw ContractError("evaluate: truncation needs a quantizer");
    r.quantized = r.codewords;
  } else {
    const Index n = r.codewords.rows(), m = r.codewords.cols();
    r.quantized.resize(n, m);
    r.indices.resize(n, m);
    const bool truncating = options.truncate_bits > 0 && options.truncate_bits != q.bits;
    if (truncating && q.kind != quant::QuantizerKind::learned) {
      throw ContractError("evaluate: index truncation applies to the learned quantizer only");
    }
    for (Index i = 0; i < n; ++i) {
      const Eigen::VectorXd s = r.codewords.row(i).transpose();
      Eigen::VectorXi k = q.index(s);
      if (truncating) {
        const quant::IndexVector kt = quant::truncate_index({k, q.bits}, options.truncate_bits);
        r.indices.row(i) = kt.k.transpose();
        r.quantized.row(i) = quant::truncated_inverse(kt, q.bits, q.learned).transpose();
      } else {
        r.indices.row(i) = k.transpose();
        r.quantized.row(i) = q.reconstruct(k).transpose();
      }
    }
  }
  r.reconstruction = planes_to_csi(model, decode_all(model, r.quantized, prepared.side));
  r.reference = reference_csi(model, data);
  return r;
}

// --------------------------------------------------------------- training

quant::CodewordQuantizer fit_uniform(const Eigen::MatrixXd& codewords, int bits) {
  if (codewords.size() == 0) throw ContractError("fit_uniform: no codewords");
  return quant::CodewordQuantizer::uniform(codewords.minCoeff(), codewords.maxCoeff(), bits);
}

quant::CodewordQuantizer fit_mu_law(const Eigen::MatrixXd& codewords, int bits) {
  if (codewords.size() == 0) throw ContractError("fit_mu_law: no codewords");
  return quant::CodewordQuantizer::mu_law(codewords.cwiseAbs().maxCoeff(), bits);
}

CodecModel with_quantizer(const CodecModel& model, const quant::CodewordQuantizer& q) {
  CodecModel out = model;
  out.quantizer = q;
  out.symbol_freq.clear();
  if (q.kind == quant::QuantizerKind::learned) out.set_learned_params(q.learned.w, q.learned.v);
  return out;
}

std::vector<std::uint64_t> index_histogram(const CodecModel& model, const Dataset& data) {
  const quant::CodewordQuantizer q = model.effective_quantizer();
  if (q.kind == quant::QuantizerKind::none) return {};
  const Eigen::MatrixXd s = encode_all(model, prepare(model, data));
  std::vector<std::uint64_t> counts(std::size_t(q.index_max() - q.index_min() + 1), 0);
  for (Index i = 0; i < s.rows(); ++i) {
    const Eigen::VectorXi k = q.index(s.row(i).transpose());
    for (Index j = 0; j < k.size(); ++j) ++counts[std::size_t(k[j] - q.index_min())];
  }
  return counts;
}

namespace {

void check_compatible(const CodecModel& model, const TrainConfig& cfg, const Dataset& data) {
  if (model.variant != cfg.variant) {
    throw ContractError("codec: initial model is " + to_string(model.variant) + " but the config asks for " +
                        to_string(cfg.variant));
  }
  if (model.codeword_length != cfg.codeword_length) {
    throw ContractError("codec: initial model has M = " + std::to_string(model.codeword_length) +
                        " but the config asks for M = " + std::to_string(cfg.codeword_length));
  }
  check_dataset(model, data);
}

}  // namespace

CodecModel initialize_from(const CodecModel& source, const TrainConfig& cfg, const Dataset& data) {
  check_compatible(source, cfg, data);
  CodecModel model = source;
  const Eigen::MatrixXd s = encode_all(model, prepare(model, data));
  // Per element, +-max|s_i| lands on the outermost cell centres.
  const Eigen::VectorXd span = s.cwiseAbs().colwise().maxCoeff().transpose().cwiseMax(1e-12);
  const Eigen::VectorXd w = (std::ldexp(1.0, cfg.bits - 1) - 0.5) * span.cwiseInverse();
  model.quantizer = quant::CodewordQuantizer{};
  model.quantizer.kind = quant::QuantizerKind::learned;
  model.quantizer.bits = cfg.bits;
  model.quantizer.learned.bits = cfg.bits;
  model.quantizer.learned.sharpness = cfg.sharpness.cap;
  model.set_learned_params(w, w.cwiseInverse());
  return model;
}

CodecModel train(const Dataset& data, const TrainConfig& cfg, const CodecModel* init, TrainLog* log) {
  cfg.validate();
  if (data.size() == 0) throw ContractError("train: empty dataset");

  CodecModel model;
  if (init) {
    check_compatible(*init, cfg, data);
    model = *init;
  } else {
    model = CodecModel::create(cfg.variant, cfg.codeword_length, data.delay_rows, data.antennas, cfg.seed,
                               cfg.leaky_slope);
    fit_normalization(model, data);
  }
  model.leaky_slope = cfg.leaky_slope;

  const PreparedData prepared = prepare(model, data);
  if (!init) {
    // Start the output sigmoid at the mean target. Magnitude planes are mostly
    // near zero, and from 0.5 the first Adam steps overshoot into saturation.
    const Index c = prepared.inputs.dim(1);
    const Index plane = prepared.inputs.size() / (prepared.size() * c);
    for (Index ch = 0; ch < c; ++ch) {
      double total = 0.0;
      for (Index n = 0; n < prepared.size(); ++n)
        for (Index k = 0; k < plane; ++k) total += prepared.inputs[(n * c + ch) * plane + k];
      const double mean = std::clamp(total / double(prepared.size() * plane), 1e-3, 1.0 - 1e-3);
      model.output_conv.bias.value[ch] = std::log(mean / (1.0 - mean));
    }
  }
  std::optional<Tensor> codewords;  // fixed decoder inputs in RD mode
  for (Parameter* p : model.all_parameters()) p->trainable = false;
  std::vector<Parameter*> params;

  switch (cfg.mode) {
    case TrainMode::no_quant_baseline:
      model.quantizer = quant::CodewordQuantizer{};
      params = model.encoder_parameters();
      for (Parameter* p : model.decoder_parameters()) params.push_back(p);
      break;
    case TrainMode::joint:
      if (model.quantizer.kind != quant::QuantizerKind::learned || model.quantizer.bits != cfg.bits) {
        model = initialize_from(model, cfg, data);
      }
      params = model.all_parameters();
      break;
    case TrainMode::retrain_decoder_only: {
      if (!init) throw ContractError("train: rd mode needs a pre-trained model to freeze");
      const Eigen::MatrixXd s = encode_all(model, prepared);
      model.quantizer = cfg.rd_quantizer == quant::QuantizerKind::mu_law ? fit_mu_law(s, cfg.bits)
                                                                           : fit_uniform(s, cfg.bits);
      Eigen::MatrixXd s_hat(s.rows(), s.cols());
      for (Index i = 0; i < s.rows(); ++i) s_hat.row(i) = model.quantizer.apply(s.row(i).transpose()).transpose();
      codewords = matrix_to_tensor(s_hat);
      params = model.decoder_parameters();
      break;
    }
  }
  for (Parameter* p : params) {
    p->trainable = true;
    p->zero_grad();
  }

  gf::Adam adam({cfg.learning_rate});
  std::mt19937_64 rng(channel::derive_seed(cfg.seed, 0x7261696eull));
  std::vector<Index> order(std::size_t(prepared.size()));
  std::iota(order.begin(), order.end(), Index{0});
  TrainLog local;
  TrainLog& out_log = log ? *log : local;
  out_log.epoch_loss.clear();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double r = cfg.sharpness.at(epoch);
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    Index seen = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += std::size_t(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), begin + std::size_t(cfg.batch_size));
      const std::span<const Index> rows(order.data() + begin, end - begin);
      const Tensor x = gather_rows(prepared.inputs, rows);
      std::optional<Tensor> side;
      if (prepared.side) side = gather_rows(*prepared.side, rows);
      std::optional<Tensor> batch_codewords;
      if (codewords) batch_codewords = gather_rows(*codewords, rows);

      Tape tape;
      Var loss = loss_graph(tape, model, x, side, cfg.mode, cfg.lambda, r, cfg.regularizer,
                            batch_codewords ? &*batch_codewords : nullptr);
      const double value = loss.value()[0];
      if (!std::isfinite(value)) {
        throw TrainingError("train: loss became " + std::to_string(value) + " at epoch " + std::to_string(epoch) +
                            " (sharpness " + std::to_string(r) + ", learning rate " +
                            std::to_string(cfg.learning_rate) + "); lower the learning rate or sharpness");
      }
      nn::zero_grads(params);
      tape.backward(loss);
      adam.step(params);
      total += value * double(rows.size());
      seen += Index(rows.size());
    }
    out_log.epoch_loss.push_back(total / double(seen));
    out_log.final_sharpness = r;
  }

  for (Parameter* p : model.all_parameters()) {
    p->trainable = true;
    p->zero_grad();
  }
  if (model.quantizer.kind == quant::QuantizerKind::learned) {
    model.quantizer.learned = model.learned_params();
    model.quantizer.learned.bits = model.quantizer.bits;
  }
  model.symbol_freq = index_histogram(model, data);
  return model;
}

}  // namespace csiq::codec
