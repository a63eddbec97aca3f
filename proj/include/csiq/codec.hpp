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

// CsiQ / DualQ encoder-quantizer-decoder networks and their training loops.
//
//   encoder:  conv3x3(C_in -> 2) -> leaky -> FC(2 Qf Nb -> M)
//   quantizer (joint training): s * w -> soft_round(l, r) -> * v,  w = c softplus(omega)
//   decoder:  FC(M -> C Qf Nb) [-> concat uplink magnitude] -> 2 residual blocks
//             -> conv3x3(-> C_out) -> sigmoid
//
// CsiQ carries real/imaginary planes (C_in = C_out = 2). DualQ carries the
// downlink magnitude (C_in = C_out = 1) and the decoder concatenates the
// uplink magnitude into a second feature map before the residual blocks.

#ifndef CSIQ_CODEC_HPP
#define CSIQ_CODEC_HPP

#include "csiq/channel.hpp"
#include "csiq/nn.hpp"
#include "csiq/quantizers.hpp"

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace csiq::codec {

using channel::Dataset;
using channel::NormStats;
using gradflow::Parameter;
using gradflow::Tape;
using gradflow::Var;

enum class Variant { csiq, dualq };
enum class TrainMode { joint, retrain_decoder_only, no_quant_baseline };

std::string to_string(Variant v);
std::string to_string(TrainMode m);
Variant variant_from_string(const std::string& s);
TrainMode train_mode_from_string(const std::string& s);

/// r(epoch) = min(cap, initial * factor^floor(epoch / every)).
struct SharpnessSchedule {
  double initial = 25.0;
  double factor = 1.5;
  int every = 50;
  double cap = 200.0;

  double at(int epoch) const;
};

struct TrainConfig {
  Variant variant = Variant::csiq;
  Index codeword_length = 32;  // M
  int epochs = 200;
  int batch_size = 50;
  double learning_rate = 1e-3;
  double lambda = 1e-4;
  int bits = 5;
  SharpnessSchedule sharpness;
  std::uint64_t seed = 1;
  TrainMode mode = TrainMode::joint;
  double leaky_slope = gradflow::kDefaultLeakySlope;
  quant::RegularizerNorm regularizer = quant::RegularizerNorm::l1;
  quant::QuantizerKind rd_quantizer = quant::QuantizerKind::uniform;

  void validate() const;
  /// Stable JSON text; its FNV-1a hash is the checkpoint config hash.
  std::string canonical_json() const;
  std::uint64_t hash() const;
  static TrainConfig from_json_text(const std::string& text);
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CodecModel {
  Variant variant = Variant::csiq;
  Index codeword_length = 0;
  Index rows = 0;  // Qf
  Index cols = 0;  // Nb
  Index subcarriers = 0;  // Nf of the training data, metadata only
  double leaky_slope = gradflow::kDefaultLeakySlope;

  nn::ConvLayer encoder_conv;
  nn::DenseLayer encoder_fc;
  // w = c * softplus(omega), v = nu / c with c fixed when the weights are set,
  // so Adam moves w and v in relative steps whatever the codeword scale.
  Parameter quant_omega;
  Parameter quant_nu;
  Eigen::VectorXd quant_scale;  // c
  nn::DenseLayer decoder_fc;
  nn::ResidualBlock residual1;
  nn::ResidualBlock residual2;
  nn::ConvLayer output_conv;

  /// kind, bit width and fitted ranges; learned w / v live in the parameters above.
  quant::CodewordQuantizer quantizer;
  NormStats norm;         // downlink (complex parts for CsiQ, magnitude for DualQ)
  NormStats uplink_norm;  // DualQ side information
  /// Training-set histogram of k - index_min, the static entropy-coding table. Empty if unknown.
  std::vector<std::uint64_t> symbol_freq;

  static CodecModel create(Variant variant, Index codeword_length, Index rows, Index cols, std::uint64_t seed,
                           double leaky_slope = gradflow::kDefaultLeakySlope);

  Index input_channels() const { return variant == Variant::csiq ? 2 : 1; }

  std::vector<Parameter*> encoder_parameters();
  std::vector<Parameter*> quantizer_parameters();
  std::vector<Parameter*> decoder_parameters();
  /// Declaration order used by checkpoints.
  std::vector<Parameter*> all_parameters();
  std::vector<const Parameter*> all_parameters() const;

  quant::QuantizerParams learned_params() const;
  /// Also re-bases c to w (omega = softplus^-1(1), nu = v * w).
  void set_learned_params(const Eigen::VectorXd& w, const Eigen::VectorXd& v);
  /// Quantizer with learned weights filled in from the parameters.
  quant::CodewordQuantizer effective_quantizer() const;
};

/// Normalised network inputs: [N, C, Qf, Nb] plus the DualQ side planes [N, 1, Qf, Nb].
struct PreparedData {
  Tensor inputs;
  std::optional<Tensor> side;
  Index size() const { return inputs.rank() ? inputs.dim(0) : 0; }
};

void fit_normalization(CodecModel& model, const Dataset& data);
PreparedData prepare(const CodecModel& model, const Dataset& data);

// Graph builders (shared by training and gradient checks).
Var encoder_graph(Tape& tape, CodecModel& model, Var x);
Var soft_quantizer_graph(Tape& tape, CodecModel& model, Var s, double sharpness);
Var decoder_graph(Tape& tape, CodecModel& model, Var s_hat, std::optional<Var> side);
/// Scalar training loss for one batch under `mode`.
Var loss_graph(Tape& tape, CodecModel& model, const Tensor& inputs, const std::optional<Tensor>& side,
               TrainMode mode, double lambda, double sharpness, quant::RegularizerNorm norm,
               const Tensor* precomputed_codewords = nullptr);

/// Codewords for one normalised sample [C, Qf, Nb].
Eigen::VectorXd encode_csi(const CodecModel& model, const Tensor& planes);
/// Decoded normalised planes [C_out, Qf, Nb]. DualQ requires side info, CsiQ forbids it.
Tensor decode_csi(const CodecModel& model, const Eigen::VectorXd& s_hat, const std::optional<Tensor>& side_info);

/// Codewords of every sample, one row per sample.
Eigen::MatrixXd encode_all(const CodecModel& model, const PreparedData& data);
/// Decoded normalised planes for every row of s_hat.
Tensor decode_all(const CodecModel& model, const Eigen::MatrixXd& s_hat, const std::optional<Tensor>& side);

/// Denormalised reconstruction: complex H for CsiQ, magnitude (as real) for DualQ.
std::vector<channel::ComplexMatrix> planes_to_csi(const CodecModel& model, const Tensor& planes);
/// Reference the reconstruction is compared against (H_d, or |H_d| for DualQ).
std::vector<channel::ComplexMatrix> reference_csi(const CodecModel& model, const Dataset& data);

struct EvalOptions {
  bool bypass_quantizer = false;
  int truncate_bits = 0;  // 0: use the trained bit width
};

struct EvalResult {
  Eigen::MatrixXd codewords;  // s
  Eigen::MatrixXd quantized;  // s_hat fed to the decoder
  Eigen::MatrixXi indices;    // empty when unquantized
  std::vector<channel::ComplexMatrix> reconstruction;
  std::vector<channel::ComplexMatrix> reference;
};

EvalResult evaluate(const CodecModel& model, const Dataset& data, const EvalOptions& options = {});

struct TrainLog {
  std::vector<double> epoch_loss;
  double final_sharpness = 0.0;
};

/// Trains under cfg.mode. joint may start from a baseline (see initialize_from);
/// retrain_decoder_only requires one.
CodecModel train(const Dataset& data, const TrainConfig& cfg, const CodecModel* init = nullptr,
                 TrainLog* log = nullptr);

/// Copies encoder / decoder weights and fits the learned quantizer so the
/// codeword range spans the index range (w_i = (2^(l-1) - 1/2) / max|s_i|).
CodecModel initialize_from(const CodecModel& source, const TrainConfig& cfg, const Dataset& data);

/// Post-hoc quantizers fitted on a model's training codewords.
quant::CodewordQuantizer fit_uniform(const Eigen::MatrixXd& codewords, int bits);
quant::CodewordQuantizer fit_mu_law(const Eigen::MatrixXd& codewords, int bits);
CodecModel with_quantizer(const CodecModel& model, const quant::CodewordQuantizer& q);
/// Histogram of quantizer indices over `data` (k - index_min).
std::vector<std::uint64_t> index_histogram(const CodecModel& model, const Dataset& data);

}  // namespace csiq::codec

#endif  // CSIQ_CODEC_HPP
