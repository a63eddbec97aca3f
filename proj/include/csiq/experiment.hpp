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

// Experiment grids: data generation, training, evaluation and reports.
//
// A grid is enumerated per seed. Each seed owns a dataset, a float baseline
// and the fine-tuned models derived from it; every evaluated combination
// becomes one report row. Rows are written to CSV in enumeration order, so
// the report does not depend on the worker count.

#ifndef CSIQ_EXPERIMENT_HPP
#define CSIQ_EXPERIMENT_HPP

#include "csiq/channel.hpp"
#include "csiq/codec.hpp"
#include "csiq/phaseq.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace csiq::experiment {

/// Preset channel configurations; throws ContractError for unknown names.
channel::ChannelConfig scenario_preset(const std::string& name);
/// Applies the fields present in a JSON object text to `base`.
channel::ChannelConfig parse_channel_config(const std::string& json_text, channel::ChannelConfig base);
std::string channel_config_json(const channel::ChannelConfig& cfg);

struct TrainingBudget {
  int epochs = 40;
  int batch_size = 50;
  double learning_rate = 1e-3;
  codec::SharpnessSchedule sharpness;
};

struct PhaseSweep {
  std::vector<double> lambdas;  // PhaseQuan entropy weights; empty disables phase cells
  int source_bits = 5;          // M_hat comes from the joint model at this width
  bool heuristic = true;        // also report the CDF-threshold allocator
  phaseq::PhaseTrainConfig train;
};

struct ExperimentConfig {
  std::string scenario = "indoor-like";
  channel::ChannelConfig channel = channel::ChannelConfig::indoor_like();
  std::vector<codec::Variant> variants{codec::Variant::csiq};
  Index codeword_length = 32;
  Index train_samples = 600;
  Index test_samples = 200;
  std::vector<int> bits{2, 3, 4};
  std::vector<int> posthoc_bits;   // extra widths evaluated post hoc only
  std::vector<int> joint_bits;     // extra widths trained jointly only
  std::vector<int> truncate_bits;  // bandwidth-limited evaluation of joint models
  std::vector<quant::QuantizerKind> quantizers{quant::QuantizerKind::uniform, quant::QuantizerKind::mu_law,
                                               quant::QuantizerKind::learned};
  std::vector<quant::QuantizerKind> rd_quantizers{quant::QuantizerKind::uniform};
  std::vector<codec::TrainMode> modes{codec::TrainMode::no_quant_baseline, codec::TrainMode::retrain_decoder_only,
                                      codec::TrainMode::joint};
  std::vector<double> lambdas{1e-4};
  std::vector<std::uint64_t> seeds{1};
  TrainingBudget baseline;
  TrainingBudget finetune{12, 50, 1e-3, {25.0, 1.5, 2, 200.0}};
  PhaseSweep phase;
  std::optional<std::filesystem::path> baseline_checkpoint;  // replaces baseline training when set
  bool save_models = true;
  /// Also continue each baseline unquantized for the fine-tune budget ("baseline-ft" rows),
  /// the float reference with the same training as the quantized models.
  bool matched_float = false;

  void validate() const;
  std::string canonical_json() const;
  std::uint64_t hash() const;
  static ExperimentConfig from_json_text(const std::string& text);
};

struct CellRecord {
  std::string scenario;
  codec::Variant variant = codec::Variant::csiq;
  Index m = 0;
  int bits = 0;       // trained / fitted width, 0 for unquantized
  int eval_bits = 0;  // transmitted width (differs under truncation)
  std::string quantizer;
  std::string mode;
  std::string allocator;  // phase cells only
  double lambda = 0.0;
  std::uint64_t seed = 0;
  bool ok = true;
  std::string error;
  double nmse_db = 0.0;
  double nmsqe_db = 0.0;
  double bits_fixed = 0.0;
  double bits_entropy = 0.0;   // static training-set table, each sample its own stream
  double bits_adaptive = 0.0;  // one adaptive stream over the test set
  double mean_phase_bits = 0.0;
  double phase_error = 0.0;
  double seconds = 0.0;  // sidecar only
};

struct Report {
  std::vector<CellRecord> cells;
  std::size_t failures = 0;
  std::filesystem::path csv_path;
  std::filesystem::path sidecar_path;
  std::vector<std::string> warnings;
};

inline constexpr const char* kCsvSchema = "# csiq-report v1";

/// Runs the grid with up to `workers` threads and writes CSV + JSON sidecar
/// into `out_dir` (report.csv, then report.1.csv, ... on later runs).
Report run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out_dir, int workers = 1);

std::string csv_header();
std::string csv_row(const CellRecord& r);

}  // namespace csiq::experiment

#endif  // CSIQ_EXPERIMENT_HPP
