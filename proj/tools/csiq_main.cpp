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

// Command-line front end: dataset generation, training, feedback coding,
// evaluation, experiment grids and PhaseQuan training.

#include "csiq/binary_io.hpp"
#include "csiq/bitstream.hpp"
#include "csiq/channel.hpp"
#include "csiq/checkpoint.hpp"
#include "csiq/codec.hpp"
#include "csiq/experiment.hpp"
#include "csiq/metrics.hpp"
#include "csiq/phaseq.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <filesystem>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>

namespace {

using namespace csiq;
using nlohmann::json;
namespace fs = std::filesystem;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitPartial = 3;

/// Bad command-line values that CLI11 cannot catch on its own.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string read_text(const fs::path& p) {
  const auto bytes = io::read_file(p);
  return std::string(bytes.begin(), bytes.end());
}

void print_json(const json& j) { std::cout << j.dump(2) << "\n"; }

/// Optional guard: the checkpoint must have been trained under `config`.
struct ConfigGuard {
  fs::path config;
  bool allow_mismatch = false;

  void attach(CLI::App* cmd) {
    cmd->add_option("--expect-config", config, "Training config the checkpoint must match");
    cmd->add_flag("--allow-config-mismatch", allow_mismatch, "Load even if the config hash differs");
  }
  codec::CodecModel load(const fs::path& ckpt) const {
    std::optional<std::uint64_t> hash;
    if (!config.empty()) hash = codec::TrainConfig::from_json_text(read_text(config)).hash();
    return checkpoint::load_codec(ckpt, hash, allow_mismatch);
  }
};

// ---------------------------------------------------------------- gen-data

struct GenDataArgs {
  fs::path config, out;
};

int gen_data(const GenDataArgs& a) {
  json j;
  try {
    j = json::parse(read_text(a.config));
  } catch (const json::exception& e) {
    throw DataError("gen-data config: " + std::string(e.what()));
  }
  const std::string scenario = j.value("scenario", std::string("indoor-like"));
  channel::ChannelConfig cfg = experiment::scenario_preset(scenario);
  if (j.contains("channel")) cfg = experiment::parse_channel_config(j.at("channel").dump(), cfg);
  cfg.validate();
  const Index samples = j.value("samples", Index{1000});
  if (samples < 1) throw UsageError("gen-data: samples must be >= 1");
  const bool uplink = j.value("uplink", true);
  const Index first = j.value("first_index", Index{0});
  const channel::Dataset data = channel::generate_dataset(cfg, samples, uplink, first);
  channel::write_dataset(a.out, data);
  print_json({{"out", a.out.string()},
              {"samples", samples},
              {"antennas", cfg.antennas},
              {"subcarriers", cfg.subcarriers},
              {"delay_rows", cfg.delay_rows},
              {"content_hash", io::hex64(io::fnv1a(io::read_file(a.out)))}});
  return kExitOk;
}

// ------------------------------------------------------------------- train

struct TrainArgs {
  fs::path config, data, out, init_from;
  std::string mode;
};

int train(const TrainArgs& a) {
  codec::TrainConfig cfg = codec::TrainConfig::from_json_text(read_text(a.config));
  if (!a.mode.empty()) cfg.mode = codec::train_mode_from_string(a.mode);
  cfg.validate();
  const channel::Dataset data = channel::read_dataset(a.data);
  std::optional<codec::CodecModel> init;
  if (!a.init_from.empty()) init = checkpoint::load_codec(a.init_from);
  if (cfg.mode == codec::TrainMode::retrain_decoder_only && !init) {
    throw UsageError("train: --mode rd needs --init-from <baseline checkpoint>");
  }
  codec::TrainLog log;
  const codec::CodecModel model = codec::train(data, cfg, init ? &*init : nullptr, &log);
  checkpoint::save(a.out, model, cfg.canonical_json());
  print_json({{"out", a.out.string()},
              {"mode", codec::to_string(cfg.mode)},
              {"epochs", cfg.epochs},
              {"first_loss", log.epoch_loss.front()},
              {"final_loss", log.epoch_loss.back()},
              {"config_hash", io::hex64(cfg.hash())}});
  return kExitOk;
}

// ------------------------------------------------------------------ encode

struct EncodeArgs {
  fs::path ckpt, data, out;
  int bits = 0;
  bool entropy = false;
  std::string coder = "adaptive";
  ConfigGuard guard;
};

int encode(const EncodeArgs& a) {
  const codec::CodecModel model = a.guard.load(a.ckpt);
  const quant::CodewordQuantizer q = model.effective_quantizer();
  if (q.kind == quant::QuantizerKind::none) throw UsageError("encode: checkpoint has no quantizer (baseline model)");
  const bool truncating = a.bits > 0 && a.bits != q.bits;
  if (a.bits > q.bits) throw UsageError("encode: --bits cannot exceed the trained width " + std::to_string(q.bits));
  if (truncating && q.kind != quant::QuantizerKind::learned) {
    throw UsageError("encode: --bits truncation applies to learned (CQNet) quantizers only");
  }
  const bits::CoderMode mode = a.entropy ? bits::coder_mode_from_string(a.coder) : bits::CoderMode::fixed;
  const bits::SymbolMap map = truncating ? bits::SymbolMap::signed_bits(a.bits) : bits::SymbolMap::for_quantizer(q);
  std::optional<bits::SymbolModel> table;
  if (mode == bits::CoderMode::static_table) {
    if (truncating) throw UsageError("encode: static tables describe the trained width; use --coder adaptive");
    if (model.symbol_freq.empty()) throw DataError("encode: checkpoint carries no symbol frequency table");
    table = bits::SymbolModel::from_counts(model.symbol_freq);
  }

  const channel::Dataset data = channel::read_dataset(a.data);
  codec::EvalOptions opt;
  opt.truncate_bits = truncating ? a.bits : 0;
  const codec::EvalResult r = codec::evaluate(model, data, opt);

  std::vector<bits::FeedbackRecord> records;
  std::size_t total_bits = 0;
  for (Index i = 0; i < r.indices.rows(); ++i) {
    bits::FeedbackRecord rec;
    rec.variant = model.variant == codec::Variant::csiq ? 0 : 1;
    rec.m = std::uint32_t(model.codeword_length);
    rec.bits = std::uint8_t(truncating ? a.bits : q.bits);
    rec.mode = mode;
    rec.payload = bits::encode_indices(r.indices.row(i).transpose(), map, mode, table ? &*table : nullptr);
    total_bits += rec.payload.bit_length();
    records.push_back(std::move(rec));
  }
  bits::write_feedback_file(a.out, records);
  print_json({{"out", a.out.string()},
              {"records", records.size()},
              {"coder", bits::to_string(mode)},
              {"bits", truncating ? a.bits : q.bits},
              {"bits_per_value", double(total_bits) / double(std::max<Index>(r.indices.size(), 1))}});
  return kExitOk;
}

// ------------------------------------------------------------------ decode

struct DecodeArgs {
  fs::path ckpt, feedback, uplink, out;
  ConfigGuard guard;
};

int decode(const DecodeArgs& a) {
  const codec::CodecModel model = a.guard.load(a.ckpt);
  const quant::CodewordQuantizer q = model.effective_quantizer();
  if (q.kind == quant::QuantizerKind::none) throw UsageError("decode: checkpoint has no quantizer (baseline model)");
  const auto records = bits::read_feedback_file(a.feedback);
  const Index n = Index(records.size());
  const std::uint8_t variant = model.variant == codec::Variant::csiq ? 0 : 1;

  Eigen::MatrixXd s_hat(n, model.codeword_length);
  std::optional<bits::SymbolModel> table;
  for (Index i = 0; i < n; ++i) {
    const bits::FeedbackRecord& rec = records[std::size_t(i)];
    if (rec.variant != variant) throw DataError("decode: record " + std::to_string(i) + " was produced by another variant");
    if (Index(rec.m) != model.codeword_length) {
      throw DataError("decode: record " + std::to_string(i) + " has M = " + std::to_string(rec.m) + ", checkpoint has " +
                      std::to_string(model.codeword_length));
    }
    if (rec.bits > q.bits || rec.bits < 1) throw DataError("decode: record " + std::to_string(i) + " has an invalid width");
    const bool truncated = rec.bits != q.bits;
    if (truncated && q.kind != quant::QuantizerKind::learned) throw DataError("decode: truncated record for a non-learned quantizer");
    const bits::SymbolMap map = truncated ? bits::SymbolMap::signed_bits(rec.bits) : bits::SymbolMap::for_quantizer(q);
    if (rec.mode == bits::CoderMode::static_table && !table) {
      if (model.symbol_freq.empty()) throw DataError("decode: checkpoint carries no symbol frequency table");
      table = bits::SymbolModel::from_counts(model.symbol_freq);
    }
    const Eigen::VectorXi k = bits::decode_indices(rec.payload, model.codeword_length, map, rec.mode, table ? &*table : nullptr);
    s_hat.row(i) = truncated ? quant::truncated_inverse({k, rec.bits}, q.bits, q.learned).transpose()
                             : q.reconstruct(k).transpose();
  }

  std::optional<Tensor> side;
  channel::Dataset out;
  out.antennas = model.cols;
  out.delay_rows = model.rows;
  out.subcarriers = model.subcarriers;
  if (model.variant == codec::Variant::dualq) {
    if (a.uplink.empty()) throw UsageError("decode: DualQ needs --uplink <dataset with uplink CSI>");
    const channel::Dataset ul = channel::read_dataset(a.uplink);
    if (ul.size() != n) throw DataError("decode: uplink dataset has " + std::to_string(ul.size()) + " samples, feedback has " + std::to_string(n));
    side = codec::prepare(model, ul).side;
    out.magnitude_only = true;
  } else if (!a.uplink.empty()) {
    throw UsageError("decode: CsiQ takes no --uplink side information");
  }
  out.downlink = codec::planes_to_csi(model, codec::decode_all(model, s_hat, side));
  channel::write_dataset(a.out, out);
  print_json({{"out", a.out.string()}, {"samples", n}, {"magnitude_only", out.magnitude_only}});
  return kExitOk;
}

// -------------------------------------------------------------------- eval

struct EvalArgs {
  fs::path ckpt, data;
  std::string metrics = "nmse,nmsqe,rate";
  int bits = 0;
  bool bypass = false;
  ConfigGuard guard;
};

int eval(const EvalArgs& a) {
  std::set<std::string> wanted;
  std::stringstream ss(a.metrics);
  for (std::string m; std::getline(ss, m, ',');) {
    if (m != "nmse" && m != "nmsqe" && m != "rate") throw UsageError("eval: unknown metric '" + m + "'");
    wanted.insert(m);
  }
  const codec::CodecModel model = a.guard.load(a.ckpt);
  const channel::Dataset data = channel::read_dataset(a.data);
  codec::EvalOptions opt;
  opt.bypass_quantizer = a.bypass;
  opt.truncate_bits = a.bits;
  const codec::EvalResult r = codec::evaluate(model, data, opt);
  json out{{"samples", data.size()}, {"variant", codec::to_string(model.variant)}, {"M", model.codeword_length}};
  const quant::CodewordQuantizer q = model.effective_quantizer();
  out["quantizer"] = a.bypass ? "none" : quant::to_string(q.kind);
  if (wanted.count("nmse")) {
    const auto v = metrics::nmse(r.reference, r.reconstruction);
    out["nmse"] = v.linear;
    out["nmse_db"] = v.db();
    out["nmse_excluded"] = v.excluded;
  }
  if (wanted.count("nmsqe")) {
    const auto v = metrics::nmsqe(r.codewords, r.quantized);
    out["nmsqe"] = v.linear;
    out["nmsqe_db"] = v.db();
  }
  if (wanted.count("rate") && r.indices.size() > 0) {
    const int width = a.bits > 0 ? a.bits : q.bits;
    const bits::SymbolMap map =
        a.bits > 0 && a.bits != q.bits ? bits::SymbolMap::signed_bits(a.bits) : bits::SymbolMap::for_quantizer(q);
    out["bits"] = width;
    out["rate_fixed"] = bits::measure_rate(r.indices, map, bits::CoderMode::fixed);
    out["rate_adaptive_per_sample"] = bits::measure_rate(r.indices, map, bits::CoderMode::adaptive);
    out["rate_adaptive_stream"] = bits::measure_rate(r.indices, map, bits::CoderMode::adaptive, nullptr, true);
    if (!model.symbol_freq.empty() && map.alphabet() == int(model.symbol_freq.size())) {
      const auto table = bits::SymbolModel::from_counts(model.symbol_freq);
      out["rate_static"] = bits::measure_rate(r.indices, map, bits::CoderMode::static_table, &table);
    }
  }
  print_json(out);
  return kExitOk;
}

// -------------------------------------------------------------- experiment

struct ExperimentArgs {
  fs::path config, out;
  int workers = 1;
};

int run_experiment(const ExperimentArgs& a) {
  if (a.workers < 1) throw UsageError("experiment: --workers must be >= 1");
  const auto cfg = experiment::ExperimentConfig::from_json_text(read_text(a.config));
  const auto report = experiment::run_experiment(cfg, a.out, a.workers);
  for (const auto& w : report.warnings) std::cerr << "warning: " << w << "\n";
  for (const auto& c : report.cells) {
    if (!c.ok) std::cerr << "cell failed (" << codec::to_string(c.variant) << ", " << c.mode << ", " << c.quantizer
                         << ", bits " << c.bits << ", seed " << c.seed << "): " << c.error << "\n";
  }
  print_json({{"csv", report.csv_path.string()},
              {"sidecar", report.sidecar_path.string()},
              {"cells", report.cells.size()},
              {"failures", report.failures}});
  return report.failures ? kExitPartial : kExitOk;
}

// ------------------------------------------------------------------- phase

struct PhaseArgs {
  fs::path config, data, magnitudes, out, ckpt;
  std::optional<double> lambda;
  bool heuristic = false;
};

/// Decoder-side magnitudes: a magnitude-only dataset when given, else |H_d|.
std::vector<channel::RealMatrix> phase_magnitudes(const channel::Dataset& data, const fs::path& magnitudes) {
  std::vector<channel::RealMatrix> out;
  if (magnitudes.empty()) {
    for (const auto& h : data.downlink) out.emplace_back(h.cwiseAbs());
    return out;
  }
  const channel::Dataset m = channel::read_dataset(magnitudes);
  if (m.size() != data.size() || m.delay_rows != data.delay_rows || m.antennas != data.antennas) {
    throw DataError("magnitude dataset does not match the CSI dataset");
  }
  for (const auto& h : m.downlink) out.emplace_back(h.cwiseAbs());
  return out;
}

int phase_train(const PhaseArgs& a) {
  phaseq::PhaseTrainConfig cfg;
  if (!a.config.empty()) cfg = phaseq::PhaseTrainConfig::from_json_text(read_text(a.config));
  if (a.lambda) cfg.lambda = *a.lambda;
  cfg.validate();
  const channel::Dataset data = channel::read_dataset(a.data);
  if (data.magnitude_only) throw DataError("phase-train: --data must carry complex CSI");
  std::vector<double> loss;
  const auto model = phaseq::train_phasequan(phase_magnitudes(data, a.magnitudes), cfg, &loss);
  checkpoint::save(a.out, model, cfg.canonical_json());
  print_json({{"out", a.out.string()}, {"lambda", cfg.lambda}, {"first_loss", loss.front()}, {"final_loss", loss.back()}});
  return kExitOk;
}

int phase_eval(const PhaseArgs& a) {
  const channel::Dataset data = channel::read_dataset(a.data);
  if (data.magnitude_only) throw DataError("phase-eval: --data must carry complex CSI");
  const auto mags = phase_magnitudes(data, a.magnitudes);
  std::vector<phaseq::BitAllocation> alloc;
  double lambda = a.lambda.value_or(0.0);
  json out{{"samples", data.size()}};
  if (a.heuristic) {
    // Thresholds from the evaluated magnitudes themselves.
    const auto h = phaseq::HeuristicAllocator::fit(mags);
    for (const auto& m : mags) alloc.push_back(h.allocate(m));
    out["allocator"] = "heuristic";
    out["thresholds"] = h.thresholds;
  } else {
    if (a.ckpt.empty()) throw UsageError("phase-eval: give --ckpt <PhaseQuan checkpoint> or --heuristic");
    const auto model = checkpoint::load_phasequan(a.ckpt);
    if (!a.lambda) lambda = model.lambda;
    alloc = phaseq::phasequan_forward_all(model, mags);
    out["allocator"] = "phasequan";
  }
  double bits = 0.0, err = 0.0, loss = 0.0;
  bool bound = true;
  for (std::size_t i = 0; i < alloc.size(); ++i) {
    const auto mp = channel::split_mag_phase(data.downlink[i]);
    const auto qp = phaseq::quantize_phase(mp.phase, alloc[i]);
    bits += alloc[i].mean();
    err += phaseq::weighted_phase_error(mags[i], mp.phase, qp.phase);
    loss += phaseq::phase_loss(mags[i], mp.phase, qp.phase, alloc[i], lambda);
    bound = bound && phaseq::verify_upper_bound(mp.magnitude, mp.phase, qp.phase, mags[i]);
  }
  const double n = double(std::max<std::size_t>(alloc.size(), 1));
  out["mean_bits"] = bits / n;
  out["weighted_phase_error"] = err / n;
  out["lambda"] = lambda;
  out["loss"] = loss / n;
  out["upper_bound_holds"] = bound;
  print_json(out);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CSI feedback compression with learned quantization"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic CSI dataset");
  gen_cmd->add_option("--config", gen.config, "JSON generator config")->required();
  gen_cmd->add_option("--out", gen.out, "Output dataset path")->required();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a CsiQ / DualQ model");
  train_cmd->add_option("--config", tr.config, "JSON training config")->required();
  train_cmd->add_option("--data", tr.data, "Training dataset")->required();
  train_cmd->add_option("--out", tr.out, "Output checkpoint")->required();
  train_cmd->add_option("--init-from", tr.init_from, "Checkpoint to start from");
  train_cmd->add_option("--mode", tr.mode, "joint | rd | baseline")
      ->check(CLI::IsMember({"joint", "rd", "baseline"}));

  EncodeArgs enc;
  auto* enc_cmd = app.add_subcommand("encode", "Quantize and serialize codewords into feedback records");
  enc_cmd->add_option("--ckpt", enc.ckpt, "Quantized model checkpoint")->required();
  enc.guard.attach(enc_cmd);
  enc_cmd->add_option("--data", enc.data, "Dataset to encode")->required();
  enc_cmd->add_option("--out", enc.out, "Output feedback file")->required();
  enc_cmd->add_option("--bits", enc.bits, "Transmit only the top bits of each learned index");
  enc_cmd->add_flag("--entropy-code", enc.entropy, "Arithmetic-code the indices");
  enc_cmd->add_option("--coder", enc.coder, "Entropy model: adaptive | static")
      ->check(CLI::IsMember({"adaptive", "static"}));

  DecodeArgs dec;
  auto* dec_cmd = app.add_subcommand("decode", "Reconstruct CSI from feedback records");
  dec_cmd->add_option("--ckpt", dec.ckpt, "Model checkpoint")->required();
  dec.guard.attach(dec_cmd);
  dec_cmd->add_option("--feedback", dec.feedback, "Feedback file")->required();
  dec_cmd->add_option("--uplink", dec.uplink, "Dataset with uplink CSI (DualQ)");
  dec_cmd->add_option("--out", dec.out, "Output dataset")->required();

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  eval_cmd->add_option("--ckpt", ev.ckpt, "Model checkpoint")->required();
  ev.guard.attach(eval_cmd);
  eval_cmd->add_option("--data", ev.data, "Dataset")->required();
  eval_cmd->add_option("--metrics", ev.metrics, "Comma-separated subset of nmse,nmsqe,rate");
  eval_cmd->add_option("--bits", ev.bits, "Evaluate with truncated learned indices");
  eval_cmd->add_flag("--no-quant", ev.bypass, "Bypass the quantizer");

  ExperimentArgs ex;
  auto* exp_cmd = app.add_subcommand("experiment", "Run an experiment grid");
  exp_cmd->add_option("--config", ex.config, "JSON experiment config")->required();
  exp_cmd->add_option("--out", ex.out, "Output directory")->required();
  exp_cmd->add_option("--workers", ex.workers, "Parallel grid cells");

  PhaseArgs pt;
  auto* pt_cmd = app.add_subcommand("phase-train", "Train a PhaseQuan bit allocator");
  pt_cmd->add_option("--data", pt.data, "Dataset with complex downlink CSI")->required();
  pt_cmd->add_option("--magnitudes", pt.magnitudes, "Decoder-side magnitudes (magnitude-only dataset)");
  pt_cmd->add_option("--config", pt.config, "JSON PhaseQuan training config");
  pt_cmd->add_option("--lambda", pt.lambda, "Entropy weight");
  pt_cmd->add_option("--out", pt.out, "Output checkpoint")->required();

  PhaseArgs pe;
  auto* pe_cmd = app.add_subcommand("phase-eval", "Evaluate phase bit allocation");
  pe_cmd->add_option("--data", pe.data, "Dataset with complex downlink CSI")->required();
  pe_cmd->add_option("--magnitudes", pe.magnitudes, "Decoder-side magnitudes (magnitude-only dataset)");
  pe_cmd->add_option("--ckpt", pe.ckpt, "PhaseQuan checkpoint");
  pe_cmd->add_flag("--heuristic", pe.heuristic, "Use the CDF-threshold allocator instead");
  pe_cmd->add_option("--lambda", pe.lambda, "Entropy weight used in the reported loss");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen_cmd) return gen_data(gen);
    if (*train_cmd) return train(tr);
    if (*enc_cmd) return encode(enc);
    if (*dec_cmd) return decode(dec);
    if (*eval_cmd) return eval(ev);
    if (*exp_cmd) return run_experiment(ex);
    if (*pt_cmd) return phase_train(pt);
    if (*pe_cmd) return phase_eval(pe);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DimensionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
