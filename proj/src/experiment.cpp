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

#include "csiq/experiment.hpp"

#include "csiq/binary_io.hpp"
#include "csiq/bitstream.hpp"
#include "csiq/checkpoint.hpp"
#include "csiq/metrics.hpp"

#include "json.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <thread>

namespace csiq::experiment {

using nlohmann::json;
using codec::CodecModel;
using codec::TrainMode;
using codec::Variant;
using quant::QuantizerKind;

channel::ChannelConfig scenario_preset(const std::string& name) {
  if (name == "indoor-like") return channel::ChannelConfig::indoor_like();
  if (name == "outdoor-like") return channel::ChannelConfig::outdoor_like();
  throw ContractError("unknown scenario preset '" + name + "' (expected indoor-like or outdoor-like)");
}

namespace {

void apply_channel(const json& j, channel::ChannelConfig& c) {
  if (!j.is_object()) throw DataError("channel config must be a JSON object");
  c.antennas = j.value("antennas", c.antennas);
  c.subcarriers = j.value("subcarriers", c.subcarriers);
  c.delay_rows = j.value("delay_rows", c.delay_rows);
  c.min_paths = j.value("min_paths", c.min_paths);
  c.max_paths = j.value("max_paths", c.max_paths);
  c.delay_spread = j.value("delay_spread", c.delay_spread);
  c.phase_correlation = j.value("phase_correlation", c.phase_correlation);
  c.shadowing_db = j.value("shadowing_db", c.shadowing_db);
  c.seed = j.value("seed", c.seed);
}

json channel_json(const channel::ChannelConfig& c) {
  return json{{"antennas", c.antennas},         {"subcarriers", c.subcarriers},
              {"delay_rows", c.delay_rows},     {"min_paths", c.min_paths},
              {"max_paths", c.max_paths},       {"delay_spread", c.delay_spread},
              {"phase_correlation", c.phase_correlation}, {"shadowing_db", c.shadowing_db},
              {"seed", c.seed}};
}

json budget_json(const TrainingBudget& b) {
  return json{{"epochs", b.epochs},
              {"batch_size", b.batch_size},
              {"learning_rate", b.learning_rate},
              {"sharpness",
               {{"initial", b.sharpness.initial},
                {"factor", b.sharpness.factor},
                {"every", b.sharpness.every},
                {"cap", b.sharpness.cap}}}};
}

void apply_sharpness(const json& j, codec::SharpnessSchedule& s) {
  s.initial = j.value("initial", s.initial);
  s.factor = j.value("factor", s.factor);
  s.every = j.value("every", s.every);
  s.cap = j.value("cap", s.cap);
}

void apply_budget(const json& j, TrainingBudget& b) {
  b.epochs = j.value("epochs", b.epochs);
  b.batch_size = j.value("batch_size", b.batch_size);
  b.learning_rate = j.value("learning_rate", b.learning_rate);
  if (j.contains("sharpness")) apply_sharpness(j.at("sharpness"), b.sharpness);
}

template <typename T, typename F>
std::vector<std::string> names(const std::vector<T>& xs, F&& f) {
  std::vector<std::string> out;
  for (const auto& x : xs) out.push_back(f(x));
  return out;
}

}  // namespace

channel::ChannelConfig parse_channel_config(const std::string& json_text, channel::ChannelConfig base) {
  try {
    apply_channel(json::parse(json_text), base);
  } catch (const json::exception& e) {
    throw DataError(std::string("channel config: ") + e.what());
  }
  base.validate();
  return base;
}

std::string channel_config_json(const channel::ChannelConfig& cfg) { return channel_json(cfg).dump(); }

void ExperimentConfig::validate() const {
  channel.validate();
  if (variants.empty()) throw ContractError("experiment: at least one variant is required");
  if (codeword_length < 1) throw ContractError("experiment: M must be >= 1");
  if (train_samples < 1 || test_samples < 1) throw ContractError("experiment: sample counts must be >= 1");
  if (seeds.empty()) throw ContractError("experiment: at least one seed is required");
  for (const auto* list : {&bits, &posthoc_bits, &joint_bits, &truncate_bits}) {
    for (int b : *list) quant::check_bits(b, "experiment bits");
  }
  for (QuantizerKind q : rd_quantizers) {
    if (q != QuantizerKind::uniform && q != QuantizerKind::mu_law) {
      throw ContractError("experiment: rd_quantizers must be UQ or muQ");
    }
  }
  for (double l : lambdas)
    if (!(l >= 0.0)) throw ContractError("experiment: lambda must be >= 0");
  for (const TrainingBudget* b : {&baseline, &finetune}) {
    if (b->epochs < 1 || b->batch_size < 1 || !(b->learning_rate > 0.0)) {
      throw ContractError("experiment: invalid training budget");
    }
  }
  if (!phase.lambdas.empty()) phase.train.validate();
  if (baseline_checkpoint && !std::filesystem::exists(*baseline_checkpoint)) {
    throw ContractError("experiment: baseline checkpoint " + baseline_checkpoint->string() + " does not exist");
  }
}

std::string ExperimentConfig::canonical_json() const {
  json j{{"scenario", scenario},
         {"channel", channel_json(channel)},
         {"variants", names(variants, [](Variant v) { return codec::to_string(v); })},
         {"M", codeword_length},
         {"train_samples", train_samples},
         {"test_samples", test_samples},
         {"bits", bits},
         {"posthoc_bits", posthoc_bits},
         {"joint_bits", joint_bits},
         {"truncate_bits", truncate_bits},
         {"quantizers", names(quantizers, [](QuantizerKind q) { return quant::to_string(q); })},
         {"rd_quantizers", names(rd_quantizers, [](QuantizerKind q) { return quant::to_string(q); })},
         {"modes", names(modes, [](TrainMode m) { return codec::to_string(m); })},
         {"lambdas", lambdas},
         {"seeds", seeds},
         {"baseline", budget_json(baseline)},
         {"finetune", budget_json(finetune)},
         {"phase", {{"lambdas", phase.lambdas},
                    {"source_bits", phase.source_bits},
                    {"heuristic", phase.heuristic},
                    {"train", json::parse(phase.train.canonical_json())}}},
         {"baseline_checkpoint", baseline_checkpoint ? json(baseline_checkpoint->string()) : json(nullptr)},
         {"save_models", save_models},
         {"matched_float", matched_float}};
  return j.dump();
}

std::uint64_t ExperimentConfig::hash() const { return io::fnv1a(canonical_json()); }

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
  ExperimentConfig c;
  try {
    const json j = json::parse(text);
    if (!j.is_object()) throw DataError("experiment config: expected a JSON object");
    c.scenario = j.value("scenario", c.scenario);
    c.channel = scenario_preset(c.scenario);
    if (j.contains("channel")) apply_channel(j.at("channel"), c.channel);
    if (j.contains("variants")) {
      c.variants.clear();
      for (const auto& v : j.at("variants")) c.variants.push_back(codec::variant_from_string(v.get<std::string>()));
    } else if (j.contains("variant")) {
      c.variants = {codec::variant_from_string(j.at("variant").get<std::string>())};
    }
    c.codeword_length = j.value("M", c.codeword_length);
    c.train_samples = j.value("train_samples", c.train_samples);
    c.test_samples = j.value("test_samples", c.test_samples);
    c.bits = j.value("bits", c.bits);
    c.posthoc_bits = j.value("posthoc_bits", c.posthoc_bits);
    c.joint_bits = j.value("joint_bits", c.joint_bits);
    c.truncate_bits = j.value("truncate_bits", c.truncate_bits);
    auto kinds = [&](const char* key, std::vector<QuantizerKind>& out) {
      if (!j.contains(key)) return;
      out.clear();
      for (const auto& q : j.at(key)) out.push_back(quant::quantizer_kind_from_string(q.get<std::string>()));
    };
    kinds("quantizers", c.quantizers);
    kinds("rd_quantizers", c.rd_quantizers);
    if (j.contains("modes")) {
      c.modes.clear();
      for (const auto& m : j.at("modes")) c.modes.push_back(codec::train_mode_from_string(m.get<std::string>()));
    }
    c.lambdas = j.value("lambdas", c.lambdas);
    c.seeds = j.value("seeds", c.seeds);
    if (j.contains("baseline")) apply_budget(j.at("baseline"), c.baseline);
    if (j.contains("finetune")) apply_budget(j.at("finetune"), c.finetune);
    if (j.contains("phase")) {
      const json& p = j.at("phase");
      c.phase.lambdas = p.value("lambdas", c.phase.lambdas);
      c.phase.source_bits = p.value("source_bits", c.phase.source_bits);
      c.phase.heuristic = p.value("heuristic", c.phase.heuristic);
      if (p.contains("train")) c.phase.train = phaseq::PhaseTrainConfig::from_json_text(p.at("train").dump());
    }
    if (j.contains("baseline_checkpoint") && !j.at("baseline_checkpoint").is_null()) {
      c.baseline_checkpoint = std::filesystem::path(j.at("baseline_checkpoint").get<std::string>());
    }
    c.save_models = j.value("save_models", c.save_models);
    c.matched_float = j.value("matched_float", c.matched_float);
  } catch (const json::exception& e) {
    throw DataError(std::string("experiment config: ") + e.what());
  }
  c.validate();
  return c;
}

// ------------------------------------------------------------------ CSV

std::string csv_header() {
  return "scenario,variant,M,bits,eval_bits,quantizer,mode,allocator,lambda,seed,status,nmse_db,nmsqe_db,"
         "bits_fixed,bits_entropy,bits_adaptive,mean_phase_bits,phase_error,error";
}

namespace {

std::string fmt(double v, int precision = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  return buf;
}

std::string fmt_general(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c == '\n' ? ' ' : c;
  }
  return out + "\"";
}

}  // namespace

std::string csv_row(const CellRecord& r) {
  std::string row;
  auto add = [&row](const std::string& v) {
    if (!row.empty()) row += ',';
    row += v;
  };
  add(csv_escape(r.scenario));
  add(codec::to_string(r.variant));
  add(std::to_string(r.m));
  add(std::to_string(r.bits));
  add(std::to_string(r.eval_bits));
  add(r.quantizer);
  add(r.mode);
  add(r.allocator);
  add(fmt_general(r.lambda));
  add(std::to_string(r.seed));
  add(r.ok ? "ok" : "error");
  if (r.ok) {
    add(fmt(r.nmse_db, 4));
    add(fmt(r.nmsqe_db, 4));
    add(fmt(r.bits_fixed, 4));
    add(fmt(r.bits_entropy, 4));
    add(fmt(r.bits_adaptive, 4));
    add(fmt(r.mean_phase_bits, 4));
    add(fmt(r.phase_error, 8));
  } else {
    for (int i = 0; i < 7; ++i) add("");
  }
  add(csv_escape(r.error));
  return row;
}

// --------------------------------------------------------------- running

namespace {

using Clock = std::chrono::steady_clock;

/// Runs jobs[0..n) on up to `workers` threads; job i writes only its own slots.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& job) {
  const std::size_t threads = std::min<std::size_t>(n, std::size_t(std::max(workers, 1)));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) job(i);
    });
  }
  for (auto& th : pool) th.join();
}

template <typename T>
bool has(const std::vector<T>& v, const T& x) {
  return std::find(v.begin(), v.end(), x) != v.end();
}

struct SeedData {
  channel::Dataset train;
  channel::Dataset test;
  std::string train_hash;
  std::string test_hash;
  std::string error;
};

/// One model family: a seed and a variant.
struct Family {
  std::size_t seed_index = 0;
  Variant variant = Variant::csiq;
  std::optional<CodecModel> baseline;
  std::string error;
  std::map<int, CodecModel> joint_at_bits;  // first lambda, for phase cells
};

struct Rates {
  double fixed = 0.0, entropy = 0.0, adaptive = 0.0;
};

Rates measure_rates(const Eigen::MatrixXi& test_idx, const Eigen::MatrixXi& train_idx, const bits::SymbolMap& map) {
  Rates r;
  r.fixed = bits::measure_rate(test_idx, map, bits::CoderMode::fixed);
  const auto counts = bits::symbol_counts(train_idx, map);
  const bits::SymbolModel table = bits::SymbolModel::from_counts(counts);
  r.entropy = bits::measure_rate(test_idx, map, bits::CoderMode::static_table, &table);
  r.adaptive = bits::measure_rate(test_idx, map, bits::CoderMode::adaptive, nullptr, true);
  return r;
}

void fill_quality(CellRecord& cell, const codec::EvalResult& test) {
  cell.nmse_db = metrics::nmse(test.reference, test.reconstruction).db();
  cell.nmsqe_db = metrics::nmsqe(test.codewords, test.quantized).db();
}

/// Evaluates `model` on test (and train for the entropy table) into `cell`.
void evaluate_cell(CellRecord& cell, const CodecModel& model, const SeedData& data, int truncate_bits = 0) {
  codec::EvalOptions opt;
  opt.truncate_bits = truncate_bits;
  const codec::EvalResult test = codec::evaluate(model, data.test, opt);
  fill_quality(cell, test);
  if (test.indices.size() == 0) {
    cell.bits_fixed = cell.bits_entropy = cell.bits_adaptive = 32.0;
    return;
  }
  const codec::EvalResult train = codec::evaluate(model, data.train, opt);
  const bits::SymbolMap map = truncate_bits > 0 ? bits::SymbolMap::signed_bits(truncate_bits)
                                                : bits::SymbolMap::for_quantizer(model.effective_quantizer());
  const Rates r = measure_rates(test.indices, train.indices, map);
  cell.bits_fixed = r.fixed;
  cell.bits_entropy = r.entropy;
  cell.bits_adaptive = r.adaptive;
}

codec::TrainConfig train_config(const ExperimentConfig& cfg, Variant v, const TrainingBudget& b, TrainMode mode,
                                int bits, double lambda, std::uint64_t seed) {
  codec::TrainConfig t;
  t.variant = v;
  t.codeword_length = cfg.codeword_length;
  t.epochs = b.epochs;
  t.batch_size = b.batch_size;
  t.learning_rate = b.learning_rate;
  t.sharpness = b.sharpness;
  t.mode = mode;
  t.bits = bits == 0 ? 5 : bits;
  t.lambda = lambda;
  t.seed = seed;
  return t;
}

std::string hash_file(const std::filesystem::path& p) {
  const auto bytes = io::read_file(p);
  return io::hex64(io::fnv1a(bytes));
}

std::filesystem::path next_report_path(const std::filesystem::path& dir, const char* ext) {
  std::filesystem::path p = dir / (std::string("report") + ext);
  for (int i = 1; std::filesystem::exists(p); ++i) p = dir / ("report." + std::to_string(i) + ext);
  return p;
}

std::string model_name(Variant v, std::uint64_t seed, const std::string& tag) {
  return codec::to_string(v) + "-seed" + std::to_string(seed) + "-" + tag + ".ckpt";
}

}  // namespace

Report run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out_dir, int workers) {
  cfg.validate();
  Report report;
  std::filesystem::create_directories(out_dir);
  const std::filesystem::path models_dir = out_dir / "models";
  const std::filesystem::path data_dir = out_dir / "data";

  std::vector<int> posthoc = cfg.bits;
  posthoc.insert(posthoc.end(), cfg.posthoc_bits.begin(), cfg.posthoc_bits.end());
  std::sort(posthoc.begin(), posthoc.end());
  posthoc.erase(std::unique(posthoc.begin(), posthoc.end()), posthoc.end());

  std::vector<int> joint = cfg.bits;
  for (int b : cfg.joint_bits)
    if (!has(joint, b)) joint.push_back(b);

  std::vector<SeedData> seeds(cfg.seeds.size());
  std::vector<Family> families;
  std::vector<std::function<void()>> baseline_jobs, finetune_jobs, phase_jobs;
  // Cells are preallocated in report order; each job writes only its own cells.
  std::vector<CellRecord>& cells = report.cells;

  if (cfg.bits.empty()) {
    report.warnings.push_back("empty bit-width list: nothing to evaluate");
  } else {
    for (std::size_t si = 0; si < cfg.seeds.size(); ++si)
      for (Variant v : cfg.variants) families.push_back(Family{si, v, std::nullopt, {}, {}});
    if (!cfg.phase.lambdas.empty() && std::find(cfg.variants.begin(), cfg.variants.end(), Variant::dualq) == cfg.variants.end()) {
      report.warnings.push_back("phase sweep requested without the dualq variant; no phase cells");
    }
  }
  if (cfg.save_models && !families.empty()) std::filesystem::create_directories(models_dir);
  if (!families.empty()) std::filesystem::create_directories(data_dir);

  auto new_cell = [&](const Family& f, int bits, int eval_bits, const std::string& q, const std::string& mode,
                      double lambda) {
    CellRecord c;
    c.scenario = cfg.scenario;
    c.variant = f.variant;
    c.m = cfg.codeword_length;
    c.bits = bits;
    c.eval_bits = eval_bits;
    c.quantizer = q;
    c.mode = mode;
    c.lambda = lambda;
    c.seed = cfg.seeds[f.seed_index];
    cells.push_back(c);
    return cells.size() - 1;
  };

  // Enumerate every cell up front so report order never depends on scheduling.
  struct Plan {
    std::size_t family;
    std::vector<std::size_t> baseline_cells;  // none, post-hoc UQ / muQ
    struct Finetune {
      TrainMode mode;
      QuantizerKind kind;
      int bits;
      double lambda;
      std::vector<std::size_t> cells;  // first: native width, then truncations
      std::vector<int> eval_bits;
    };
    std::vector<Finetune> finetunes;
    std::vector<std::size_t> phase_cells;  // heuristic first (if any), then lambdas
  };
  std::vector<Plan> plans;
  for (std::size_t fi = 0; fi < families.size(); ++fi) {
    const Family& f = families[fi];
    Plan plan{fi, {}, {}, {}};
    if (has(cfg.modes, TrainMode::no_quant_baseline)) {
      plan.baseline_cells.push_back(new_cell(f, 0, 0, "none", "baseline", 0.0));
      for (QuantizerKind q : {QuantizerKind::uniform, QuantizerKind::mu_law}) {
        if (!has(cfg.quantizers, q)) continue;
        for (int b : posthoc) plan.baseline_cells.push_back(new_cell(f, b, b, quant::to_string(q), "baseline", 0.0));
      }
      if (cfg.matched_float) {
        Plan::Finetune ft{TrainMode::no_quant_baseline, QuantizerKind::none, 0, 0.0, {}, {0}};
        ft.cells.push_back(new_cell(f, 0, 0, "none", "baseline-ft", 0.0));
        plan.finetunes.push_back(std::move(ft));
      }
    }
    if (has(cfg.modes, TrainMode::retrain_decoder_only)) {
      for (QuantizerKind q : cfg.rd_quantizers) {
        for (int b : cfg.bits) {
          Plan::Finetune ft{TrainMode::retrain_decoder_only, q, b, 0.0, {}, {b}};
          ft.cells.push_back(new_cell(f, b, b, quant::to_string(q), "rd", 0.0));
          plan.finetunes.push_back(std::move(ft));
        }
      }
    }
    if (has(cfg.modes, TrainMode::joint) && has(cfg.quantizers, QuantizerKind::learned)) {
      for (int b : joint) {
        for (double lambda : cfg.lambdas) {
          Plan::Finetune ft{TrainMode::joint, QuantizerKind::learned, b, lambda, {}, {b}};
          ft.cells.push_back(new_cell(f, b, b, "CQNet", "joint", lambda));
          for (int t : cfg.truncate_bits) {
            if (t >= b) continue;
            ft.eval_bits.push_back(t);
            ft.cells.push_back(new_cell(f, b, t, "CQNet", "joint", lambda));
          }
          plan.finetunes.push_back(std::move(ft));
        }
      }
    }
    if (f.variant == Variant::dualq) {
      if (cfg.phase.heuristic && !cfg.phase.lambdas.empty()) {
        const std::size_t c = new_cell(f, cfg.phase.source_bits, cfg.phase.source_bits, "CQNet", "phase", 0.0);
        cells[c].allocator = "heuristic";
        plan.phase_cells.push_back(c);
      }
      for (double lambda : cfg.phase.lambdas) {
        const std::size_t c = new_cell(f, cfg.phase.source_bits, cfg.phase.source_bits, "CQNet", "phase", lambda);
        cells[c].allocator = "phasequan";
        plan.phase_cells.push_back(c);
      }
    }
    plans.push_back(std::move(plan));
  }

  auto fail = [&](std::size_t cell, const std::string& what) {
    cells[cell].ok = false;
    cells[cell].error = what;
  };

  // Stage 0: datasets.
  if (!families.empty()) {
    parallel_for(seeds.size(), workers, [&](std::size_t si) {
      SeedData& sd = seeds[si];
      try {
        channel::ChannelConfig ch = cfg.channel;
        ch.seed = channel::derive_seed(cfg.channel.seed, cfg.seeds[si]);
        sd.train = channel::generate_dataset(ch, cfg.train_samples, true, 0);
        sd.test = channel::generate_dataset(ch, cfg.test_samples, true, cfg.train_samples);
        const auto train_path = data_dir / ("seed" + std::to_string(cfg.seeds[si]) + "-train.bin");
        const auto test_path = data_dir / ("seed" + std::to_string(cfg.seeds[si]) + "-test.bin");
        channel::write_dataset(train_path, sd.train);
        channel::write_dataset(test_path, sd.test);
        sd.train_hash = hash_file(train_path);
        sd.test_hash = hash_file(test_path);
      } catch (const std::exception& e) {
        sd.error = std::string("data generation failed: ") + e.what();
      }
    });
  }

  // Stage 1: baselines and post-hoc cells.
  parallel_for(plans.size(), workers, [&](std::size_t pi) {
    const Plan& plan = plans[pi];
    Family& f = families[plan.family];
    const SeedData& sd = seeds[f.seed_index];
    const std::uint64_t seed = cfg.seeds[f.seed_index];
    const auto t0 = Clock::now();
    try {
      if (!sd.error.empty()) throw std::runtime_error(sd.error);
      const codec::TrainConfig tc =
          train_config(cfg, f.variant, cfg.baseline, TrainMode::no_quant_baseline, 0, 0.0, seed);
      if (cfg.baseline_checkpoint) {
        f.baseline = checkpoint::load_codec(*cfg.baseline_checkpoint);
      } else {
        f.baseline = codec::train(sd.train, tc);
      }
      if (cfg.save_models) checkpoint::save(models_dir / model_name(f.variant, seed, "baseline"), *f.baseline, tc.canonical_json());
    } catch (const std::exception& e) {
      f.error = std::string("baseline training failed: ") + e.what();
    }
    const double train_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    if (!f.error.empty()) {
      for (std::size_t c : plan.baseline_cells) fail(c, f.error);
      return;
    }
    const Eigen::MatrixXd train_s = codec::encode_all(*f.baseline, codec::prepare(*f.baseline, sd.train));
    for (std::size_t c : plan.baseline_cells) {
      const auto c0 = Clock::now();
      CellRecord& cell = cells[c];
      try {
        if (cell.quantizer == "none") {
          evaluate_cell(cell, *f.baseline, sd);
          cell.seconds = train_seconds;
        } else {
          const auto q = cell.quantizer == "UQ" ? codec::fit_uniform(train_s, cell.bits)
                                                : codec::fit_mu_law(train_s, cell.bits);
          evaluate_cell(cell, codec::with_quantizer(*f.baseline, q), sd);
        }
      } catch (const std::exception& e) {
        fail(c, e.what());
      }
      cell.seconds += std::chrono::duration<double>(Clock::now() - c0).count();
    }
  });

  // Stage 2: fine-tuned models.
  struct FinetuneJob {
    std::size_t plan;
    std::size_t index;
  };
  std::vector<FinetuneJob> ft_jobs;
  for (std::size_t pi = 0; pi < plans.size(); ++pi)
    for (std::size_t k = 0; k < plans[pi].finetunes.size(); ++k) ft_jobs.push_back({pi, k});
  std::vector<std::optional<CodecModel>> ft_models(ft_jobs.size());

  parallel_for(ft_jobs.size(), workers, [&](std::size_t ji) {
    const Plan& plan = plans[ft_jobs[ji].plan];
    const auto& ft = plan.finetunes[ft_jobs[ji].index];
    const Family& f = families[plan.family];
    const SeedData& sd = seeds[f.seed_index];
    const std::uint64_t seed = cfg.seeds[f.seed_index];
    if (!f.error.empty()) {
      for (std::size_t c : ft.cells) fail(c, f.error);
      return;
    }
    const auto t0 = Clock::now();
    try {
      codec::TrainConfig tc = train_config(cfg, f.variant, cfg.finetune, ft.mode, ft.bits, ft.lambda, seed);
      tc.rd_quantizer = ft.mode == TrainMode::retrain_decoder_only ? ft.kind : QuantizerKind::uniform;
      CodecModel model = codec::train(sd.train, tc, &*f.baseline);
      if (cfg.save_models) {
        std::string tag = ft.mode == TrainMode::no_quant_baseline
                              ? std::string("baseline-ft")
                              : codec::to_string(ft.mode) + "-" + quant::to_string(ft.kind) + "-b" + std::to_string(ft.bits);
        if (ft.mode == TrainMode::joint) tag += "-lambda" + fmt_general(ft.lambda);
        checkpoint::save(models_dir / model_name(f.variant, seed, tag), model, tc.canonical_json());
      }
      const double train_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
      for (std::size_t k = 0; k < ft.cells.size(); ++k) {
        const auto c0 = Clock::now();
        try {
          evaluate_cell(cells[ft.cells[k]], model, sd, k == 0 ? 0 : ft.eval_bits[k]);
        } catch (const std::exception& e) {
          fail(ft.cells[k], e.what());
        }
        cells[ft.cells[k]].seconds = (k == 0 ? train_seconds : 0.0) +
                                     std::chrono::duration<double>(Clock::now() - c0).count();
      }
      ft_models[ji] = std::move(model);
    } catch (const std::exception& e) {
      for (std::size_t c : ft.cells) fail(c, std::string("training failed: ") + e.what());
    }
  });

  // Stage 3: phase allocation on decoder-side magnitudes.
  parallel_for(plans.size(), workers, [&](std::size_t pi) {
    const Plan& plan = plans[pi];
    if (plan.phase_cells.empty()) return;
    const Family& f = families[plan.family];
    const SeedData& sd = seeds[f.seed_index];
    if (!f.error.empty()) {
      for (std::size_t c : plan.phase_cells) fail(c, f.error);
      return;
    }
    const CodecModel* source = nullptr;
    for (std::size_t ji = 0; ji < ft_jobs.size(); ++ji) {
      const auto& ft = plans[ft_jobs[ji].plan].finetunes[ft_jobs[ji].index];
      if (ft_jobs[ji].plan == pi && ft.mode == TrainMode::joint && ft.bits == cfg.phase.source_bits && ft_models[ji]) {
        source = &*ft_models[ji];
        break;
      }
    }
    if (!source) {
      for (std::size_t c : plan.phase_cells) {
        fail(c, "no joint model at " + std::to_string(cfg.phase.source_bits) + " bits to supply decoder magnitudes");
      }
      return;
    }
    try {
      auto magnitudes = [&](const channel::Dataset& d) {
        const codec::EvalResult r = codec::evaluate(*source, d);
        std::vector<channel::RealMatrix> out;
        for (const auto& h : r.reconstruction) out.emplace_back(h.real().cwiseMax(0.0));
        return out;
      };
      const auto train_mag = magnitudes(sd.train);
      const auto test_mag = magnitudes(sd.test);
      std::vector<channel::RealMatrix> test_phase;
      for (const auto& h : sd.test.downlink) test_phase.push_back(channel::split_mag_phase(h).phase);

      auto score = [&](CellRecord& cell, const std::vector<phaseq::BitAllocation>& alloc) {
        double bits_sum = 0.0, err = 0.0;
        for (std::size_t i = 0; i < alloc.size(); ++i) {
          const auto qp = phaseq::quantize_phase(test_phase[i], alloc[i]);
          bits_sum += alloc[i].mean();
          err += phaseq::weighted_phase_error(test_mag[i], test_phase[i], qp.phase);
        }
        cell.mean_phase_bits = bits_sum / double(alloc.size());
        cell.phase_error = err / double(alloc.size());
        cell.bits_fixed = cell.mean_phase_bits;
      };
      std::size_t k = 0;
      if (cfg.phase.heuristic) {
        const auto t0 = Clock::now();
        const auto h = phaseq::HeuristicAllocator::fit(train_mag);
        std::vector<phaseq::BitAllocation> alloc;
        for (const auto& m : test_mag) alloc.push_back(h.allocate(m));
        score(cells[plan.phase_cells[k]], alloc);
        cells[plan.phase_cells[k]].seconds = std::chrono::duration<double>(Clock::now() - t0).count();
        ++k;
      }
      for (double lambda : cfg.phase.lambdas) {
        const std::size_t c = plan.phase_cells[k++];
        const auto t0 = Clock::now();
        try {
          phaseq::PhaseTrainConfig pc = cfg.phase.train;
          pc.lambda = lambda;
          pc.seed = cfg.seeds[f.seed_index];
          const phaseq::PhaseQuanModel pm = phaseq::train_phasequan(train_mag, pc);
          score(cells[c], phaseq::phasequan_forward_all(pm, test_mag));
          if (cfg.save_models) {
            checkpoint::save(models_dir / model_name(f.variant, cfg.seeds[f.seed_index],
                                                     "phasequan-lambda" + fmt_general(lambda)),
                             pm, pc.canonical_json());
          }
        } catch (const std::exception& e) {
          fail(c, e.what());
        }
        cells[c].seconds = std::chrono::duration<double>(Clock::now() - t0).count();
      }
    } catch (const std::exception& e) {
      for (std::size_t c : plan.phase_cells) fail(c, e.what());
    }
  });

  // Single-writer merge.
  report.failures = std::size_t(std::count_if(cells.begin(), cells.end(), [](const CellRecord& c) { return !c.ok; }));
  report.csv_path = next_report_path(out_dir, ".csv");
  report.sidecar_path = report.csv_path;
  report.sidecar_path.replace_extension(".json");

  std::string csv = std::string(kCsvSchema) + "\n" + csv_header() + "\n";
  for (const auto& c : cells) csv += csv_row(c) + "\n";
  io::write_file(report.csv_path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(csv.data()), csv.size()));

  json side{{"schema", kCsvSchema},
            {"config_hash", io::hex64(cfg.hash())},
            {"config", json::parse(cfg.canonical_json())},
            {"scenario_note", "synthetic multipath analogue of the named environment"},
            {"seeds", cfg.seeds},
            {"workers", workers},
            {"failures", report.failures},
            {"warnings", report.warnings}};
  json datasets = json::array();
  for (std::size_t si = 0; si < seeds.size() && !families.empty(); ++si) {
    datasets.push_back({{"seed", cfg.seeds[si]}, {"train_hash", seeds[si].train_hash}, {"test_hash", seeds[si].test_hash}});
  }
  side["datasets"] = datasets;
  json timing = json::array();
  for (std::size_t i = 0; i < cells.size(); ++i) timing.push_back({{"row", i}, {"seconds", cells[i].seconds}});
  side["wall_clock"] = timing;
  const std::string side_text = side.dump(2) + "\n";
  io::write_file(report.sidecar_path,
                 std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(side_text.data()), side_text.size()));
  return report;
}

}  // namespace csiq::experiment
