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

#include "doctest.h"

#include "csiq/binary_io.hpp"
#include "csiq/experiment.hpp"
#include "csiq/metrics.hpp"

#include "json.hpp"

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

using namespace csiq;
using channel::ComplexMatrix;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

experiment::ExperimentConfig tiny_grid() {
  experiment::ExperimentConfig c;
  c.channel.antennas = 4;
  c.channel.subcarriers = 32;
  c.channel.delay_rows = 4;
  c.variants = {codec::Variant::csiq, codec::Variant::dualq};
  c.codeword_length = 6;
  c.train_samples = 40;
  c.test_samples = 10;
  c.bits = {2, 3};
  c.truncate_bits = {2};
  c.seeds = {1, 2};
  c.baseline = {4, 10, 3e-3, {}};
  c.finetune = {2, 10, 1e-3, {5.0, 2.0, 1, 50.0}};
  c.phase.lambdas = {1e-3};
  c.phase.source_bits = 3;
  c.phase.train.epochs = 2;
  c.phase.train.batch_size = 10;
  return c;
}

}  // namespace

TEST_CASE("nmse: identities and the two-sample toy") {
  std::vector<ComplexMatrix> h{ComplexMatrix::Random(3, 3), ComplexMatrix::Random(3, 3)};
  CHECK(metrics::nmse(h, h).linear == 0.0);
  CHECK(metrics::nmse(h, h).db() == -120.0);
  std::vector<ComplexMatrix> zero{ComplexMatrix::Zero(3, 3), ComplexMatrix::Zero(3, 3)};
  CHECK(metrics::nmse(h, zero).linear == 1.0);
  CHECK(metrics::nmse(h, zero).db() == 0.0);

  // ||H||^2 = 1 for both; errors of 0.1 and 0.2 in one entry -> ratios 0.01, 0.04.
  std::vector<ComplexMatrix> t{ComplexMatrix::Zero(1, 2), ComplexMatrix::Zero(1, 2)};
  t[0](0, 0) = 1.0;
  t[1](0, 1) = {0.0, 1.0};
  auto e = t;
  e[0](0, 0) = 0.9;
  e[1](0, 1) = {0.0, 0.8};
  const auto r = metrics::nmse(t, e);
  CHECK(r.linear == doctest::Approx(0.025));
  CHECK(r.db() == doctest::Approx(-16.0206).epsilon(1e-5));
}

TEST_CASE("nmse: per-sample scale invariance and zero-norm exclusion") {
  std::vector<ComplexMatrix> h{ComplexMatrix::Random(4, 2), ComplexMatrix::Random(4, 2)};
  std::vector<ComplexMatrix> g{ComplexMatrix::Random(4, 2), ComplexMatrix::Random(4, 2)};
  const double base = metrics::nmse(h, g).linear;
  h[1] *= 7.0;
  g[1] *= 7.0;
  CHECK(metrics::nmse(h, g).linear == doctest::Approx(base));

  h.push_back(ComplexMatrix::Zero(4, 2));
  g.push_back(ComplexMatrix::Random(4, 2));
  const auto r = metrics::nmse(h, g);
  CHECK(r.excluded == 1);
  CHECK(r.used == 2);
  CHECK(r.linear == doctest::Approx(base));
  g.pop_back();
  CHECK_THROWS_AS(metrics::nmse(h, g), DimensionError);
}

TEST_CASE("nmsqe") {
  Eigen::MatrixXd s(2, 2), q(2, 2);
  s << 1, 0, 0, 2;
  q << 1, 0, 0, 2;
  CHECK(metrics::nmsqe(s, q).linear == 0.0);
  q(0, 0) = 0.9;  // 0.01
  q(1, 1) = 1.6;  // 0.16 / 4 = 0.04
  CHECK(metrics::nmsqe(s, q).linear == doctest::Approx(0.025));
}

TEST_CASE("experiment config: presets, JSON round trip, validation") {
  CHECK(experiment::scenario_preset("indoor-like").delay_spread < experiment::scenario_preset("outdoor-like").delay_spread);
  CHECK_THROWS_AS(experiment::scenario_preset("urban"), ContractError);
  const auto c = tiny_grid();
  const auto back = experiment::ExperimentConfig::from_json_text(c.canonical_json());
  CHECK(back.canonical_json() == c.canonical_json());
  CHECK(back.hash() == c.hash());
  auto bad = c;
  bad.bits = {0};
  CHECK_THROWS_AS(bad.validate(), ContractError);
  bad = c;
  bad.baseline_checkpoint = "/nonexistent/base.ckpt";
  CHECK_THROWS_AS(bad.validate(), ContractError);
  CHECK_THROWS_AS(experiment::ExperimentConfig::from_json_text("[1,2]"), DataError);
}

TEST_CASE("experiment: empty bit list gives an empty report with a warning") {
  const auto dir = std::filesystem::temp_directory_path() / "csiq_test_empty_grid";
  std::filesystem::remove_all(dir);
  auto c = tiny_grid();
  c.bits.clear();
  const auto r = experiment::run_experiment(c, dir, 1);
  CHECK(r.cells.empty());
  CHECK(r.failures == 0);
  CHECK_FALSE(r.warnings.empty());
  CHECK(slurp(r.csv_path) == std::string(experiment::kCsvSchema) + "\n" + experiment::csv_header() + "\n");
  std::filesystem::remove_all(dir);
}

TEST_CASE("experiment: complete, deterministic, worker-count independent, append-only") {
  const auto dir = std::filesystem::temp_directory_path() / "csiq_test_grid";
  std::filesystem::remove_all(dir);
  const auto c = tiny_grid();
  const auto a = experiment::run_experiment(c, dir / "a", 1);
  const auto b = experiment::run_experiment(c, dir / "b", 3);
  CHECK(a.failures == 0);
  CHECK(slurp(a.csv_path) == slurp(b.csv_path));

  // every (variant, seed) family carries the same row set
  std::map<std::pair<std::string, std::uint64_t>, int> per_family;
  for (const auto& cell : a.cells) {
    CHECK(cell.ok);
    ++per_family[{codec::to_string(cell.variant), cell.seed}];
  }
  CHECK(per_family.size() == 4);
  CHECK(per_family.at({"csiq", 1}) == per_family.at({"csiq", 2}));
  CHECK(per_family.at({"dualq", 1}) == per_family.at({"dualq", 2}));
  CHECK(per_family.at({"dualq", 1}) > per_family.at({"csiq", 1}));  // phase cells

  // Rerun into the same directory appends a numbered report.
  const auto again = experiment::run_experiment(c, dir / "a", 2);
  CHECK(again.csv_path.filename() == "report.1.csv");
  CHECK(slurp(again.csv_path) == slurp(a.csv_path));
  CHECK(std::filesystem::exists(dir / "a" / "report.csv"));

  const auto sidecar = nlohmann::json::parse(slurp(a.sidecar_path));
  CHECK(sidecar.at("config_hash").get<std::string>() == io::hex64(c.hash()));
  CHECK(sidecar.contains("datasets"));

  const std::string csv = slurp(a.csv_path);
  CHECK(csv.rfind(std::string(experiment::kCsvSchema) + "\n" + experiment::csv_header() + "\n", 0) == 0);
  CHECK(csv.find("seconds") == std::string::npos);
  std::filesystem::remove_all(dir);
}

TEST_CASE("experiment: a failing cell is recorded and the run continues") {
  const auto dir = std::filesystem::temp_directory_path() / "csiq_test_grid_fail";
  std::filesystem::remove_all(dir);
  auto c = tiny_grid();
  c.variants = {codec::Variant::csiq};
  c.seeds = {1};
  c.phase.lambdas.clear();
  c.finetune.learning_rate = 1e300;  // fine-tunes diverge, baselines survive
  const auto r = experiment::run_experiment(c, dir, 1);
  CHECK(r.failures > 0);
  CHECK(r.failures < r.cells.size());
  for (const auto& cell : r.cells) {
    if (!cell.ok) CHECK_FALSE(cell.error.empty());
  }
  CHECK(slurp(r.csv_path).find(",error,") != std::string::npos);
  std::filesystem::remove_all(dir);
}

TEST_CASE("experiment: matched float reference rows") {
  const auto dir = std::filesystem::temp_directory_path() / "csiq_test_grid_matched";
  std::filesystem::remove_all(dir);
  auto c = tiny_grid();
  c.variants = {codec::Variant::csiq};
  c.phase.lambdas.clear();
  c.matched_float = true;
  const auto r = experiment::run_experiment(c, dir, 2);
  CHECK(r.failures == 0);
  for (std::uint64_t seed : c.seeds) {
    const experiment::CellRecord *plain = nullptr, *tuned = nullptr;
    for (const auto& cell : r.cells) {
      if (cell.seed != seed || cell.quantizer != "none") continue;
      if (cell.mode == "baseline") plain = &cell;
      if (cell.mode == "baseline-ft") tuned = &cell;
    }
    REQUIRE(plain);
    REQUIRE(tuned);
    CHECK(tuned->bits == 0);
    // continued training moves the model
    CHECK(tuned->nmse_db != doctest::Approx(plain->nmse_db).epsilon(1e-9));
    CHECK(std::filesystem::exists(dir / "models" / ("csiq-seed" + std::to_string(seed) + "-baseline-ft.ckpt")));
  }
  c.matched_float = false;
  const auto off = experiment::run_experiment(c, dir / "off", 1);
  CHECK(off.cells.size() + c.seeds.size() == r.cells.size());
  CHECK(c.hash() != [&] { auto m = c; m.matched_float = true; return m.hash(); }());
  std::filesystem::remove_all(dir);
}
