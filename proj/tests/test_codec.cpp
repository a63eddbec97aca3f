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
#include "test_support.hpp"

#include "csiq/binary_io.hpp"
#include "csiq/checkpoint.hpp"
#include "csiq/codec.hpp"
#include "csiq/metrics.hpp"

#include <filesystem>

using namespace csiq;
using namespace csiq::codec;

namespace {

channel::ChannelConfig tiny_channel() {
  channel::ChannelConfig cfg = channel::ChannelConfig::indoor_like();
  cfg.antennas = 4;
  cfg.subcarriers = 32;
  cfg.delay_rows = 4;
  return cfg;
}

const Dataset& tiny_data() {
  static const Dataset d = channel::generate_dataset(tiny_channel(), 64, true);
  return d;
}

TrainConfig tiny_config(Variant v, TrainMode mode, int bits = 4) {
  TrainConfig c;
  c.variant = v;
  c.codeword_length = 8;
  c.epochs = 6;
  c.batch_size = 16;
  c.learning_rate = 3e-3;
  c.bits = bits;
  c.mode = mode;
  c.sharpness = {5.0, 2.0, 2, 50.0};
  return c;
}

CodecModel tiny_baseline(Variant v) {
  return train(tiny_data(), tiny_config(v, TrainMode::no_quant_baseline));
}

}  // namespace

TEST_CASE("encode: zero input with zero biases gives a zero codeword") {
  CodecModel m = CodecModel::create(Variant::csiq, 8, 4, 4, 1);
  m.encoder_conv.bias.value.data().setZero();
  m.encoder_fc.bias.value.data().setZero();
  const Eigen::VectorXd s = encode_csi(m, Tensor({2, 4, 4}));
  CHECK(s.size() == 8);
  CHECK(s.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("encode/decode: shape contract and determinism") {
  const CodecModel m = CodecModel::create(Variant::dualq, 32, 32, 32, 7);
  std::mt19937_64 rng(1);
  const Tensor x = testing::random_tensor({1, 32, 32}, rng, 0.0, 1.0);
  const Eigen::VectorXd s = encode_csi(m, x);
  CHECK(s.size() == 32);
  CHECK(encode_csi(m, x) == s);
  const Tensor side = testing::random_tensor({1, 32, 32}, rng, 0.0, 1.0);
  const Tensor y = decode_csi(m, s, side);
  CHECK(y.shape() == Shape{1, 32, 32});
  CHECK(decode_csi(m, s, side).data() == y.data());
  CHECK(y.data().minCoeff() >= 0.0);
  CHECK(y.data().maxCoeff() <= 1.0);

  CHECK_THROWS_AS(encode_csi(m, Tensor({2, 32, 32})), ContractError);
  CHECK_THROWS_AS(decode_csi(m, s, std::nullopt), ContractError);
  CHECK_THROWS_AS(decode_csi(m, s, Tensor({1, 16, 32})), ContractError);
  CHECK_THROWS_AS(decode_csi(m, Eigen::VectorXd::Zero(31), side), ContractError);

  const CodecModel c = CodecModel::create(Variant::csiq, 8, 4, 4, 7);
  CHECK_THROWS_AS(decode_csi(c, Eigen::VectorXd::Zero(8), Tensor({1, 4, 4})), ContractError);
  CHECK(decode_csi(c, Eigen::VectorXd::Zero(8), std::nullopt).shape() == Shape{2, 4, 4});
}

TEST_CASE("end-to-end gradient: CsiQ and DualQ joint losses") {
  for (Variant v : {Variant::csiq, Variant::dualq}) {
    CAPTURE(to_string(v));
    CodecModel m = CodecModel::create(v, 6, 4, 4, 3);
    fit_normalization(m, tiny_data());
    TrainConfig cfg = tiny_config(v, TrainMode::joint, 3);
    cfg.codeword_length = 6;
    m = initialize_from(m, cfg, tiny_data());
    const PreparedData p = prepare(m, tiny_data().slice(0, 4));
    auto params = m.all_parameters();
    // Zero biases put all-zero input patches exactly on the leaky-relu kink.
    std::mt19937_64 rng(5);
    for (Parameter* q : params)
      if (q->name.ends_with("bias")) q->value = testing::random_tensor(q->value.shape(), rng, -0.1, 0.1);
    const auto r = testing::check_gradients(params, [&](Tape& t, std::vector<Parameter*>&) {
      return loss_graph(t, m, p.inputs, p.side, TrainMode::joint, 1e-3, 4.0, quant::RegularizerNorm::l1);
    }, 1e-6, 1e-7, 24);
    CHECK(r.max_rel_error < 1e-3);
  }
}

TEST_CASE("initialize_from: copies weights and spans the index range") {
  const CodecModel base = tiny_baseline(Variant::csiq);
  TrainConfig cfg = tiny_config(Variant::csiq, TrainMode::joint, 4);
  const CodecModel init = initialize_from(base, cfg, tiny_data());
  CHECK(init.quantizer.kind == quant::QuantizerKind::learned);

  EvalOptions bypass;
  bypass.bypass_quantizer = true;
  const auto a = evaluate(base, tiny_data(), bypass);
  const auto b = evaluate(init, tiny_data(), bypass);
  for (std::size_t i = 0; i < a.reconstruction.size(); ++i) CHECK(a.reconstruction[i] == b.reconstruction[i]);

  const auto q = evaluate(init, tiny_data());
  const int lo = quant::signed_min(4), hi = quant::signed_max(4);
  const auto w = init.learned_params().w;
  Index clipped = 0;
  for (Index i = 0; i < q.codewords.rows(); ++i)
    for (Index j = 0; j < q.codewords.cols(); ++j) {
      const double z = std::round(q.codewords(i, j) * w[j]);
      clipped += z < lo || z > hi;
    }
  CHECK(double(clipped) < 0.01 * double(q.codewords.size()));

  TrainConfig other = cfg;
  other.variant = Variant::dualq;
  CHECK_THROWS_AS(initialize_from(base, other, tiny_data()), ContractError);
  other = cfg;
  other.codeword_length = 9;
  CHECK_THROWS_AS(initialize_from(base, other, tiny_data()), ContractError);
}

TEST_CASE("train: finite decreasing loss and deterministic under a fixed seed") {
  TrainConfig cfg = tiny_config(Variant::csiq, TrainMode::no_quant_baseline);
  cfg.epochs = 30;
  TrainLog log;
  const CodecModel a = train(tiny_data(), cfg, nullptr, &log);
  REQUIRE(log.epoch_loss.size() == 30);
  for (double l : log.epoch_loss) CHECK(std::isfinite(l));
  auto avg = [&](int from) {
    double s = 0.0;
    for (int i = from; i < from + 10; ++i) s += log.epoch_loss[std::size_t(i)];
    return s / 10.0;
  };
  CHECK(avg(20) < avg(0));

  const CodecModel b = train(tiny_data(), cfg);
  const auto pa = a.all_parameters(), pb = b.all_parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value.data() == pb[i]->value.data());
}

TEST_CASE("train: DualQ magnitude baseline beats the all-zero predictor for every init seed") {
  // Sparse magnitude targets at desk shape; the loss of predicting zero is
  // mean(t^2). A saturated output sigmoid sits exactly on that floor.
  channel::ChannelConfig ch = channel::ChannelConfig::indoor_like();
  ch.antennas = 16;
  ch.subcarriers = 256;
  ch.delay_rows = 16;
  const Dataset data = channel::generate_dataset(ch, 200, true);
  CodecModel probe = CodecModel::create(Variant::dualq, 8, 16, 16, 1);
  fit_normalization(probe, data);
  const PreparedData p = prepare(probe, data);
  double floor = 0.0;
  for (Index i = 0; i < p.inputs.size(); ++i) floor += p.inputs[i] * p.inputs[i];
  floor /= double(p.inputs.size());
  for (std::uint64_t seed = 1; seed <= 6; ++seed) {
    TrainConfig cfg = tiny_config(Variant::dualq, TrainMode::no_quant_baseline);
    cfg.seed = seed;
    cfg.epochs = 3;
    TrainLog log;
    train(data, cfg, nullptr, &log);
    CAPTURE(seed);
    CHECK(log.epoch_loss.back() < 0.8 * floor);
  }
}

TEST_CASE("train: rd mode freezes the encoder and needs a baseline") {
  const CodecModel base = tiny_baseline(Variant::dualq);
  TrainConfig cfg = tiny_config(Variant::dualq, TrainMode::retrain_decoder_only, 3);
  CHECK_THROWS_AS(train(tiny_data(), cfg), ContractError);
  const CodecModel rd = train(tiny_data(), cfg, &base);
  CHECK(rd.quantizer.kind == quant::QuantizerKind::uniform);
  CHECK(rd.encoder_fc.weight.value.data() == base.encoder_fc.weight.value.data());
  CHECK(rd.encoder_conv.kernels.value.data() == base.encoder_conv.kernels.value.data());
  CHECK(rd.decoder_fc.weight.value.data() != base.decoder_fc.weight.value.data());
  CHECK_FALSE(rd.symbol_freq.empty());
}

TEST_CASE("train: joint mode learns the quantizer and records symbol frequencies") {
  const CodecModel base = tiny_baseline(Variant::csiq);
  const TrainConfig cfg = tiny_config(Variant::csiq, TrainMode::joint, 4);
  const CodecModel init = initialize_from(base, cfg, tiny_data());
  const CodecModel j = train(tiny_data(), cfg, &base);
  CHECK(j.quantizer.kind == quant::QuantizerKind::learned);
  CHECK(j.learned_params().w != init.learned_params().w);
  CHECK(j.symbol_freq.size() == 16);
  std::uint64_t n = 0;
  for (auto c : j.symbol_freq) n += c;
  CHECK(n == std::uint64_t(tiny_data().size() * 8));
  const auto r = evaluate(j, tiny_data());
  CHECK(r.indices.minCoeff() >= -8);
  CHECK(r.indices.maxCoeff() <= 7);
}

TEST_CASE("train: NaN loss aborts with a diagnostic") {
  TrainConfig cfg = tiny_config(Variant::csiq, TrainMode::no_quant_baseline);
  cfg.learning_rate = 1e300;
  cfg.epochs = 3;
  CHECK_THROWS_AS(train(tiny_data(), cfg), TrainingError);
}

TEST_CASE("config: JSON round trip, hash and validation") {
  TrainConfig c = tiny_config(Variant::dualq, TrainMode::retrain_decoder_only, 6);
  c.rd_quantizer = quant::QuantizerKind::mu_law;
  c.regularizer = quant::RegularizerNorm::l2;
  const TrainConfig back = TrainConfig::from_json_text(c.canonical_json());
  CHECK(back.canonical_json() == c.canonical_json());
  CHECK(back.hash() == c.hash());
  TrainConfig d = c;
  d.lambda = 2e-4;
  CHECK(d.hash() != c.hash());
  d.lambda = -1.0;
  CHECK_THROWS_AS(d.validate(), ContractError);
  d = c;
  d.epochs = 0;
  CHECK_THROWS_AS(d.validate(), ContractError);
  CHECK_THROWS(TrainConfig::from_json_text("{not json"));
}

TEST_CASE("post-hoc quantizers and index histograms") {
  const CodecModel base = tiny_baseline(Variant::csiq);
  const auto r = evaluate(base, tiny_data());
  CHECK(r.indices.size() == 0);
  const auto uq = fit_uniform(r.codewords, 3);
  CHECK(uq.s_min == r.codewords.minCoeff());
  CHECK(uq.s_max == r.codewords.maxCoeff());
  const auto mq = fit_mu_law(r.codewords, 3);
  CHECK(mq.scale == r.codewords.cwiseAbs().maxCoeff());
  const CodecModel q = with_quantizer(base, uq);
  const auto hist = index_histogram(q, tiny_data());
  CHECK(hist.size() == std::size_t(uq.index_max() - uq.index_min() + 1));
  std::uint64_t n = 0;
  for (auto c : hist) n += c;
  CHECK(n == std::uint64_t(r.codewords.size()));
}

TEST_CASE("checkpoint: save/load reproduces evaluation within 1e-6") {
  const auto dir = std::filesystem::temp_directory_path() / "csiq_test_ckpt";
  std::filesystem::create_directories(dir);
  const CodecModel base = tiny_baseline(Variant::dualq);
  const TrainConfig cfg = tiny_config(Variant::dualq, TrainMode::joint, 5);
  const CodecModel j = train(tiny_data(), cfg, &base);
  checkpoint::save(dir / "j.ckpt", j, cfg.canonical_json());
  const CodecModel l = checkpoint::load_codec(dir / "j.ckpt", cfg.hash());
  CHECK(l.symbol_freq == j.symbol_freq);
  CHECK(l.subcarriers == j.subcarriers);
  const auto a = evaluate(j, tiny_data());
  const auto b = evaluate(l, tiny_data());
  double worst = 0.0;
  for (std::size_t i = 0; i < a.reconstruction.size(); ++i)
    worst = std::max(worst, (a.reconstruction[i] - b.reconstruction[i]).cwiseAbs().maxCoeff() /
                                a.reference[i].cwiseAbs().maxCoeff());
  CHECK(worst < 1e-6);

  // Config hash mismatch is refused unless overridden.
  TrainConfig other = cfg;
  other.lambda = 0.5;
  CHECK_THROWS_AS(checkpoint::load_codec(dir / "j.ckpt", other.hash()), checkpoint::ConfigMismatch);
  CHECK_NOTHROW(checkpoint::load_codec(dir / "j.ckpt", other.hash(), true));

  auto bytes = io::read_file(dir / "j.ckpt");
  CHECK(std::string(bytes.begin(), bytes.begin() + 8) == "CSIQCKP1");
  auto bad = bytes;
  bad[3] = '?';
  io::write_file(dir / "bad.ckpt", bad);
  try {
    checkpoint::load_codec(dir / "bad.ckpt");
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("magic") != std::string::npos);
  }
  auto cut = bytes;
  cut.resize(cut.size() - 3);
  io::write_file(dir / "cut.ckpt", cut);
  CHECK_THROWS_AS(checkpoint::load_codec(dir / "cut.ckpt"), DataError);
  auto longer = bytes;
  longer.push_back(0);
  io::write_file(dir / "long.ckpt", longer);
  CHECK_THROWS_AS(checkpoint::load_codec(dir / "long.ckpt"), DataError);
  CHECK_THROWS_AS(checkpoint::load_phasequan(dir / "j.ckpt"), DataError);
  std::filesystem::remove_all(dir);
}
