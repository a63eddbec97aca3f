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

#include "csiq/checkpoint.hpp"

#include "csiq/binary_io.hpp"

#include "json.hpp"

#include <cmath>
#include <limits>

namespace csiq::checkpoint {

using nlohmann::json;
using gradflow::Parameter;

namespace {

constexpr char kMagic[8] = {'C', 'S', 'I', 'Q', 'C', 'K', 'P', '1'};

json norm_json(const channel::NormStats& n) { return json{{"min", n.min}, {"max", n.max}}; }

channel::NormStats norm_from(const json& j) { return channel::NormStats{j.at("min").get<double>(), j.at("max").get<double>()}; }

json vector_json(const Eigen::VectorXd& v) { return json(std::vector<double>(v.data(), v.data() + v.size())); }

Eigen::VectorXd vector_from(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), Index(v.size()));
}

json tensor_table(const std::vector<const Parameter*>& params) {
  json t = json::array();
  for (const Parameter* p : params) t.push_back(json{{"name", p->name}, {"shape", p->value.shape()}});
  return t;
}

void write(const std::filesystem::path& path, json header, const std::vector<const Parameter*>& params,
           const std::string& config_json) {
  header["format_version"] = 1;
  header["config_hash"] = io::hex64(io::fnv1a(config_json));
  header["config"] = config_json.empty() ? json(nullptr) : json::parse(config_json);
  header["tensors"] = tensor_table(params);
  const std::string text = header.dump();
  io::ByteWriter w;
  w.put_string(std::string_view(kMagic, 8));
  w.put_u32(std::uint32_t(text.size()));
  w.put_string(text);
  for (const Parameter* p : params) {
    for (Index i = 0; i < p->value.size(); ++i) w.put_f32(float(p->value[i]));
  }
  io::write_file(path, w.bytes());
}

struct Raw {
  std::vector<std::uint8_t> bytes;
  json header;
  std::size_t tensor_offset = 0;
};

Raw read_raw(const std::filesystem::path& path) {
  Raw raw;
  raw.bytes = io::read_file(path);
  io::ByteReader r(raw.bytes);
  if (r.string(8, "magic") != std::string(kMagic, 8)) {
    throw DataError("checkpoint " + path.string() + ": bad magic (not a CSIQCKP1 file)");
  }
  const std::uint32_t n = r.u32("header length");
  const std::string text = r.string(n, "header");
  try {
    raw.header = json::parse(text);
  } catch (const json::exception& e) {
    throw DataError("checkpoint " + path.string() + ": malformed header: " + e.what());
  }
  if (raw.header.value("format_version", 0) != 1) throw DataError("checkpoint: unsupported format_version");
  raw.tensor_offset = r.position();
  return raw;
}

void check_hash(const json& header, std::optional<std::uint64_t> expected, bool allow_mismatch) {
  if (!expected) return;
  const std::string stored = header.value("config_hash", std::string());
  if (stored != io::hex64(*expected) && !allow_mismatch) {
    throw ConfigMismatch("checkpoint config hash " + stored + " does not match requested config " +
                         io::hex64(*expected) + " (pass the override flag to load anyway)");
  }
}

void read_tensors(const Raw& raw, const std::vector<Parameter*>& params) {
  const json& table = raw.header.at("tensors");
  if (table.size() != params.size()) {
    throw DataError("checkpoint: expected " + std::to_string(params.size()) + " tensors, header lists " +
                    std::to_string(table.size()));
  }
  io::ByteReader r(std::span<const std::uint8_t>(raw.bytes).subspan(raw.tensor_offset));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    const std::string name = table[i].at("name").get<std::string>();
    const Shape shape = table[i].at("shape").get<Shape>();
    if (name != p.name) throw DataError("checkpoint: tensor " + std::to_string(i) + " is '" + name + "', expected '" + p.name + "'");
    if (shape != p.value.shape()) {
      throw DataError("checkpoint: tensor '" + name + "' has shape " + shape_string(shape) + ", expected " +
                      shape_string(p.value.shape()));
    }
    for (Index j = 0; j < p.value.size(); ++j) p.value[j] = double(r.f32(name));
    p.zero_grad();
  }
  if (r.remaining() != 0) throw DataError("checkpoint: " + std::to_string(r.remaining()) + " trailing bytes");
}

json quantizer_json(const quant::CodewordQuantizer& q) {
  json j{{"kind", quant::to_string(q.kind)}, {"bits", q.bits},    {"s_min", q.s_min},
         {"s_max", q.s_max},                  {"scale", q.scale}, {"mu", q.mu}};
  if (q.kind == quant::QuantizerKind::learned) {
    j["w"] = vector_json(q.learned.w);
    j["v"] = vector_json(q.learned.v);
    j["sharpness"] = q.learned.sharpness;
  }
  return j;
}

}  // namespace

void save(const std::filesystem::path& path, const codec::CodecModel& model, const std::string& config_json) {
  const quant::CodewordQuantizer q = model.effective_quantizer();
  json h{{"kind", "codec"},
         {"variant", codec::to_string(model.variant)},
         {"M", model.codeword_length},
         {"bits", q.bits},
         {"rows", model.rows},
         {"cols", model.cols},
         {"subcarriers", model.subcarriers},
         {"leaky_slope", model.leaky_slope},
         {"quantizer", quantizer_json(q)},
         {"norm", norm_json(model.norm)},
         {"uplink_norm", norm_json(model.uplink_norm)},
         {"symbol_freq", model.symbol_freq}};
  write(path, std::move(h), model.all_parameters(), config_json);
}

void save(const std::filesystem::path& path, const phaseq::PhaseQuanModel& model, const std::string& config_json) {
  json h{{"kind", "phasequan"},
         {"rows", model.rows},
         {"cols", model.cols},
         {"epsilon", model.epsilon},
         {"lambda", model.lambda},
         {"leaky_slope", model.leaky_slope},
         {"norm", norm_json(model.norm)}};
  write(path, std::move(h), model.all_parameters(), config_json);
}

Header read_header(const std::filesystem::path& path) {
  const Raw raw = read_raw(path);
  return Header{raw.header.value("kind", std::string()), raw.header.value("config_hash", std::string()),
                raw.header.dump()};
}

codec::CodecModel load_codec(const std::filesystem::path& path, std::optional<std::uint64_t> expected_hash,
                             bool allow_mismatch) {
  const Raw raw = read_raw(path);
  const json& h = raw.header;
  try {
    if (h.at("kind") != "codec") throw DataError("checkpoint " + path.string() + " holds a " + h.at("kind").get<std::string>() + " model, not a codec");
    check_hash(h, expected_hash, allow_mismatch);
    codec::CodecModel m = codec::CodecModel::create(codec::variant_from_string(h.at("variant")), h.at("M").get<Index>(),
                                                    h.at("rows").get<Index>(), h.at("cols").get<Index>(), 0,
                                                    h.at("leaky_slope").get<double>());
    read_tensors(raw, m.all_parameters());
    m.subcarriers = h.value("subcarriers", Index{0});
    m.norm = norm_from(h.at("norm"));
    m.uplink_norm = norm_from(h.at("uplink_norm"));
    m.symbol_freq = h.value("symbol_freq", std::vector<std::uint64_t>{});
    const json& q = h.at("quantizer");
    quant::CodewordQuantizer cq;
    cq.kind = quant::quantizer_kind_from_string(q.at("kind"));
    cq.bits = q.at("bits").get<int>();
    cq.s_min = q.at("s_min").get<double>();
    cq.s_max = q.at("s_max").get<double>();
    cq.scale = q.at("scale").get<double>();
    cq.mu = q.at("mu").get<double>();
    if (cq.kind == quant::QuantizerKind::learned) {
      cq.learned.w = vector_from(q.at("w"));
      cq.learned.v = vector_from(q.at("v"));
      cq.learned.bits = cq.bits;
      cq.learned.sharpness = q.at("sharpness").get<double>();
      cq.learned.validate();
      if (cq.learned.size() != m.codeword_length) throw DataError("checkpoint: quantizer weights do not match M");
      m.set_learned_params(cq.learned.w, cq.learned.v);
    }
    m.quantizer = cq;
    return m;
  } catch (const json::exception& e) {
    throw DataError("checkpoint " + path.string() + ": " + e.what());
  } catch (const ContractError& e) {
    throw DataError("checkpoint " + path.string() + ": " + e.what());
  }
}

phaseq::PhaseQuanModel load_phasequan(const std::filesystem::path& path, std::optional<std::uint64_t> expected_hash,
                                      bool allow_mismatch) {
  const Raw raw = read_raw(path);
  const json& h = raw.header;
  try {
    if (h.at("kind") != "phasequan") throw DataError("checkpoint " + path.string() + " does not hold a PhaseQuan model");
    check_hash(h, expected_hash, allow_mismatch);
    phaseq::PhaseQuanModel m = phaseq::PhaseQuanModel::create(h.at("rows").get<Index>(), h.at("cols").get<Index>(), 0);
    m.epsilon = h.at("epsilon").get<double>();
    m.lambda = h.at("lambda").get<double>();
    m.leaky_slope = h.at("leaky_slope").get<double>();
    m.norm = norm_from(h.at("norm"));
    read_tensors(raw, m.all_parameters());
    return m;
  } catch (const json::exception& e) {
    throw DataError("checkpoint " + path.string() + ": " + e.what());
  }
}

}  // namespace csiq::checkpoint
