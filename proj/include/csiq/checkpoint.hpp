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

// Model checkpoints.
//
//   "CSIQCKP1" | u32 header length | JSON header | f32 LE tensors
//
// Tensors follow the model's declaration order. Normalisation statistics and
// fitted quantizer state live in the header at double precision, so a loaded
// model quantizes exactly as the saved one did.

#ifndef CSIQ_CHECKPOINT_HPP
#define CSIQ_CHECKPOINT_HPP

#include "csiq/codec.hpp"
#include "csiq/phaseq.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

namespace csiq::checkpoint {

/// The stored config hash differs from the one requested by the caller.
class ConfigMismatch : public DataError {
 public:
  using DataError::DataError;
};

struct Header {
  std::string kind;  // "codec" or "phasequan"
  std::string config_hash;
  std::string json;  // full header text
};

void save(const std::filesystem::path& path, const codec::CodecModel& model, const std::string& config_json);
void save(const std::filesystem::path& path, const phaseq::PhaseQuanModel& model, const std::string& config_json);

Header read_header(const std::filesystem::path& path);

/// When `expected_hash` is given and differs from the stored hash, throws
/// ConfigMismatch unless `allow_mismatch`.
codec::CodecModel load_codec(const std::filesystem::path& path, std::optional<std::uint64_t> expected_hash = {},
                             bool allow_mismatch = false);
phaseq::PhaseQuanModel load_phasequan(const std::filesystem::path& path,
                                      std::optional<std::uint64_t> expected_hash = {}, bool allow_mismatch = false);

}  // namespace csiq::checkpoint

#endif  // CSIQ_CHECKPOINT_HPP
