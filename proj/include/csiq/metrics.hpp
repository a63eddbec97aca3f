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

// Reconstruction and quantization error metrics.

#ifndef CSIQ_METRICS_HPP
#define CSIQ_METRICS_HPP

#include "csiq/channel.hpp"

#include <cstddef>
#include <span>

namespace csiq::metrics {

inline constexpr double kDbFloor = -120.0;

/// 10 log10(linear), floored at -120 dB (exact zero reports the floor).
double to_db(double linear);

struct Ratio {
  double linear = 0.0;
  std::size_t used = 0;      // samples that entered the mean
  std::size_t excluded = 0;  // zero-norm references skipped

  double db() const { return to_db(linear); }
};

/// (1/n) sum ||H - H_hat||^2 / ||H||^2 over samples with nonzero ||H||.
Ratio nmse(std::span<const channel::ComplexMatrix> truth, std::span<const channel::ComplexMatrix> estimate);
/// Same ratio over codewords, one row per sample.
Ratio nmsqe(const Eigen::MatrixXd& s, const Eigen::MatrixXd& s_hat);

}  // namespace csiq::metrics

#endif  // CSIQ_METRICS_HPP
