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

#include "csiq/metrics.hpp"

#include <cmath>
#include <string>

namespace csiq::metrics {

double to_db(double linear) {
  if (!(linear > 0.0)) return kDbFloor;
  return std::max(kDbFloor, 10.0 * std::log10(linear));
}

namespace {

template <typename Num, typename Err>
Ratio mean_ratio(std::size_t n, Num&& num, Err&& den) {
  Ratio r;
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = den(i);
    if (!(d > 0.0)) {
      ++r.excluded;
      continue;
    }
    sum += num(i) / d;
    ++r.used;
  }
  r.linear = r.used ? sum / double(r.used) : 0.0;
  return r;
}

}  // namespace

Ratio nmse(std::span<const channel::ComplexMatrix> truth, std::span<const channel::ComplexMatrix> estimate) {
  if (truth.size() != estimate.size()) {
    throw DimensionError("nmse: " + std::to_string(truth.size()) + " references vs " +
                         std::to_string(estimate.size()) + " estimates");
  }
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i].rows() != estimate[i].rows() || truth[i].cols() != estimate[i].cols()) {
      throw DimensionError("nmse: sample " + std::to_string(i) + " shape mismatch");
    }
  }
  return mean_ratio(
      truth.size(), [&](std::size_t i) { return (truth[i] - estimate[i]).squaredNorm(); },
      [&](std::size_t i) { return truth[i].squaredNorm(); });
}

Ratio nmsqe(const Eigen::MatrixXd& s, const Eigen::MatrixXd& s_hat) {
  if (s.rows() != s_hat.rows() || s.cols() != s_hat.cols()) throw DimensionError("nmsqe: codeword shapes differ");
  return mean_ratio(
      std::size_t(s.rows()), [&](std::size_t i) { return (s.row(Index(i)) - s_hat.row(Index(i))).squaredNorm(); },
      [&](std::size_t i) { return s.row(Index(i)).squaredNorm(); });
}

}  // namespace csiq::metrics
