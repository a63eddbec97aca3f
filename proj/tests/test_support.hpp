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

// Shared helpers for the unit tests: random tensors and a central-difference
// gradient checker.

#ifndef CSIQ_TEST_SUPPORT_HPP
#define CSIQ_TEST_SUPPORT_HPP

#include "csiq/gradflow.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace csiq::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

/// Builds the scalar loss on a fresh tape from the given parameters.
using LossBuilder = std::function<gradflow::Var(gradflow::Tape&, std::vector<gradflow::Parameter*>&)>;

struct GradCheck {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

/// Compares backward() against central differences with step h, entry by
/// entry. The relative error uses max(|a|, |n|, floor) as denominator so
/// entries whose true gradient is ~0 are judged on absolute scale.
inline GradCheck check_gradients(std::vector<gradflow::Parameter*> params, const LossBuilder& build,
                                 double h = 1e-6, double floor = 1e-6, Index max_entries_per_param = 64) {
  for (auto* p : params) p->zero_grad();
  {
    gradflow::Tape tape;
    tape.backward(build(tape, params));
  }
  auto eval = [&] {
    gradflow::Tape tape(false);
    return build(tape, params).value()[0];
  };
  GradCheck out;
  for (auto* p : params) {
    const Index n = p->value.size();
    const Index stride = std::max<Index>(1, n / max_entries_per_param);
    for (Index i = 0; i < n; i += stride) {
      const double keep = p->value[i];
      p->value[i] = keep + h;
      const double up = eval();
      p->value[i] = keep - h;
      const double down = eval();
      p->value[i] = keep;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = p->grad[i];
      const double abs_err = std::abs(numeric - analytic);
      const double denom = std::max({std::abs(numeric), std::abs(analytic), floor});
      out.max_abs_error = std::max(out.max_abs_error, abs_err);
      out.max_rel_error = std::max(out.max_rel_error, abs_err / denom);
    }
  }
  return out;
}

}  // namespace csiq::testing

#endif  // CSIQ_TEST_SUPPORT_HPP
