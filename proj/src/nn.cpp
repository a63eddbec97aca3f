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

#include "csiq/nn.hpp"

#include <cmath>

namespace csiq::nn {

namespace {

// Glorot-uniform fill.
Tensor glorot(Shape shape, Index fan_in, Index fan_out, Rng& rng) {
  Tensor t(std::move(shape));
  const double limit = std::sqrt(6.0 / double(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (Index i = 0; i < t.size(); ++i) t[i] = dist(rng);
  return t;
}

}  // namespace

DenseLayer::DenseLayer(std::string name, Index in, Index out, Rng& rng)
    : weight(name + ".weight", glorot({out, in}, in, out, rng)), bias(name + ".bias", Tensor(Shape{out})) {}

Var DenseLayer::operator()(Tape& tape, Var x) {
  return gradflow::dense(x, tape.parameter(weight), tape.parameter(bias));
}

ConvLayer::ConvLayer(std::string name, Index in_channels, Index out_channels, Rng& rng)
    : kernels(name + ".kernels", glorot({out_channels, in_channels, 3, 3}, in_channels * 9, out_channels * 9, rng)),
      bias(name + ".bias", Tensor(Shape{out_channels})) {}

Var ConvLayer::operator()(Tape& tape, Var x) {
  return gradflow::conv3x3(x, tape.parameter(kernels), tape.parameter(bias));
}

ResidualBlock::ResidualBlock(const std::string& name, Index channels, Rng& rng)
    : expand(name + ".conv8", channels, 8, rng),
      widen(name + ".conv16", 8, 16, rng),
      project(name + ".conv_out", 16, channels, rng) {}

Var ResidualBlock::operator()(Tape& tape, Var x, double leaky_slope) {
  Var h = gradflow::leaky_relu(expand(tape, x), leaky_slope);
  h = gradflow::leaky_relu(widen(tape, h), leaky_slope);
  h = project(tape, h);
  return gradflow::add(x, h);
}

void ResidualBlock::collect(std::vector<Parameter*>& out) {
  expand.collect(out);
  widen.collect(out);
  project.collect(out);
}

void set_trainable(std::vector<Parameter*>& params, bool trainable) {
  for (Parameter* p : params) p->trainable = trainable;
}

void zero_grads(const std::vector<Parameter*>& params) {
  for (Parameter* p : params) p->zero_grad();
}

Index parameter_count(const std::vector<Parameter*>& params) {
  Index n = 0;
  for (const Parameter* p : params) n += p->value.size();
  return n;
}

}  // namespace csiq::nn
