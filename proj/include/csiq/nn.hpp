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

#ifndef CSIQ_NN_HPP
#define CSIQ_NN_HPP

#include "csiq/gradflow.hpp"

#include <random>
#include <vector>

namespace csiq::nn {

using gradflow::Parameter;
using gradflow::Tape;
using gradflow::Var;
using Rng = std::mt19937_64;

struct DenseLayer {
  Parameter weight;
  Parameter bias;

  DenseLayer() = default;
  DenseLayer(std::string name, Index in, Index out, Rng& rng);

  Var operator()(Tape& tape, Var x);
  void collect(std::vector<Parameter*>& out) { out.insert(out.end(), {&weight, &bias}); }
};

struct ConvLayer {
  Parameter kernels;
  Parameter bias;

  ConvLayer() = default;
  ConvLayer(std::string name, Index in_channels, Index out_channels, Rng& rng);

  Var operator()(Tape& tape, Var x);
  void collect(std::vector<Parameter*>& out) { out.insert(out.end(), {&kernels, &bias}); }
};

/// conv(8) -> act -> conv(16) -> act -> conv(channels), added to the block input.
struct ResidualBlock {
  ConvLayer expand;
  ConvLayer widen;
  ConvLayer project;

  ResidualBlock() = default;
  ResidualBlock(const std::string& name, Index channels, Rng& rng);

  Var operator()(Tape& tape, Var x, double leaky_slope);
  void collect(std::vector<Parameter*>& out);
};

void set_trainable(std::vector<Parameter*>& params, bool trainable);
void zero_grads(const std::vector<Parameter*>& params);
Index parameter_count(const std::vector<Parameter*>& params);

}  // namespace csiq::nn

#endif  // CSIQ_NN_HPP
