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

// Reverse-mode differentiation over a linear tape.
//
// Every operation evaluates eagerly and appends a node holding its value and
// a closure that scatters the upstream gradient into its inputs. Nodes are
// appended in evaluation order, so the tape is topologically sorted by
// construction and backward() is a single reverse sweep.
//
// Leading dimensions are batch dimensions: dense() accepts [n] or [B, n],
// conv3x3() accepts [C, H, W] or [B, C, H, W].

#ifndef CSIQ_GRADFLOW_HPP
#define CSIQ_GRADFLOW_HPP

#include "csiq/tensor.hpp"

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace csiq::gradflow {

/// Trainable tensor with an accumulated gradient slot.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad = Tensor(value.shape()); }
};

class Tape;

/// Handle to a node on a tape. References returned by value() and shape()
/// are invalidated when the tape grows.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  int id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& upstream)>;

  /// A tape built with record_gradients = false keeps values only.
  explicit Tape(bool record_gradients = true) : record_gradients_(record_gradients) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Binds a parameter; backward() adds into p.grad when p.trainable.
  Var parameter(Parameter& p);
  Var record(Tensor value, std::vector<int> inputs, Backward backward);

  const Tensor& value(int id) const { return nodes_.at(std::size_t(id)).value; }
  bool requires_grad(int id) const { return nodes_.at(std::size_t(id)).requires_grad; }
  /// Gradient accumulator of a node, zero-initialised on first access.
  Tensor& grad(int id);

  /// Propagates d(loss)/d(node) through every reachable node exactly once.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<int> inputs;
    Backward backward;
    Parameter* parameter = nullptr;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
  bool record_gradients_ = true;
};

enum class Activation { sigmoid, leaky_relu, tanh };

inline constexpr double kDefaultLeakySlope = 0.3;

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var add_scalar(Var a, double offset);
/// Multiplies x element-wise by w broadcast over x's leading dimensions.
Var mul_broadcast(Var x, Var w);

/// y = x W^T + b, with W of shape [m, n].
Var dense(Var x, Var weight, Var bias);
/// Same-size 3x3 cross-correlation with zero padding 1; kernels [Cout, Cin, 3, 3].
Var conv3x3(Var x, Var kernels, Var bias);

Var activation(Var x, Activation kind, double leaky_slope = kDefaultLeakySlope);
inline Var sigmoid(Var x) { return activation(x, Activation::sigmoid); }
inline Var tanh(Var x) { return activation(x, Activation::tanh); }
inline Var leaky_relu(Var x, double slope = kDefaultLeakySlope) { return activation(x, Activation::leaky_relu, slope); }

Var square(Var x);
Var abs(Var x);
Var softplus(Var x);
/// Clamps into [lo, hi]; gradient is zero where clamped.
Var clamp(Var x, double lo, double hi);
/// Element-wise map with caller-supplied derivative.
Var map(Var x, const std::function<double(double)>& f, const std::function<double(double)>& df);

Var sum(Var x);
Var mean(Var x);
Var mse(Var a, Var b);

Var reshape(Var x, Shape shape);
/// Concatenates along `axis`; all other dimensions must agree.
Var concat(Var a, Var b, Index axis);

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Bias-corrected Adam over a fixed, ordered parameter list.
class Adam {
 public:
  explicit Adam(AdamOptions options = {}) : options_(options) {}

  /// Applies one update from each parameter's grad. An empty list is a no-op.
  void step(std::span<Parameter* const> params);

  long steps() const { return steps_; }
  const AdamOptions& options() const { return options_; }
  void set_learning_rate(double lr) { options_.learning_rate = lr; }

 private:
  AdamOptions options_;
  std::vector<Tensor> first_moment_;
  std::vector<Tensor> second_moment_;
  long steps_ = 0;
};

}  // namespace csiq::gradflow

#endif  // CSIQ_GRADFLOW_HPP
