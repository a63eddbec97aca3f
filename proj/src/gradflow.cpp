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

#include "csiq/gradflow.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <sstream>

namespace csiq {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

}  // namespace csiq

namespace csiq::gradflow {

using RowMatrix = Tensor::RowMajorMatrix;

const Tensor& Var::value() const { return tape_->value(id_); }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, {}, nullptr, false});
  return Var(this, int(nodes_.size()) - 1);
}

Var Tape::parameter(Parameter& p) {
  nodes_.push_back(Node{p.value, {}, {}, {}, &p, record_gradients_ && p.trainable});
  return Var(this, int(nodes_.size()) - 1);
}

Var Tape::record(Tensor value, std::vector<int> inputs, Backward backward) {
  bool needs = false;
  if (record_gradients_)
    for (int id : inputs) needs = needs || requires_grad(id);
  nodes_.push_back(Node{std::move(value), {}, std::move(inputs), needs ? std::move(backward) : Backward{}, nullptr, needs});
  return Var(this, int(nodes_.size()) - 1);
}

Tensor& Tape::grad(int id) {
  Node& n = nodes_.at(std::size_t(id));
  if (n.grad.size() != n.value.size() || n.grad.shape() != n.value.shape()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Tape::backward(Var loss) {
  if (&loss.tape() != this) throw ContractError("backward: loss belongs to a different tape");
  if (loss.value().size() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_string(loss.shape()));
  }
  for (auto& n : nodes_) n.grad = Tensor();
  grad(loss.id())[0] = 1.0;
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[std::size_t(id)];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.parameter) {
      n.parameter->grad.data() += n.grad.data();
    } else if (n.backward) {
      n.backward(*this, n.grad);
    }
  }
}

namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

}  // namespace

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape(), a.value().data() + b.value().data());
  return a.tape().record(std::move(out), {a.id(), b.id()}, [ia = a.id(), ib = b.id()](Tape& t, const Tensor& g) {
    if (t.requires_grad(ia)) t.grad(ia).data() += g.data();
    if (t.requires_grad(ib)) t.grad(ib).data() += g.data();
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  Tensor out(a.shape(), a.value().data() - b.value().data());
  return a.tape().record(std::move(out), {a.id(), b.id()}, [ia = a.id(), ib = b.id()](Tape& t, const Tensor& g) {
    if (t.requires_grad(ia)) t.grad(ia).data() += g.data();
    if (t.requires_grad(ib)) t.grad(ib).data() -= g.data();
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape(), a.value().data().cwiseProduct(b.value().data()));
  return a.tape().record(std::move(out), {a.id(), b.id()}, [ia = a.id(), ib = b.id()](Tape& t, const Tensor& g) {
    if (t.requires_grad(ia)) t.grad(ia).data() += g.data().cwiseProduct(t.value(ib).data());
    if (t.requires_grad(ib)) t.grad(ib).data() += g.data().cwiseProduct(t.value(ia).data());
  });
}

Var scale(Var a, double factor) {
  Tensor out(a.shape(), a.value().data() * factor);
  return a.tape().record(std::move(out), {a.id()}, [ia = a.id(), factor](Tape& t, const Tensor& g) {
    t.grad(ia).data() += factor * g.data();
  });
}

Var add_scalar(Var a, double offset) {
  Tensor out(a.shape(), a.value().data().array() + offset);
  return a.tape().record(std::move(out), {a.id()}, [ia = a.id()](Tape& t, const Tensor& g) {
    t.grad(ia).data() += g.data();
  });
}

Var mul_broadcast(Var x, Var w) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (ws.size() > xs.size() || !std::equal(ws.rbegin(), ws.rend(), xs.rbegin())) {
    throw DimensionError("mul_broadcast: " + shape_string(ws) + " is not a trailing shape of " + shape_string(xs));
  }
  const Index inner = w.value().size();
  const Index outer = x.value().size() / std::max<Index>(inner, 1);
  Tensor out(xs);
  out.matrix(outer, inner) = x.value().matrix(outer, inner).array().rowwise() * w.value().data().transpose().array();
  return x.tape().record(std::move(out), {x.id(), w.id()},
                         [ix = x.id(), iw = w.id(), outer, inner](Tape& t, const Tensor& g) {
                           auto gm = g.matrix(outer, inner);
                           if (t.requires_grad(ix)) {
                             t.grad(ix).matrix(outer, inner).array() +=
                                 gm.array().rowwise() * t.value(iw).data().transpose().array();
                           }
                           if (t.requires_grad(iw)) {
                             t.grad(iw).data() +=
                                 (gm.array() * t.value(ix).matrix(outer, inner).array()).colwise().sum().transpose().matrix();
                           }
                         });
}

Var dense(Var x, Var weight, Var bias) {
  const Shape& ws = weight.shape();
  if (ws.size() != 2) throw DimensionError("dense: weight must be rank 2, got " + shape_string(ws));
  const Index m = ws[0], n = ws[1];
  if (bias.shape() != Shape{m}) throw DimensionError("dense: bias shape " + shape_string(bias.shape()));
  const Shape& xs = x.shape();
  if (xs.empty() || xs.back() != n) {
    throw DimensionError("dense: input " + shape_string(xs) + " does not end in " + std::to_string(n));
  }
  const Index batch = x.value().size() / n;
  Shape out_shape = xs;
  out_shape.back() = m;
  Tensor out(out_shape);
  auto y = out.matrix(batch, m);
  y.noalias() = x.value().matrix(batch, n) * weight.value().matrix(m, n).transpose();
  y.rowwise() += bias.value().data().transpose();
  return x.tape().record(std::move(out), {x.id(), weight.id(), bias.id()},
                         [ix = x.id(), iw = weight.id(), ib = bias.id(), batch, m, n](Tape& t, const Tensor& g) {
                           auto gy = g.matrix(batch, m);
                           if (t.requires_grad(ix)) t.grad(ix).matrix(batch, n).noalias() += gy * t.value(iw).matrix(m, n);
                           if (t.requires_grad(iw)) {
                             t.grad(iw).matrix(m, n).noalias() += gy.transpose() * t.value(ix).matrix(batch, n);
                           }
                           if (t.requires_grad(ib)) t.grad(ib).data() += gy.colwise().sum().transpose();
                         });
}

namespace {

// Rows are (channel, ky, kx); columns are (batch, y, x).
void im2col(const Tensor& x, Index batch, Index channels, Index h, Index w, RowMatrix& cols) {
  const Index hw = h * w;
  cols.setZero(channels * 9, batch * hw);
  for (Index c = 0; c < channels; ++c) {
    for (Index ky = 0; ky < 3; ++ky) {
      for (Index kx = 0; kx < 3; ++kx) {
        const Index row = c * 9 + ky * 3 + kx;
        const Index dy = ky - 1, dx = kx - 1;
        for (Index b = 0; b < batch; ++b) {
          const double* src = x.data().data() + (b * channels + c) * hw;
          double* dst = cols.data() + row * cols.cols() + b * hw;
          for (Index yy = std::max<Index>(0, -dy); yy < std::min(h, h - dy); ++yy) {
            const Index x0 = std::max<Index>(0, -dx), x1 = std::min(w, w - dx);
            for (Index xx = x0; xx < x1; ++xx) dst[yy * w + xx] = src[(yy + dy) * w + xx + dx];
          }
        }
      }
    }
  }
}

void col2im_add(const RowMatrix& cols, Index batch, Index channels, Index h, Index w, Tensor& gx) {
  const Index hw = h * w;
  for (Index c = 0; c < channels; ++c) {
    for (Index ky = 0; ky < 3; ++ky) {
      for (Index kx = 0; kx < 3; ++kx) {
        const Index row = c * 9 + ky * 3 + kx;
        const Index dy = ky - 1, dx = kx - 1;
        for (Index b = 0; b < batch; ++b) {
          double* dst = gx.data().data() + (b * channels + c) * hw;
          const double* src = cols.data() + row * cols.cols() + b * hw;
          for (Index yy = std::max<Index>(0, -dy); yy < std::min(h, h - dy); ++yy) {
            const Index x0 = std::max<Index>(0, -dx), x1 = std::min(w, w - dx);
            for (Index xx = x0; xx < x1; ++xx) dst[(yy + dy) * w + xx + dx] += src[yy * w + xx];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv3x3(Var x, Var kernels, Var bias) {
  const Shape& ks = kernels.shape();
  if (ks.size() != 4 || ks[2] != 3 || ks[3] != 3) throw DimensionError("conv3x3: kernels " + shape_string(ks));
  const Index cout = ks[0], cin = ks[1];
  if (bias.shape() != Shape{cout}) throw DimensionError("conv3x3: bias shape " + shape_string(bias.shape()));
  const Shape& xs = x.shape();
  if (xs.size() != 3 && xs.size() != 4) throw DimensionError("conv3x3: input must be rank 3 or 4");
  const bool batched = xs.size() == 4;
  const Index batch = batched ? xs[0] : 1;
  const Index c = xs[xs.size() - 3], h = xs[xs.size() - 2], w = xs[xs.size() - 1];
  if (c != cin) {
    throw DimensionError("conv3x3: input has " + std::to_string(c) + " channels, kernels expect " + std::to_string(cin));
  }
  if (h < 1 || w < 1) throw DimensionError("conv3x3: empty spatial extent");
  const Index hw = h * w;

  auto cols = std::make_shared<RowMatrix>();
  im2col(x.value(), batch, cin, h, w, *cols);
  const RowMatrix y = kernels.value().matrix(cout, cin * 9) * (*cols);

  Shape out_shape = batched ? Shape{batch, cout, h, w} : Shape{cout, h, w};
  Tensor out(out_shape);
  for (Index b = 0; b < batch; ++b) {
    Eigen::Map<RowMatrix> ob(out.data().data() + b * cout * hw, cout, hw);
    ob = y.middleCols(b * hw, hw);
    ob.colwise() += bias.value().data();
  }
  return x.tape().record(
      std::move(out), {x.id(), kernels.id(), bias.id()},
      [ix = x.id(), ik = kernels.id(), ib = bias.id(), cols, batch, cin, cout, h, w, hw](Tape& t, const Tensor& g) {
        RowMatrix gy(cout, batch * hw);
        for (Index b = 0; b < batch; ++b) {
          gy.middleCols(b * hw, hw) = Eigen::Map<const RowMatrix>(g.data().data() + b * cout * hw, cout, hw);
        }
        if (t.requires_grad(ik)) t.grad(ik).matrix(cout, cin * 9).noalias() += gy * cols->transpose();
        if (t.requires_grad(ib)) t.grad(ib).data() += gy.rowwise().sum();
        if (t.requires_grad(ix)) {
          const RowMatrix gcols = t.value(ik).matrix(cout, cin * 9).transpose() * gy;
          col2im_add(gcols, batch, cin, h, w, t.grad(ix));
        }
      });
}

Var activation(Var x, Activation kind, double leaky_slope) {
  const auto& in = x.value().data().array();
  Tensor out(x.shape());
  switch (kind) {
    case Activation::sigmoid:
      out.data() = (1.0 / (1.0 + (-in).exp())).matrix();
      return x.tape().record(std::move(out), {x.id()}, [ix = x.id()](Tape& t, const Tensor& g) {
        // recompute from the input; the output node is not reachable from here
        const auto s = (1.0 / (1.0 + (-t.value(ix).data().array()).exp())).eval();
        t.grad(ix).data().array() += g.data().array() * s * (1.0 - s);
      });
    case Activation::tanh:
      out.data() = in.tanh().matrix();
      return x.tape().record(std::move(out), {x.id()}, [ix = x.id()](Tape& t, const Tensor& g) {
        const auto th = t.value(ix).data().array().tanh().eval();
        t.grad(ix).data().array() += g.data().array() * (1.0 - th.square());
      });
    case Activation::leaky_relu:
      out.data() = (in > 0).select(in, leaky_slope * in).matrix();
      return x.tape().record(std::move(out), {x.id()}, [ix = x.id(), leaky_slope](Tape& t, const Tensor& g) {
        const auto& v = t.value(ix).data().array();
        t.grad(ix).data().array() += (v > 0).select(g.data().array(), leaky_slope * g.data().array());
      });
  }
  throw ContractError("activation: unsupported kind");
}

Var square(Var x) {
  Tensor out(x.shape(), x.value().data().array().square().matrix());
  return x.tape().record(std::move(out), {x.id()}, [ix = x.id()](Tape& t, const Tensor& g) {
    t.grad(ix).data().array() += 2.0 * g.data().array() * t.value(ix).data().array();
  });
}

Var abs(Var x) {
  Tensor out(x.shape(), x.value().data().cwiseAbs());
  return x.tape().record(std::move(out), {x.id()}, [ix = x.id()](Tape& t, const Tensor& g) {
    t.grad(ix).data().array() += g.data().array() * t.value(ix).data().array().sign();
  });
}

Var softplus(Var x) {
  auto f = [](double v) { return v > 30.0 ? v : std::log1p(std::exp(v)); };
  auto df = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  return map(x, f, df);
}

Var clamp(Var x, double lo, double hi) {
  Tensor out(x.shape(), x.value().data().cwiseMax(lo).cwiseMin(hi));
  return x.tape().record(std::move(out), {x.id()}, [ix = x.id(), lo, hi](Tape& t, const Tensor& g) {
    const auto& v = t.value(ix).data().array();
    t.grad(ix).data().array() += ((v >= lo) && (v <= hi)).select(g.data().array(), 0.0);
  });
}

Var map(Var x, const std::function<double(double)>& f, const std::function<double(double)>& df) {
  Tensor out(x.shape(), x.value().data().unaryExpr(f));
  return x.tape().record(std::move(out), {x.id()}, [ix = x.id(), df](Tape& t, const Tensor& g) {
    t.grad(ix).data().array() += g.data().array() * t.value(ix).data().unaryExpr(df).array();
  });
}

Var sum(Var x) {
  Tensor out(Shape{1}, Tensor::Vector::Constant(1, x.value().data().sum()));
  return x.tape().record(std::move(out), {x.id()}, [ix = x.id()](Tape& t, const Tensor& g) {
    t.grad(ix).data().array() += g[0];
  });
}

Var mean(Var x) {
  const double n = double(x.value().size());
  return scale(sum(x), 1.0 / n);
}

Var mse(Var a, Var b) { return mean(square(sub(a, b))); }

Var reshape(Var x, Shape shape) {
  if (shape_size(shape) != x.value().size()) {
    throw DimensionError("reshape: " + shape_string(x.shape()) + " -> " + shape_string(shape));
  }
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape().record(std::move(out), {x.id()}, [ix = x.id()](Tape& t, const Tensor& g) {
    t.grad(ix).data() += g.data();
  });
}

Var concat(Var a, Var b, Index axis) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() != bs.size() || axis < 0 || axis >= Index(as.size())) throw DimensionError("concat: rank mismatch");
  for (std::size_t i = 0; i < as.size(); ++i) {
    if (Index(i) != axis && as[i] != bs[i]) {
      throw DimensionError("concat: " + shape_string(as) + " vs " + shape_string(bs) + " along axis " +
                           std::to_string(axis));
    }
  }
  Index outer = 1;
  for (Index i = 0; i < axis; ++i) outer *= as[std::size_t(i)];
  const Index ia = a.value().size() / outer, ib = b.value().size() / outer;
  Shape out_shape = as;
  out_shape[std::size_t(axis)] += bs[std::size_t(axis)];
  Tensor out(out_shape);
  auto om = out.matrix(outer, ia + ib);
  om.leftCols(ia) = a.value().matrix(outer, ia);
  om.rightCols(ib) = b.value().matrix(outer, ib);
  return a.tape().record(std::move(out), {a.id(), b.id()},
                         [xa = a.id(), xb = b.id(), outer, ia, ib](Tape& t, const Tensor& g) {
                           auto gm = g.matrix(outer, ia + ib);
                           if (t.requires_grad(xa)) t.grad(xa).matrix(outer, ia) += gm.leftCols(ia);
                           if (t.requires_grad(xb)) t.grad(xb).matrix(outer, ib) += gm.rightCols(ib);
                         });
}

void Adam::step(std::span<Parameter* const> params) {
  if (params.empty()) return;
  if (first_moment_.empty()) {
    for (const Parameter* p : params) {
      first_moment_.emplace_back(p->value.shape());
      second_moment_.emplace_back(p->value.shape());
    }
  }
  if (first_moment_.size() != params.size()) throw ContractError("adam: parameter list changed between steps");
  ++steps_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, double(steps_));
  const double c2 = 1.0 - std::pow(b2, double(steps_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    if (p.value.shape() != first_moment_[i].shape()) throw ContractError("adam: shape changed for " + p.name);
    if (!p.trainable) continue;
    auto m = first_moment_[i].data().array();
    auto v = second_moment_[i].data().array();
    const auto g = p.grad.data().array();
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g.square();
    p.value.data().array() -= options_.learning_rate * (m / c1) / ((v / c2).sqrt() + options_.epsilon);
  }
}

}  // namespace csiq::gradflow
