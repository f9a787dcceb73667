#pragma once

// Tape-based reverse-mode differentiation over small dense matrices.
//
// A Tape records every intermediate value together with a closure that maps
// the gradient of that value onto the gradients of its inputs. Parameters
// are bound from a ParameterSet; backward() accumulates into their gradient
// buffers. A tape built with gradients disabled records values only.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "dpo/parameters.hpp"
#include "dpo/rng.hpp"
#include "dpo/tensor.hpp"

namespace dpo::ad {

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  double scalar() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Tensor value);
  Var scalar(double v) { return constant(Tensor::scalar(v)); }
  // Binds a named parameter. Repeated binds of the same parameter return the
  // same node so gradients from every use are summed.
  Var param(ParameterSet& params, const std::string& name);
  // Binds a parameter as a constant (no gradient flows back to it).
  Var frozen(const ParameterSet& params, const std::string& name);

  // Seeds d(loss)/d(loss) = 1 for a 1x1 loss, propagates, and adds leaf
  // gradients into the bound parameter sets.
  void backward(Var loss);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  // Gradient accumulator of a node; allocated on first access.
  Tensor& grad(std::size_t id);

  // Low-level node creation used by the op library.
  Var push(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var push(Tensor value, std::span<const Var> inputs, BackwardFn fn);
  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool grad_allocated = false;
    BackwardFn backward;
    Tensor* param_grad = nullptr;
  };

  bool grad_enabled_;
  std::vector<Node> nodes_;
  std::unordered_map<const void*, std::size_t> bound_;
};

// Elementwise and linear algebra.
Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
// a[n x m] + b[1 x m] for every row.
Var add_row(Var a, Var b);
// a[n x m] - b[1 x m] for every row.
Var sub_row(Var a, Var b);
Var scale(Var a, double c);
// a * s for a 1x1 variable s.
Var scale_by(Var a, Var s);
Var add_scalar(Var a, double c);
Var neg(Var a);
Var relu(Var a);
Var softplus(Var a);
Var sigmoid(Var a);
Var exp(Var a);
Var log(Var a);
Var square(Var a);

// Reductions and reshaping.
Var sum(Var a);
Var mean(Var a);
// Column means, 1 x m.
Var mean_rows(Var a);
// Row sums, n x 1.
Var sum_cols(Var a);
Var row(Var a, std::size_t r);
Var pick(Var a, std::size_t r, std::size_t c);
Var transpose(Var a);
Var flatten(Var a);
Var concat_cols(std::span<const Var> parts);
// Joins 1 x L_i row vectors into one row.
Var concat_flat(std::span<const Var> parts);
// a[n x m] / d[n x 1] rowwise.
Var div_rows(Var a, Var d);

// Row-wise log-softmax of a 1 x L vector.
Var log_softmax(Var a);
// Rows with mask[r] set become `fill`; no gradient reaches them.
Var mask_rows(Var a, const std::vector<bool>& mask, double fill);
// Row-wise layer normalization with learnable gain and bias (1 x m).
Var layer_norm(Var a, Var gain, Var bias, double eps = 1e-5);
// Inverted dropout; identity when p == 0.
Var dropout(Var a, double p, Rng& rng);

}  // namespace dpo::ad
