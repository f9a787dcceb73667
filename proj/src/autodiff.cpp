#include "dpo/autodiff.hpp"

#include <algorithm>
#include <cmath>

namespace dpo::ad {

const Tensor& Var::value() const { return tape->value(id); }

double Var::scalar() const {
  const Tensor& v = value();
  if (v.size() != 1) throw InvalidInput("scalar() on a " + v.shape_string() + " tensor");
  return v[0];
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Tape::param(ParameterSet& params, const std::string& name) {
  Parameter& p = params.at(name);
  auto it = bound_.find(&p);
  if (it != bound_.end()) return Var{this, it->second};
  Node n;
  n.value = p.value;
  n.requires_grad = grad_enabled_;
  n.param_grad = grad_enabled_ ? &p.grad : nullptr;
  nodes_.push_back(std::move(n));
  bound_.emplace(&p, nodes_.size() - 1);
  return Var{this, nodes_.size() - 1};
}

Var Tape::frozen(const ParameterSet& params, const std::string& name) {
  const Parameter& p = params.at(name);
  auto it = bound_.find(&p);
  if (it != bound_.end()) return Var{this, it->second};
  Var v = constant(p.value);
  bound_.emplace(&p, v.id);
  return v;
}

Tensor& Tape::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.grad_allocated) {
    n.grad = Tensor(n.value.shape(), 0.0);
    n.grad_allocated = true;
  }
  return n.grad;
}

Var Tape::push(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  return push(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
}

Var Tape::push(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  if (grad_enabled_) {
    for (const Var& v : inputs) {
      if (nodes_[v.id].requires_grad) {
        n.requires_grad = true;
        break;
      }
    }
  }
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw InvalidInput("loss belongs to another tape");
  if (nodes_[loss.id].value.size() != 1) throw InvalidInput("backward() requires a scalar loss");
  if (!nodes_[loss.id].requires_grad) return;
  grad(loss.id)[0] = 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.grad_allocated || !n.requires_grad) continue;
    if (n.backward) n.backward(*this, n.grad);
  }
  for (auto& n : nodes_) {
    if (n.param_grad && n.grad_allocated) {
      auto& dst = n.param_grad->data();
      const auto& src = n.grad.data();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
  }
}

namespace {

void check_same(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw InvalidInput(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " + b.shape_string());
  }
}

// Accumulates `g` into the gradient of `v` if it participates in backward.
template <typename F>
void accumulate(Tape& t, Var v, F&& f) {
  if (t.requires_grad(v.id)) f(t.grad(v.id));
}

template <typename Fwd, typename Deriv>
Var unary(Var a, Fwd fwd, Deriv deriv) {
  const Tensor& x = a.value();
  Tensor y(std::vector<std::size_t>{x.rows(), x.cols()});
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = fwd(x[i]);
  return a.tape->push(std::move(y), {a}, [a, deriv](Tape& t, const Tensor& g) {
    const Tensor& x = t.value(a.id);
    accumulate(t, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * deriv(x[i]);
    });
  });
}

}  // namespace

Var matmul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const std::size_t n = A.rows(), k = A.cols(), m = B.cols();
  if (B.rows() != k) throw InvalidInput("matmul: inner dimensions " + A.shape_string() + " x " + B.shape_string());
  Tensor C(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    double* ci = C.raw() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A.raw()[i * k + p];
      if (aip == 0.0) continue;
      const double* bp = B.raw() + p * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += aip * bp[j];
    }
  }
  return a.tape->push(std::move(C), {a, b}, [a, b, n, k, m](Tape& t, const Tensor& g) {
    const Tensor& A = t.value(a.id);
    const Tensor& B = t.value(b.id);
    accumulate(t, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < m; ++j) s += g.raw()[i * m + j] * B.raw()[p * m + j];
          ga.raw()[i * k + p] += s;
        }
      }
    });
    accumulate(t, b, [&](Tensor& gb) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = A.raw()[i * k + p];
          if (aip == 0.0) continue;
          for (std::size_t j = 0; j < m; ++j) gb.raw()[p * m + j] += aip * g.raw()[i * m + j];
        }
      }
    });
  });
}

Var add(Var a, Var b) {
  check_same(a.value(), b.value(), "add");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b.value()[i];
  return a.tape->push(std::move(y), {a, b}, [a, b](Tape& t, const Tensor& g) {
    accumulate(t, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
    accumulate(t, b, [&](Tensor& gb) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    });
  });
}

Var sub(Var a, Var b) {
  check_same(a.value(), b.value(), "sub");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= b.value()[i];
  return a.tape->push(std::move(y), {a, b}, [a, b](Tape& t, const Tensor& g) {
    accumulate(t, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
    accumulate(t, b, [&](Tensor& gb) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    });
  });
}

Var mul(Var a, Var b) {
  check_same(a.value(), b.value(), "mul");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
  return a.tape->push(std::move(y), {a, b}, [a, b](Tape& t, const Tensor& g) {
    const Tensor& A = t.value(a.id);
    const Tensor& B = t.value(b.id);
    accumulate(t, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B[i];
    });
    accumulate(t, b, [&](Tensor& gb) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A[i];
    });
  });
}

Var add_row(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (B.rows() != 1 || B.cols() != A.cols()) {
    throw InvalidInput("add_row: " + A.shape_string() + " + " + B.shape_string());
  }
  const std::size_t n = A.rows(), m = A.cols();
  Tensor y(std::vector<std::size_t>{n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) y(i, j) = A(i, j) + B[j];
  return a.tape->push(std::move(y), {a, b}, [a, b, n, m](Tape& t, const Tensor& g) {
    accumulate(t, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
    accumulate(t, b, [&](Tensor& gb) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) gb[j] += g[i * m + j];
    });
  });
}

Var sub_row(Var a, Var b) { return add_row(a, neg(b)); }

Var scale(Var a, double c) {
  Tensor y = a.value();
  for (double& v : y.data()) v *= c;
  return a.tape->push(std::move(y), {a}, [a, c](Tape& t, const Tensor& g) {
    accumulate(t, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
    });
  });
}

Var scale_by(Var a, Var s) {
  if (s.value().size() != 1) throw InvalidInput("scale_by expects a scalar factor");
  const double c = s.value()[0];
  Tensor y = a.value();
  for (double& v : y.data()) v *= c;
  return a.tape->push(std::move(y), {a, s}, [a, s](Tape& t, const Tensor& g) {
    const double c = t.value(s.id)[0];
    const Tensor& A = t.value(a.id);
    accumulate(t, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
    });
    accumulate(t, s, [&](Tensor& gs) {
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * A[i];
      gs[0] += acc;
    });
  });
}

Var add_scalar(Var a, double c) {
  Tensor y = a.value();
  for (double& v : y.data()) v += c;
  return a.tape->push(std::move(y), {a}, [a](Tape& t, const Tensor& g) {
    accumulate(t, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  });
}

Var neg(Var a) { return scale(a, -1.0); }

Var relu(Var a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

namespace {
double softplus_value(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
}  // namespace

Var softplus(Var a) { return unary(a, softplus_value, sigmoid_value); }

Var sigmoid(Var a) {
  return unary(a, sigmoid_value, [](double x) {
    const double s = sigmoid_value(x);
    return s * (1.0 - s);
  });
}

Var exp(Var a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

Var log(Var a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

Var square(Var a) {
  return unary(a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape->push(Tensor::scalar(s), {a}, [a](Tape& t, const Tensor& g) {
    accumulate(t, a, [&](Tensor& ga) {
      for (double& v : ga.data()) v += g[0];
    });
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var mean_rows(Var a) {
  const Tensor& A = a.value();
  const std::size_t n = A.rows(), m = A.cols();
  Tensor y(1, m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) y[j] += A(i, j);
  for (double& v : y.data()) v /= static_cast<double>(n);
  return a.tape->push(std::move(y), {a}, [a, n, m](Tape& t, const Tensor& g) {
    accumulate(t, a, [&](Tensor& ga) {
      const double inv = 1.0 / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) ga[i * m + j] += g[j] * inv;
    });
  });
}

Var sum_cols(Var a) {
  const Tensor& A = a.value();
  const std::size_t n = A.rows(), m = A.cols();
  Tensor y(n, 1);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) y[i] += A(i, j);
  return a.tape->push(std::move(y), {a}, [a, n, m](Tape& t, const Tensor& g) {
    accumulate(t, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) ga[i * m + j] += g[i];
    });
  });
}

Var row(Var a, std::size_t r) {
  const Tensor& A = a.value();
  if (r >= A.rows()) throw InvalidInput("row index out of range");
  const std::size_t m = A.cols();
  Tensor y(1, m);
  for (std::size_t j = 0; j < m; ++j) y[j] = A(r, j);
  return a.tape->push(std::move(y), {a}, [a, r, m](Tape& t, const Tensor& g) {
    accumulate(t, a, [&](Tensor& ga) {
      for (std::size_t j = 0; j < m; ++j) ga[r * m + j] += g[j];
    });
  });
}

Var pick(Var a, std::size_t r, std::size_t c) {
  const Tensor& A = a.value();
  if (r >= A.rows() || c >= A.cols()) throw InvalidInput("pick index out of range");
  const std::size_t idx = r * A.cols() + c;
  return a.tape->push(Tensor::scalar(A[idx]), {a}, [a, idx](Tape& t, const Tensor& g) {
    accumulate(t, a, [&](Tensor& ga) { ga[idx] += g[0]; });
  });
}

Var transpose(Var a) {
  const Tensor& A = a.value();
  const std::size_t n = A.rows(), m = A.cols();
  Tensor y(m, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) y(j, i) = A(i, j);
  return a.tape->push(std::move(y), {a}, [a, n, m](Tape& t, const Tensor& g) {
    accumulate(t, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) ga[i * m + j] += g[j * n + i];
    });
  });
}

Var flatten(Var a) {
  const Tensor& A = a.value();
  Tensor y(1, A.size(), A.data());
  return a.tape->push(std::move(y), {a}, [a](Tape& t, const Tensor& g) {
    accumulate(t, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  });
}

namespace {

Var push_many(Tape& tape, Tensor value, std::span<const Var> parts, Tape::BackwardFn fn) {
  return tape.push(std::move(value), parts, std::move(fn));
}

}  // namespace

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw InvalidInput("concat_cols of nothing");
  const std::size_t n = parts[0].value().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.value().rows() != n) throw InvalidInput("concat_cols: row count mismatch");
    widths.push_back(p.value().cols());
    total += p.value().cols();
  }
  Tensor y(n, total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& P = parts[k].value();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) y(i, off + j) = P(i, j);
    off += widths[k];
  }
  std::vector<Var> copy(parts.begin(), parts.end());
  return push_many(*parts[0].tape, std::move(y), parts, [copy, widths, n, total](Tape& t, const Tensor& g) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < copy.size(); ++k) {
      accumulate(t, copy[k], [&](Tensor& gp) {
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j) gp[i * widths[k] + j] += g[i * total + off + j];
      });
      off += widths[k];
    }
  });
}

Var concat_flat(std::span<const Var> parts) {
  if (parts.empty()) throw InvalidInput("concat_flat of nothing");
  std::vector<double> data;
  std::vector<std::size_t> sizes;
  for (const Var& p : parts) {
    sizes.push_back(p.value().size());
    data.insert(data.end(), p.value().data().begin(), p.value().data().end());
  }
  const std::size_t total = data.size();
  std::vector<Var> copy(parts.begin(), parts.end());
  return push_many(*parts[0].tape, Tensor(1, total, std::move(data)), parts, [copy, sizes](Tape& t, const Tensor& g) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < copy.size(); ++k) {
      accumulate(t, copy[k], [&](Tensor& gp) {
        for (std::size_t i = 0; i < sizes[k]; ++i) gp[i] += g[off + i];
      });
      off += sizes[k];
    }
  });
}

Var div_rows(Var a, Var d) {
  const Tensor& A = a.value();
  const Tensor& D = d.value();
  const std::size_t n = A.rows(), m = A.cols();
  if (D.rows() != n || D.cols() != 1) throw InvalidInput("div_rows: divisor must be n x 1");
  Tensor y(n, m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) y(i, j) = A(i, j) / D[i];
  return a.tape->push(std::move(y), {a, d}, [a, d, n, m](Tape& t, const Tensor& g) {
    const Tensor& A = t.value(a.id);
    const Tensor& D = t.value(d.id);
    accumulate(t, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) ga[i * m + j] += g[i * m + j] / D[i];
    });
    accumulate(t, d, [&](Tensor& gd) {
      for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < m; ++j) s += g[i * m + j] * A(i, j);
        gd[i] -= s / (D[i] * D[i]);
      }
    });
  });
}

Var log_softmax(Var a) {
  const Tensor& A = a.value();
  if (A.rows() != 1) throw InvalidInput("log_softmax expects a row vector");
  const double mx = *std::max_element(A.data().begin(), A.data().end());
  double s = 0.0;
  for (double v : A.data()) s += std::exp(v - mx);
  const double lse = mx + std::log(s);
  Tensor y = A;
  std::vector<double> probs(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    y[i] -= lse;
    probs[i] = std::exp(y[i]);
  }
  return a.tape->push(std::move(y), {a}, [a, probs = std::move(probs)](Tape& t, const Tensor& g) {
    double gs = 0.0;
    for (double v : g.data()) gs += v;
    accumulate(t, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] - probs[i] * gs;
    });
  });
}

Var mask_rows(Var a, const std::vector<bool>& mask, double fill) {
  const Tensor& A = a.value();
  const std::size_t n = A.rows(), m = A.cols();
  if (mask.size() != n) throw InvalidInput("mask length does not match row count");
  Tensor y = A;
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    for (std::size_t j = 0; j < m; ++j) y(i, j) = fill;
  }
  return a.tape->push(std::move(y), {a}, [a, mask, m](Tape& t, const Tensor& g) {
    accumulate(t, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask[i]) continue;
        for (std::size_t j = 0; j < m; ++j) ga[i * m + j] += g[i * m + j];
      }
    });
  });
}

Var layer_norm(Var a, Var gain, Var bias, double eps) {
  const Tensor& A = a.value();
  const std::size_t n = A.rows(), m = A.cols();
  if (gain.value().size() != m || bias.value().size() != m) throw InvalidInput("layer_norm: gain/bias width mismatch");
  Tensor xhat(n, m);
  std::vector<double> inv_std(n);
  for (std::size_t i = 0; i < n; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < m; ++j) mu += A(i, j);
    mu /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t j = 0; j < m; ++j) var += (A(i, j) - mu) * (A(i, j) - mu);
    var /= static_cast<double>(m);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < m; ++j) xhat(i, j) = (A(i, j) - mu) * inv_std[i];
  }
  Tensor y(n, m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) y(i, j) = xhat(i, j) * gain.value()[j] + bias.value()[j];
  Tape& tape = *a.tape;
  Var parts[] = {a, gain, bias};
  return push_many(tape, std::move(y), parts, [a, gain, bias, xhat, inv_std, n, m](Tape& t, const Tensor& g) {
    const Tensor& G = t.value(gain.id);
    accumulate(t, gain, [&](Tensor& gg) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) gg[j] += g[i * m + j] * xhat(i, j);
    });
    accumulate(t, bias, [&](Tensor& gb) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) gb[j] += g[i * m + j];
    });
    accumulate(t, a, [&](Tensor& ga) {
      const double inv_m = 1.0 / static_cast<double>(m);
      for (std::size_t i = 0; i < n; ++i) {
        double mean_d = 0.0, mean_dx = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
          const double d = g[i * m + j] * G[j];
          mean_d += d;
          mean_dx += d * xhat(i, j);
        }
        mean_d *= inv_m;
        mean_dx *= inv_m;
        for (std::size_t j = 0; j < m; ++j) {
          const double d = g[i * m + j] * G[j];
          ga[i * m + j] += inv_std[i] * (d - mean_d - xhat(i, j) * mean_dx);
        }
      }
    });
  });
}

Var dropout(Var a, double p, Rng& rng) {
  if (p <= 0.0) return a;
  if (p >= 1.0) throw InvalidInput("dropout probability must be < 1");
  const Tensor& A = a.value();
  std::vector<double> keep(A.size());
  for (double& k : keep) k = rng.uniform() < p ? 0.0 : 1.0 / (1.0 - p);
  Tensor y = A;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= keep[i];
  return a.tape->push(std::move(y), {a}, [a, keep](Tape& t, const Tensor& g) {
    accumulate(t, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * keep[i];
    });
  });
}

}  // namespace dpo::ad
