#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// A Tape records every primitive evaluated through it. Parameters enter the graph as leaves bound
// to a ParameterStore entry; Tape::backward() accumulates d(loss)/d(param) into Parameter::grad.
// A tape constructed with recording disabled only evaluates values (inference mode).
//
// Shape rules (m rows, n columns; "rows" means the product of all leading axes):
//   matmul          [m,k] x [k,n] -> [m,n]
//   add/sub/mul     identical shapes, elementwise
//   add_bias        [.., n] + [n] -> [.., n]
//   mul_bias        [.., n] * [n] -> [.., n]
//   scale/relu/tanh/exp/log/clamp   elementwise, shape preserved
//   softmax/log_softmax/layer_norm  along the last axis, shape preserved
//   concat          [m,n1], [m,n2], ... -> [m, n1+n2+...]
//   slice           [m,n] -> [m, end-begin] along the last axis
//   sum/mean        any -> scalar
//   sum_last        [m,n] -> [m]
//   l2sq_distance, cosine_similarity   [m,n] x [m,n] -> [m], row-wise
//   cross_entropy   target [m,n] (constant) x logits [m,n] -> [m]
//   repeat_rows     [m,n] -> [m*r, n], row i copied to rows i*r .. i*r+r-1
//   reshape         any -> any shape with the same element count

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "mbx/parameters.hpp"
#include "mbx/tensor.hpp"

namespace mbx {

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }

  Var constant(Tensor value) {
    Node n;
    n.owned = std::move(value);
    return push_node(std::move(n));
  }

  // Leaf whose gradient is retained on the tape (used for input-gradient checks).
  Var variable(Tensor value) {
    Node n;
    n.owned = std::move(value);
    n.requires_grad = recording_;
    return push_node(std::move(n));
  }

  // Trainable parameter; gradients flow into the store entry on backward().
  Var param(ParameterStore& store, const std::string& name) {
    Parameter& p = store.at(name);
    if (auto it = param_nodes_.find(&p.value); it != param_nodes_.end()) return Var(this, it->second);
    Node n;
    n.view = &p.value;
    n.param = &p;
    n.requires_grad = recording_;
    Var v = push_node(std::move(n));
    param_nodes_.emplace(&p.value, v.id());
    return v;
  }

  // Read-only parameter (target networks); never receives gradient.
  Var param(const ParameterStore& store, const std::string& name) {
    const Tensor* t = &store.at(name).value;
    if (auto it = param_nodes_.find(t); it != param_nodes_.end()) return Var(this, it->second);
    Node n;
    n.view = t;
    Var v = push_node(std::move(n));
    param_nodes_.emplace(t, v.id());
    return v;
  }

  const Tensor& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.view ? *n.view : n.owned;
  }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Gradient held for a node after backward(); zeros when the node did not participate.
  Tensor grad(Var v) const {
    const Node& n = nodes_[v.id()];
    if (n.grad.size() == 0 && value(v.id()).size() != 0) return Tensor(value(v.id()).shape());
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  void backward(Var loss) {
    if (&loss.tape() != this) throw std::invalid_argument("backward: loss belongs to another tape");
    if (consumed_) throw std::logic_error("backward: tape already consumed");
    if (!recording_) throw std::logic_error("backward: tape was not recording");
    const Tensor& lv = value(loss.id());
    if (lv.size() != 1) throw ShapeError("backward: loss must be scalar, got shape " + shape_string(lv.shape()));
    consumed_ = true;
    grad_slot(loss.id()).fill(1.0);
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.size() == 0) continue;
      if (n.backward) n.backward(*this, n.grad);
      if (n.param) {
        auto dst = n.param->grad.data();
        auto src = n.grad.data();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
      }
    }
  }

  // Records a primitive; the closure is kept only when some input needs a gradient.
  Var record(Tensor out, std::initializer_list<Var> inputs, BackwardFn fn) {
    return record(std::move(out), std::vector<Var>(inputs), std::move(fn));
  }

  Var record(Tensor out, const std::vector<Var>& inputs, BackwardFn fn) {
    Node n;
    n.owned = std::move(out);
    if (recording_) {
      for (const Var& v : inputs) {
        if (nodes_[v.id()].requires_grad) {
          n.requires_grad = true;
          break;
        }
      }
      if (n.requires_grad) n.backward = std::move(fn);
    }
    return push_node(std::move(n));
  }

  // Gradient accumulator for a node, allocated on first use.
  Tensor& grad_slot(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Tensor(value(id).shape());
    return n.grad;
  }

  void accumulate(Var v, const Tensor& g) {
    if (!nodes_[v.id()].requires_grad) return;
    auto dst = grad_slot(v.id()).data();
    auto src = g.data();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
  }

 private:
  struct Node {
    Tensor owned;
    const Tensor* view = nullptr;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter* param = nullptr;
  };

  Var push_node(Node n) {
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  bool recording_;
  bool consumed_ = false;
  std::vector<Node> nodes_;
  std::unordered_map<const Tensor*, std::size_t> param_nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

namespace detail {

inline void require_same(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw shape_error(op, a.shape(), b.shape());
}

inline void require_matrix(std::string_view op, const Tensor& a) {
  if (a.rank() != 2) throw ShapeError(std::string(op) + ": expected rank-2 input, got " + shape_string(a.shape()));
}

template <typename F>
Tensor map(const Tensor& a, F f) {
  Tensor out(a.shape());
  auto src = a.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = f(src[i]);
  return out;
}

inline Shape leading_shape(const Tensor& a) {
  Shape s = a.shape();
  if (!s.empty()) s.pop_back();
  return s;
}

constexpr double kNormFloor = 1e-12;

}  // namespace detail

inline Var matmul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0)) throw shape_error("matmul", A.shape(), B.shape());
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  Tensor C(Shape{m, n});
  const double* pa = A.data().data();
  const double* pb = B.data().data();
  double* pc = C.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = pc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      if (av == 0.0) continue;
      const double* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return a.tape().record(std::move(C), {a, b}, [a, b, m, k, n](Tape& t, const Tensor& g) {
    const double* pg = g.data().data();
    if (a.requires_grad()) {
      const double* pb = b.value().data().data();
      double* da = t.grad_slot(a.id()).data().data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += pg[i * n + j] * pb[p * n + j];
          da[i * k + p] += s;
        }
      }
    }
    if (b.requires_grad()) {
      const double* pa = a.value().data().data();
      double* db = t.grad_slot(b.id()).data().data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double av = pa[i * k + p];
          if (av == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) db[p * n + j] += av * pg[i * n + j];
        }
      }
    }
  });
}

inline Var add(Var a, Var b) {
  detail::require_same("add", a.value(), b.value());
  Tensor out = a.value();
  auto pb = b.value().data();
  auto po = out.data();
  for (std::size_t i = 0; i < po.size(); ++i) po[i] += pb[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

inline Var sub(Var a, Var b) {
  detail::require_same("sub", a.value(), b.value());
  Tensor out = a.value();
  auto pb = b.value().data();
  auto po = out.data();
  for (std::size_t i = 0; i < po.size(); ++i) po[i] -= pb[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    if (b.requires_grad()) {
      auto db = t.grad_slot(b.id()).data();
      auto pg = g.data();
      for (std::size_t i = 0; i < db.size(); ++i) db[i] -= pg[i];
    }
  });
}

inline Var mul(Var a, Var b) {
  detail::require_same("mul", a.value(), b.value());
  Tensor out = a.value();
  auto pb = b.value().data();
  auto po = out.data();
  for (std::size_t i = 0; i < po.size(); ++i) po[i] *= pb[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    auto pg = g.data();
    if (a.requires_grad()) {
      auto da = t.grad_slot(a.id()).data();
      auto vb = b.value().data();
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += pg[i] * vb[i];
    }
    if (b.requires_grad()) {
      auto db = t.grad_slot(b.id()).data();
      auto va = a.value().data();
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += pg[i] * va[i];
    }
  });
}

inline Var add_bias(Var a, Var bias) {
  const Tensor& A = a.value();
  const Tensor& B = bias.value();
  if (B.rank() != 1 || A.rank() == 0 || A.cols() != B.dim(0)) throw shape_error("add_bias", A.shape(), B.shape());
  Tensor out = A;
  const std::size_t n = A.cols(), m = A.rows();
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] += B[c];
  return a.tape().record(std::move(out), {a, bias}, [a, bias, m, n](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    if (bias.requires_grad()) {
      auto db = t.grad_slot(bias.id()).data();
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) db[c] += g[r * n + c];
    }
  });
}

inline Var mul_bias(Var a, Var gain) {
  const Tensor& A = a.value();
  const Tensor& G = gain.value();
  if (G.rank() != 1 || A.rank() == 0 || A.cols() != G.dim(0)) throw shape_error("mul_bias", A.shape(), G.shape());
  Tensor out = A;
  const std::size_t n = A.cols(), m = A.rows();
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] *= G[c];
  return a.tape().record(std::move(out), {a, gain}, [a, gain, m, n](Tape& t, const Tensor& g) {
    if (a.requires_grad()) {
      auto da = t.grad_slot(a.id()).data();
      const Tensor& G = gain.value();
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) da[r * n + c] += g[r * n + c] * G[c];
    }
    if (gain.requires_grad()) {
      auto dg = t.grad_slot(gain.id()).data();
      const Tensor& A = a.value();
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) dg[c] += g[r * n + c] * A[r * n + c];
    }
  });
}

inline Var scale(Var a, double factor) {
  Tensor out = detail::map(a.value(), [factor](double x) { return x * factor; });
  return a.tape().record(std::move(out), {a}, [a, factor](Tape& t, const Tensor& g) {
    auto da = t.grad_slot(a.id()).data();
    for (std::size_t i = 0; i < da.size(); ++i) da[i] += factor * g[i];
  });
}

inline Var add_scalar(Var a, double c) {
  Tensor out = detail::map(a.value(), [c](double x) { return x + c; });
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Tensor& g) { t.accumulate(a, g); });
}

inline Var relu(Var a) {
  Tensor out = detail::map(a.value(), [](double x) { return x > 0.0 ? x : 0.0; });
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    auto da = t.grad_slot(a.id()).data();
    auto va = a.value().data();
    for (std::size_t i = 0; i < da.size(); ++i)
      if (va[i] > 0.0) da[i] += g[i];
  });
}

inline Var tanh(Var a) {
  Tensor out = detail::map(a.value(), [](double x) { return std::tanh(x); });
  Tensor saved = out;
  return a.tape().record(std::move(out), {a}, [a, saved = std::move(saved)](Tape& t, const Tensor& g) {
    auto da = t.grad_slot(a.id()).data();
    for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[i] * (1.0 - saved[i] * saved[i]);
  });
}

inline Var exp(Var a) {
  Tensor out = detail::map(a.value(), [](double x) { return std::exp(x); });
  Tensor saved = out;
  return a.tape().record(std::move(out), {a}, [a, saved = std::move(saved)](Tape& t, const Tensor& g) {
    auto da = t.grad_slot(a.id()).data();
    for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[i] * saved[i];
  });
}

inline Var log(Var a) {
  Tensor out = detail::map(a.value(), [](double x) { return std::log(x); });
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    auto da = t.grad_slot(a.id()).data();
    auto va = a.value().data();
    for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[i] / va[i];
  });
}

// Gradient passes only where lo <= x <= hi.
inline Var clamp(Var a, double lo, double hi) {
  Tensor out = detail::map(a.value(), [lo, hi](double x) { return std::clamp(x, lo, hi); });
  return a.tape().record(std::move(out), {a}, [a, lo, hi](Tape& t, const Tensor& g) {
    auto da = t.grad_slot(a.id()).data();
    auto va = a.value().data();
    for (std::size_t i = 0; i < da.size(); ++i)
      if (va[i] >= lo && va[i] <= hi) da[i] += g[i];
  });
}

namespace detail {

inline Tensor softmax_rows(const Tensor& x) {
  Tensor out(x.shape());
  const std::size_t n = x.cols(), m = x.rows();
  for (std::size_t r = 0; r < m; ++r) {
    const double* in = x.data().data() + r * n;
    double* o = out.data().data() + r * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < n; ++c) mx = std::max(mx, in[c]);
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      o[c] = std::exp(in[c] - mx);
      s += o[c];
    }
    for (std::size_t c = 0; c < n; ++c) o[c] /= s;
  }
  return out;
}

inline Tensor log_softmax_rows(const Tensor& x) {
  Tensor out(x.shape());
  const std::size_t n = x.cols(), m = x.rows();
  for (std::size_t r = 0; r < m; ++r) {
    const double* in = x.data().data() + r * n;
    double* o = out.data().data() + r * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < n; ++c) mx = std::max(mx, in[c]);
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) s += std::exp(in[c] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t c = 0; c < n; ++c) o[c] = in[c] - lse;
  }
  return out;
}

}  // namespace detail

inline Var softmax(Var a) {
  Tensor out = detail::softmax_rows(a.value());
  Tensor y = out;
  return a.tape().record(std::move(out), {a}, [a, y = std::move(y)](Tape& t, const Tensor& g) {
    auto da = t.grad_slot(a.id()).data();
    const std::size_t n = y.cols(), m = y.rows();
    for (std::size_t r = 0; r < m; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < n; ++c) dot += g[r * n + c] * y[r * n + c];
      for (std::size_t c = 0; c < n; ++c) da[r * n + c] += y[r * n + c] * (g[r * n + c] - dot);
    }
  });
}

inline Var log_softmax(Var a) {
  Tensor out = detail::log_softmax_rows(a.value());
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    Tensor p = detail::softmax_rows(a.value());
    auto da = t.grad_slot(a.id()).data();
    const std::size_t n = p.cols(), m = p.rows();
    for (std::size_t r = 0; r < m; ++r) {
      double gs = 0.0;
      for (std::size_t c = 0; c < n; ++c) gs += g[r * n + c];
      for (std::size_t c = 0; c < n; ++c) da[r * n + c] += g[r * n + c] - p[r * n + c] * gs;
    }
  });
}

// Normalizes each row to zero mean and unit variance (no affine terms).
inline Var layer_norm(Var a, double eps = 1e-5) {
  const Tensor& x = a.value();
  const std::size_t n = x.cols(), m = x.rows();
  if (n == 0) throw ShapeError("layer_norm: empty last axis");
  Tensor y(x.shape());
  std::vector<double> inv_std(m);
  for (std::size_t r = 0; r < m; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < n; ++c) mu += x[r * n + c];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      const double d = x[r * n + c] - mu;
      var += d * d;
    }
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) y[r * n + c] = (x[r * n + c] - mu) * inv_std[r];
  }
  Tensor ys = y;
  return a.tape().record(std::move(y), {a},
                         [a, ys = std::move(ys), inv_std = std::move(inv_std), m, n](Tape& t, const Tensor& g) {
                           auto da = t.grad_slot(a.id()).data();
                           const double dn = static_cast<double>(n);
                           for (std::size_t r = 0; r < m; ++r) {
                             double mg = 0.0, mgy = 0.0;
                             for (std::size_t c = 0; c < n; ++c) {
                               mg += g[r * n + c];
                               mgy += g[r * n + c] * ys[r * n + c];
                             }
                             mg /= dn;
                             mgy /= dn;
                             for (std::size_t c = 0; c < n; ++c)
                               da[r * n + c] += inv_std[r] * (g[r * n + c] - mg - ys[r * n + c] * mgy);
                           }
                         });
}

inline Var concat(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Tensor& first = parts[0].value();
  const std::size_t m = first.rows();
  Shape lead = detail::leading_shape(first);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    if (v.rank() == 0 || detail::leading_shape(v) != lead) throw shape_error("concat", first.shape(), v.shape());
    widths.push_back(v.cols());
    total += v.cols();
  }
  Shape out_shape = lead;
  out_shape.push_back(total);
  Tensor out(out_shape);
  std::size_t off = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Tensor& v = parts[i].value();
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < widths[i]; ++c) out[r * total + off + c] = v[r * widths[i] + c];
    off += widths[i];
  }
  return parts[0].tape().record(std::move(out), parts, [parts, widths, m, total](Tape& t, const Tensor& g) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      if (parts[i].requires_grad()) {
        auto d = t.grad_slot(parts[i].id()).data();
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t c = 0; c < widths[i]; ++c) d[r * widths[i] + c] += g[r * total + off + c];
      }
      off += widths[i];
    }
  });
}

inline Var slice(Var a, std::size_t begin, std::size_t end) {
  const Tensor& x = a.value();
  const std::size_t n = x.cols(), m = x.rows();
  if (x.rank() == 0 || begin > end || end > n) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid for shape " +
                     shape_string(x.shape()));
  }
  const std::size_t w = end - begin;
  Shape s = detail::leading_shape(x);
  s.push_back(w);
  Tensor out(s);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < w; ++c) out[r * w + c] = x[r * n + begin + c];
  return a.tape().record(std::move(out), {a}, [a, begin, w, m, n](Tape& t, const Tensor& g) {
    auto d = t.grad_slot(a.id()).data();
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < w; ++c) d[r * n + begin + c] += g[r * w + c];
  });
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape().record(Tensor::scalar(s), {a}, [a](Tape& t, const Tensor& g) {
    auto d = t.grad_slot(a.id()).data();
    const double gv = g[0];
    for (auto& x : d) x += gv;
  });
}

inline Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), 1.0 / n);
}

inline Var sum_last(Var a) {
  const Tensor& x = a.value();
  const std::size_t n = x.cols(), m = x.rows();
  Tensor out(detail::leading_shape(x));
  for (std::size_t r = 0; r < m; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) s += x[r * n + c];
    out[r] = s;
  }
  return a.tape().record(std::move(out), {a}, [a, m, n](Tape& t, const Tensor& g) {
    auto d = t.grad_slot(a.id()).data();
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c) d[r * n + c] += g[r];
  });
}

inline Var l2sq_distance(Var a, Var b) {
  detail::require_same("l2sq_distance", a.value(), b.value());
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  const std::size_t n = x.cols(), m = x.rows();
  Tensor out(detail::leading_shape(x));
  for (std::size_t r = 0; r < m; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      const double d = x[r * n + c] - y[r * n + c];
      s += d * d;
    }
    out[r] = s;
  }
  return a.tape().record(std::move(out), {a, b}, [a, b, m, n](Tape& t, const Tensor& g) {
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    if (a.requires_grad()) {
      auto d = t.grad_slot(a.id()).data();
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) d[r * n + c] += 2.0 * g[r] * (x[r * n + c] - y[r * n + c]);
    }
    if (b.requires_grad()) {
      auto d = t.grad_slot(b.id()).data();
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) d[r * n + c] -= 2.0 * g[r] * (x[r * n + c] - y[r * n + c]);
    }
  });
}

// Row-wise a.b / (max(|a|, floor) * max(|b|, floor)).
inline Var cosine_similarity(Var a, Var b) {
  detail::require_same("cosine_similarity", a.value(), b.value());
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  const std::size_t n = x.cols(), m = x.rows();
  Tensor out(detail::leading_shape(x));
  std::vector<double> na(m), nb(m);
  for (std::size_t r = 0; r < m; ++r) {
    double dot = 0.0, sa = 0.0, sb = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      dot += x[r * n + c] * y[r * n + c];
      sa += x[r * n + c] * x[r * n + c];
      sb += y[r * n + c] * y[r * n + c];
    }
    na[r] = std::max(std::sqrt(sa), detail::kNormFloor);
    nb[r] = std::max(std::sqrt(sb), detail::kNormFloor);
    out[r] = dot / (na[r] * nb[r]);
  }
  Tensor cs = out;
  return a.tape().record(
      std::move(out), {a, b},
      [a, b, m, n, na = std::move(na), nb = std::move(nb), cs = std::move(cs)](Tape& t, const Tensor& g) {
        const Tensor& x = a.value();
        const Tensor& y = b.value();
        for (std::size_t r = 0; r < m; ++r) {
          const bool a_floor = na[r] <= detail::kNormFloor;
          const bool b_floor = nb[r] <= detail::kNormFloor;
          if (a.requires_grad()) {
            auto d = t.grad_slot(a.id()).data();
            for (std::size_t c = 0; c < n; ++c) {
              double v = y[r * n + c] / (na[r] * nb[r]);
              if (!a_floor) v -= cs[r] * x[r * n + c] / (na[r] * na[r]);
              d[r * n + c] += g[r] * v;
            }
          }
          if (b.requires_grad()) {
            auto d = t.grad_slot(b.id()).data();
            for (std::size_t c = 0; c < n; ++c) {
              double v = x[r * n + c] / (na[r] * nb[r]);
              if (!b_floor) v -= cs[r] * y[r * n + c] / (nb[r] * nb[r]);
              d[r * n + c] += g[r] * v;
            }
          }
        }
      });
}

// Row-wise -sum_i target_i * log_softmax(logits)_i. The target is a constant.
inline Var cross_entropy(const Tensor& target, Var logits) {
  const Tensor& l = logits.value();
  detail::require_same("cross_entropy", target, l);
  const std::size_t n = l.cols(), m = l.rows();
  Tensor lsm = detail::log_softmax_rows(l);
  Tensor out(detail::leading_shape(l));
  for (std::size_t r = 0; r < m; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c)
      if (target[r * n + c] != 0.0) s -= target[r * n + c] * lsm[r * n + c];
    out[r] = s;
  }
  return logits.tape().record(std::move(out), {logits}, [logits, target, m, n](Tape& t, const Tensor& g) {
    Tensor p = detail::softmax_rows(logits.value());
    auto d = t.grad_slot(logits.id()).data();
    for (std::size_t r = 0; r < m; ++r) {
      double mass = 0.0;
      for (std::size_t c = 0; c < n; ++c) mass += target[r * n + c];
      for (std::size_t c = 0; c < n; ++c) d[r * n + c] += g[r] * (mass * p[r * n + c] - target[r * n + c]);
    }
  });
}

inline Var repeat_rows(Var a, std::size_t times) {
  const Tensor& x = a.value();
  const std::size_t n = x.cols(), m = x.rows();
  Tensor out(Shape{m * times, n});
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t k = 0; k < times; ++k)
      for (std::size_t c = 0; c < n; ++c) out[(r * times + k) * n + c] = x[r * n + c];
  return a.tape().record(std::move(out), {a}, [a, m, n, times](Tape& t, const Tensor& g) {
    auto d = t.grad_slot(a.id()).data();
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t k = 0; k < times; ++k)
        for (std::size_t c = 0; c < n; ++c) d[r * n + c] += g[(r * times + k) * n + c];
  });
}

inline Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    auto d = t.grad_slot(a.id()).data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
  });
}

// Stop-gradient: the result is a constant copy.
inline Var detach(Var a) { return a.tape().constant(a.value()); }

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

}  // namespace mbx
