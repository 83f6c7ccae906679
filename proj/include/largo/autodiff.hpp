// SPDX-License-Identifier: Apache-2.0
#pragma once

// Define-by-run reverse-mode differentiation.
//
// Every primitive computes its value eagerly and appends a node holding the
// value, its parents and a vector-Jacobian rule to a Tape. backward() walks
// the nodes once in reverse creation order. Creation order is a topological
// order because a node can only reference nodes that already exist.

#include <cmath>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "largo/error.hpp"
#include "largo/linalg.hpp"
#include "largo/rng.hpp"
#include "largo/tensor.hpp"

namespace largo::ad {

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const DenseTensor& value() const;
  const DenseTensor& grad() const;
  const Shape& shape() const { return value().shape(); }
};

class Tape {
 public:
  /// Receives the gradient flowing into the node; accumulates into parents.
  using Backward = std::function<void(Tape&, const DenseTensor&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(DenseTensor value) { return push(std::move(value), {}, nullptr, true); }

  Var constant(DenseTensor value) { return push(std::move(value), {}, nullptr, false); }

  Var record(DenseTensor value, std::vector<std::size_t> parents, Backward rule) {
    bool needs = false;
    for (auto p : parents) {
      if (p >= nodes_.size()) throw ContractError("parent node is not on this tape");
      needs = needs || nodes_[p].needs_grad;
    }
    return push(std::move(value), std::move(parents), needs ? std::move(rule) : nullptr, needs);
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  const DenseTensor& value(std::size_t id) const { return nodes_.at(id).value; }

  bool needs_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }
  bool needs_grad(Var v) const { return needs_grad(v.id); }

  /// Accumulated gradient; zeros for nodes the loss never reached.
  const DenseTensor& grad(std::size_t id) {
    auto& n = nodes_.at(id);
    if (!n.grad) n.grad.emplace(n.value.shape(), 0.0);
    return *n.grad;
  }

  void accumulate(std::size_t id, DenseTensor g) {
    auto& n = nodes_.at(id);
    if (!n.needs_grad) return;
    n.value.require_same_shape(g, "gradient accumulation");
    if (!n.grad)
      n.grad.emplace(std::move(g));
    else
      *n.grad += g;
  }
  void accumulate(Var v, DenseTensor g) { accumulate(v.id, std::move(g)); }

  void zero_grads() {
    for (auto& n : nodes_) n.grad.reset();
  }

  /// Seeds d(loss)/d(loss) = 1 and propagates to every node.
  void backward(Var loss) {
    if (loss.tape != this) throw ContractError("loss belongs to another tape");
    if (value(loss.id).size() != 1)
      throw ContractError("backward requires a scalar loss, got shape " +
                          shape_str(value(loss.id).shape()));
    accumulate(loss.id, DenseTensor::scalar(1.0));
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.grad || !n.backward) continue;
      n.backward(*this, *n.grad);
    }
  }

 private:
  struct Node {
    DenseTensor value;
    std::vector<std::size_t> parents;
    Backward backward;
    bool needs_grad = false;
    std::optional<DenseTensor> grad;
  };

  Var push(DenseTensor value, std::vector<std::size_t> parents, Backward rule, bool needs) {
    nodes_.push_back(Node{std::move(value), std::move(parents), std::move(rule), needs, {}});
    return Var{this, nodes_.size() - 1};
  }

  // deque keeps node addresses stable while backward rules append to grads.
  std::deque<Node> nodes_;
};

inline const DenseTensor& Var::value() const { return tape->value(id); }
inline const DenseTensor& Var::grad() const { return tape->grad(id); }

namespace detail {
inline void same_tape(Var a, Var b) {
  if (a.tape != b.tape || a.tape == nullptr) throw ContractError("operands live on different tapes");
}
inline void same_shape(Var a, Var b, const char* op) {
  same_tape(a, b);
  a.value().require_same_shape(b.value(), op);
}
}  // namespace detail

// ---- elementwise -----------------------------------------------------------

inline Var add(Var a, Var b) {
  detail::same_shape(a, b, "add");
  return a.tape->record(a.value() + b.value(), {a.id, b.id},
                        [a, b](Tape& t, const DenseTensor& g) {
                          t.accumulate(a, g);
                          t.accumulate(b, g);
                        });
}

inline Var sub(Var a, Var b) {
  detail::same_shape(a, b, "sub");
  return a.tape->record(a.value() - b.value(), {a.id, b.id},
                        [a, b](Tape& t, const DenseTensor& g) {
                          t.accumulate(a, g);
                          t.accumulate(b, g * -1.0);
                        });
}

inline Var mul(Var a, Var b) {
  detail::same_shape(a, b, "mul");
  DenseTensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.tape->record(std::move(out), {a.id, b.id}, [a, b](Tape& t, const DenseTensor& g) {
    const auto& av = a.value();
    const auto& bv = b.value();
    if (t.needs_grad(a)) {
      DenseTensor ga = g;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= bv[i];
      t.accumulate(a, std::move(ga));
    }
    if (t.needs_grad(b)) {
      DenseTensor gb = g;
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] *= av[i];
      t.accumulate(b, std::move(gb));
    }
  });
}

inline Var div(Var a, Var b) {
  detail::same_shape(a, b, "div");
  DenseTensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= b.value()[i];
  return a.tape->record(std::move(out), {a.id, b.id}, [a, b](Tape& t, const DenseTensor& g) {
    const auto& av = a.value();
    const auto& bv = b.value();
    if (t.needs_grad(a)) {
      DenseTensor ga = g;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] /= bv[i];
      t.accumulate(a, std::move(ga));
    }
    if (t.needs_grad(b)) {
      DenseTensor gb = g;
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] *= -av[i] / (bv[i] * bv[i]);
      t.accumulate(b, std::move(gb));
    }
  });
}

inline Var scale(Var a, double s) {
  return a.tape->record(a.value() * s, {a.id},
                        [a, s](Tape& t, const DenseTensor& g) { t.accumulate(a, g * s); });
}

inline Var add_scalar(Var a, double s) {
  DenseTensor out = a.value();
  for (auto& v : out.data()) v += s;
  return a.tape->record(std::move(out), {a.id},
                        [a](Tape& t, const DenseTensor& g) { t.accumulate(a, g); });
}

inline Var leaky_relu(Var a, double slope = 0.01) {
  DenseTensor out = a.value();
  for (auto& v : out.data())
    if (v < 0.0) v *= slope;
  return a.tape->record(std::move(out), {a.id}, [a, slope](Tape& t, const DenseTensor& g) {
    DenseTensor ga = g;
    const auto& av = a.value();
    for (std::size_t i = 0; i < ga.size(); ++i)
      if (av[i] < 0.0) ga[i] *= slope;
    t.accumulate(a, std::move(ga));
  });
}

inline Var relu(Var a) { return leaky_relu(a, 0.0); }

// ---- reductions ------------------------------------------------------------

inline Var sum(Var a) {
  return a.tape->record(DenseTensor::scalar(largo::sum(a.value())), {a.id},
                        [a](Tape& t, const DenseTensor& g) {
                          t.accumulate(a, DenseTensor(a.shape(), g[0]));
                        });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

/// [C, ...] -> [C]: sums every axis but the first.
inline Var sum_trailing(Var a) {
  const std::size_t c = a.shape()[0], inner = a.value().size() / c;
  DenseTensor out({c}, 0.0);
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < inner; ++j) out[i] += a.value()[i * inner + j];
  return a.tape->record(std::move(out), {a.id}, [a, c, inner](Tape& t, const DenseTensor& g) {
    DenseTensor ga(a.shape());
    for (std::size_t i = 0; i < c; ++i)
      for (std::size_t j = 0; j < inner; ++j) ga[i * inner + j] = g[i];
    t.accumulate(a, std::move(ga));
  });
}

// ---- structure -------------------------------------------------------------

inline Var reshape(Var a, Shape shape) {
  return a.tape->record(a.value().reshaped(std::move(shape)), {a.id},
                        [a](Tape& t, const DenseTensor& g) {
                          t.accumulate(a, g.reshaped(a.shape()));
                        });
}

inline Var permute(Var a, std::vector<std::size_t> perm) {
  DenseTensor out = largo::permute(a.value(), perm);
  return a.tape->record(std::move(out), {a.id},
                        [a, inv = inverse_permutation(perm)](Tape& t, const DenseTensor& g) {
                          t.accumulate(a, largo::permute(g, inv));
                        });
}

/// Row m (1-based) of a tensor shaped [M, ...]; rank-1 inputs yield shape {1}.
inline Var select_row(Var a, std::size_t m) {
  const auto& s = a.shape();
  if (m < 1 || m > s[0])
    throw IndexError("row " + std::to_string(m) + " outside 1.." + std::to_string(s[0]));
  Shape rest(s.begin() + 1, s.end());
  if (rest.empty()) rest.push_back(1);
  const std::size_t inner = shape_numel(rest);
  DenseTensor out(rest);
  std::copy_n(a.value().raw() + (m - 1) * inner, inner, out.raw());
  return a.tape->record(std::move(out), {a.id}, [a, m, inner](Tape& t, const DenseTensor& g) {
    DenseTensor ga(a.shape(), 0.0);
    std::copy_n(g.raw(), inner, ga.raw() + (m - 1) * inner);
    t.accumulate(a, std::move(ga));
  });
}

/// Concatenation along axis 0; trailing shapes must agree.
inline Var concat(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  Shape s = parts[0].shape();
  std::size_t rows = 0;
  std::vector<std::size_t> ids;
  for (auto p : parts) {
    detail::same_tape(parts[0], p);
    const auto& ps = p.shape();
    if (ps.size() != s.size() || !std::equal(ps.begin() + 1, ps.end(), s.begin() + 1))
      throw DimensionError("concat trailing shapes differ: " + shape_str(ps) + " vs " +
                           shape_str(s));
    rows += ps[0];
    ids.push_back(p.id);
  }
  s[0] = rows;
  DenseTensor out(s);
  std::size_t off = 0;
  for (auto p : parts) {
    std::copy_n(p.value().raw(), p.value().size(), out.raw() + off);
    off += p.value().size();
  }
  return parts[0].tape->record(std::move(out), ids, [parts](Tape& t, const DenseTensor& g) {
    std::size_t off = 0;
    for (auto p : parts) {
      const std::size_t n = p.value().size();
      if (t.needs_grad(p)) {
        DenseTensor gp(p.shape());
        std::copy_n(g.raw() + off, n, gp.raw());
        t.accumulate(p, std::move(gp));
      }
      off += n;
    }
  });
}

// ---- contraction -----------------------------------------------------------

/// Differentiable contract_modes. The vector-Jacobian products are themselves
/// contractions of the output gradient with the other operand.
inline Var contract(Var x, Var y, ModePairs modes) {
  detail::same_tape(x, y);
  DenseTensor out = contract_modes(x.value(), y.value(), modes);
  return x.tape->record(std::move(out), {x.id, y.id}, [x, y, modes](Tape& t,
                                                                     const DenseTensor& g) {
    const std::size_t rx = x.shape().size(), ry = y.shape().size();
    std::vector<bool> xc(rx, false), yc(ry, false);
    for (auto [a, b] : modes) xc[a] = yc[b] = true;
    std::vector<std::size_t> xfree, yfree;
    for (std::size_t i = 0; i < rx; ++i)
      if (!xc[i]) xfree.push_back(i);
    for (std::size_t i = 0; i < ry; ++i)
      if (!yc[i]) yfree.push_back(i);
    // Gradient modes: [xfree..., yfree...]; a full contraction carries a dummy {1}.
    Shape gshape;
    for (auto i : xfree) gshape.push_back(x.shape()[i]);
    for (auto i : yfree) gshape.push_back(y.shape()[i]);
    const bool scalar_out = gshape.empty();
    const DenseTensor gg = scalar_out ? g : g.reshaped(gshape);

    if (t.needs_grad(x)) {
      // dX[xfree, xc] = sum over yfree of g[xfree, yfree] * y[yc, yfree].
      DenseTensor gx;
      if (scalar_out) {
        gx = largo::permute(y.value(), [&] {
          std::vector<std::size_t> p(rx);
          for (auto [a, b] : modes) p[a] = b;
          return p;
        }());
        gx *= g[0];
      } else {
        ModePairs back;
        for (std::size_t j = 0; j < yfree.size(); ++j) back.push_back({xfree.size() + j, yfree[j]});
        DenseTensor r = contract_modes(gg, y.value(), back);  // [xfree..., y contracted modes...]
        // Remaining y modes appear in increasing y-index order; map to x modes.
        std::vector<std::size_t> order;  // order[pos] = x mode held at pos
        for (auto i : xfree) order.push_back(i);
        for (std::size_t i = 0; i < ry; ++i)
          if (yc[i])
            for (auto [a, b] : modes)
              if (b == i) order.push_back(a);
        std::vector<std::size_t> perm(rx);
        for (std::size_t pos = 0; pos < rx; ++pos) perm[order[pos]] = pos;
        gx = largo::permute(r, perm);
      }
      t.accumulate(x, std::move(gx));
    }
    if (t.needs_grad(y)) {
      DenseTensor gy;
      if (scalar_out) {
        gy = largo::permute(x.value(), [&] {
          std::vector<std::size_t> p(ry);
          for (auto [a, b] : modes) p[b] = a;
          return p;
        }());
        gy *= g[0];
      } else {
        ModePairs back;
        for (std::size_t j = 0; j < xfree.size(); ++j) back.push_back({xfree[j], j});
        DenseTensor r = contract_modes(x.value(), gg, back);  // [x contracted modes..., yfree...]
        std::vector<std::size_t> order;
        for (std::size_t i = 0; i < rx; ++i)
          if (xc[i])
            for (auto [a, b] : modes)
              if (a == i) order.push_back(b);
        for (auto i : yfree) order.push_back(i);
        std::vector<std::size_t> perm(ry);
        for (std::size_t pos = 0; pos < ry; ++pos) perm[order[pos]] = pos;
        gy = largo::permute(r, perm);
      }
      t.accumulate(y, std::move(gy));
    }
  });
}

inline Var matmul(Var a, Var b) { return contract(a, b, {{1, 0}}); }

// ---- finite-difference checking -------------------------------------------

/// Builds a scalar loss on `tape` from leaves bound to the given parameters.
using TapeFunction = std::function<Var(Tape&, std::span<const Var>)>;

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::vector<double> per_tensor;  // max relative error per parameter tensor
  std::size_t coordinates = 0;
};

/// Analytic gradients via backward(), checked coordinate by coordinate
/// against central differences (f(p + h e) - f(p - h e)) / 2h. Tensors
/// with more than `coords_per_tensor` entries are subsampled without
/// replacement. Relative error uses max(|analytic|, |numeric|, floor) as
/// the denominator; the floor keeps rounding noise on gradients that are
/// zero in exact arithmetic from reading as large relative errors.
inline GradCheckResult check_gradients(const TapeFunction& f, std::vector<DenseTensor> params,
                                       double h, RngState& rng,
                                       std::size_t coords_per_tensor = 50, double floor = 1e-8) {
  if (!(h >= 1e-5 && h <= 1e-2)) throw ParameterError("finite-difference step must be in [1e-5, 1e-2]");

  auto evaluate = [&](const std::vector<DenseTensor>& p) {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& t : p) leaves.push_back(tape.constant(t));
    const double v = f(tape, leaves).value()[0];
    if (!std::isfinite(v)) throw EvaluationError("check_gradients: non-finite function value");
    return v;
  };

  std::vector<DenseTensor> analytic;
  {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& t : params) leaves.push_back(tape.leaf(t));
    Var loss = f(tape, leaves);
    if (!std::isfinite(loss.value()[0]))
      throw EvaluationError("check_gradients: non-finite function value");
    tape.backward(loss);
    for (auto v : leaves) analytic.push_back(v.grad());
  }

  GradCheckResult result;
  for (std::size_t ti = 0; ti < params.size(); ++ti) {
    const std::size_t n = params[ti].size();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (n > coords_per_tensor) {
      for (std::size_t i = 0; i < coords_per_tensor; ++i)
        std::swap(coords[i], coords[i + rng.below(n - i)]);
      coords.resize(coords_per_tensor);
    }
    double worst = 0.0;
    for (auto c : coords) {
      const double orig = params[ti][c];
      params[ti][c] = orig + h;
      const double fp = evaluate(params);
      params[ti][c] = orig - h;
      const double fm = evaluate(params);
      params[ti][c] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[ti][c];
      const double err =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      worst = std::max(worst, err);
      ++result.coordinates;
    }
    result.per_tensor.push_back(worst);
    result.max_rel_err = std::max(result.max_rel_err, worst);
  }
  return result;
}

}  // namespace largo::ad
