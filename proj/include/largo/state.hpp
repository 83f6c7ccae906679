// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <map>
#include <string>
#include <unordered_map>

#include "largo/autodiff.hpp"
#include "largo/error.hpp"
#include "largo/tensor.hpp"

namespace largo {

enum class ParamKind {
  factor_a,
  factor_b,
  factor_c,
  factor_d,
  core,
  dense_weight,
  bias,
  norm_scale,
  norm_shift,
};

inline const char* kind_name(ParamKind k) {
  switch (k) {
    case ParamKind::factor_a: return "A";
    case ParamKind::factor_b: return "B";
    case ParamKind::factor_c: return "C";
    case ParamKind::factor_d: return "D";
    case ParamKind::core: return "G";
    case ParamKind::dense_weight: return "weight";
    case ParamKind::bias: return "bias";
    case ParamKind::norm_scale: return "scale";
    case ParamKind::norm_shift: return "shift";
  }
  return "?";
}

inline ParamKind kind_from_name(const std::string& s) {
  for (auto k : {ParamKind::factor_a, ParamKind::factor_b, ParamKind::factor_c,
                 ParamKind::factor_d, ParamKind::core, ParamKind::dense_weight, ParamKind::bias,
                 ParamKind::norm_scale, ParamKind::norm_shift})
    if (s == kind_name(k)) return k;
  throw FormatError("unknown parameter kind '" + s + "'");
}

/// Weight decay touches factor matrices and dense weights only.
inline bool decays(ParamKind k) {
  return k != ParamKind::bias && k != ParamKind::norm_scale && k != ParamKind::norm_shift;
}

struct Parameter {
  DenseTensor value;
  ParamKind kind = ParamKind::dense_weight;
};

/// All trainable tensors of a network keyed by `stage/block/layer/tensor`
/// paths. Iteration order is lexicographic by path.
class NetworkState {
 public:
  using Map = std::map<std::string, Parameter>;

  void add(const std::string& path, DenseTensor value, ParamKind kind) {
    if (!params_.emplace(path, Parameter{std::move(value), kind}).second)
      throw BuildError("duplicate parameter path '" + path + "'");
  }

  bool contains(const std::string& path) const { return params_.count(path) != 0; }

  const Parameter& at(const std::string& path) const {
    auto it = params_.find(path);
    if (it == params_.end()) throw BuildError("unknown parameter path '" + path + "'");
    return it->second;
  }
  Parameter& at(const std::string& path) {
    return const_cast<Parameter&>(std::as_const(*this).at(path));
  }

  const DenseTensor& value(const std::string& path) const { return at(path).value; }
  DenseTensor& value(const std::string& path) { return at(path).value; }

  const Map& params() const noexcept { return params_; }
  Map& params() noexcept { return params_; }

  std::size_t total_count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += p.value.size();
    return n;
  }

  /// Sum of element counts over paths beginning with `prefix`.
  std::size_t count_prefix(const std::string& prefix) const {
    std::size_t n = 0;
    for (auto it = params_.lower_bound(prefix);
         it != params_.end() && it->first.compare(0, prefix.size(), prefix) == 0; ++it)
      n += it->second.value.size();
    return n;
  }

  friend bool operator==(const NetworkState& a, const NetworkState& b) {
    if (a.params_.size() != b.params_.size()) return false;
    for (auto ia = a.params_.begin(), ib = b.params_.begin(); ia != a.params_.end(); ++ia, ++ib)
      if (ia->first != ib->first || ia->second.kind != ib->second.kind ||
          !(ia->second.value == ib->second.value))
        return false;
    return true;
  }

 private:
  Map params_;
};

using GradientMap = std::map<std::string, DenseTensor>;

/// Binds state tensors to tape leaves on first use and memoizes derived
/// values (reconstructed weights, selected norm rows) for the tape lifetime,
/// so each factorized weight is rebuilt once per tape and model index.
class ParamBinder {
 public:
  ParamBinder(ad::Tape& tape, const NetworkState& state, bool trainable = true)
      : tape_(tape), state_(state), trainable_(trainable) {}

  ad::Tape& tape() noexcept { return tape_; }
  const NetworkState& state() const noexcept { return state_; }

  ad::Var operator()(const std::string& path) {
    auto it = leaves_.find(path);
    if (it != leaves_.end()) return it->second;
    const auto& v = state_.value(path);
    ad::Var var = trainable_ ? tape_.leaf(v) : tape_.constant(v);
    leaves_.emplace(path, var);
    return var;
  }

  /// Uses an existing tape node for `path` instead of creating one.
  void bind(const std::string& path, ad::Var var) {
    state_.at(path);
    if (!leaves_.emplace(path, var).second) throw BuildError("'" + path + "' is already bound");
  }

  ad::Var cached(const std::string& key, const std::function<ad::Var()>& make) {
    auto it = derived_.find(key);
    if (it != derived_.end()) return it->second;
    ad::Var v = make();
    derived_.emplace(key, v);
    return v;
  }

  /// Gradients for every bound path (after tape.backward()).
  GradientMap gradients() const {
    GradientMap out;
    for (const auto& [path, var] : leaves_) out.emplace(path, tape_.grad(var.id));
    return out;
  }

 private:
  ad::Tape& tape_;
  const NetworkState& state_;
  bool trainable_;
  std::map<std::string, ad::Var> leaves_;
  std::unordered_map<std::string, ad::Var> derived_;
};

}  // namespace largo
