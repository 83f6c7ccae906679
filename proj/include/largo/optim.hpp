// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>

#include "largo/error.hpp"
#include "largo/state.hpp"

namespace largo {

struct SgdConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0;

  void validate() const {
    if (!(lr >= 0.0)) throw ConfigError("learning rate must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be >= 0");
  }
};

/// SGD with Nesterov momentum. Per parameter p with gradient g:
///
///   g <- g + wd * p        (only for kinds that decay: factors and dense weights)
///   v <- mu * v + g
///   p <- p - lr * (g + mu * v)
///
/// Parameters without a gradient this step (e.g. the stem of a subset that
/// was not sampled) are left untouched, momentum included.
class SgdNesterov {
 public:
  explicit SgdNesterov(SgdConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  const SgdConfig& config() const noexcept { return cfg_; }

  void step(NetworkState& state, const GradientMap& grads) {
    for (const auto& [path, g0] : grads) {
      Parameter& p = state.at(path);
      if (g0.shape() != p.value.shape())
        throw DimensionError("gradient for '" + path + "' has shape " + shape_str(g0.shape()) +
                             ", parameter has " + shape_str(p.value.shape()));
      auto [it, fresh] = velocity_.try_emplace(path, p.value.shape(), 0.0);
      DenseTensor& v = it->second;
      const bool decay = decays(p.kind) && cfg_.weight_decay > 0.0;
      double* pv = p.value.raw();
      double* vv = v.raw();
      const double* gv = g0.raw();
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        double g = gv[i];
        if (decay) g += cfg_.weight_decay * pv[i];
        vv[i] = cfg_.momentum * vv[i] + g;
        pv[i] -= cfg_.lr * (g + cfg_.momentum * vv[i]);
      }
    }
  }

  const std::map<std::string, DenseTensor>& velocity() const noexcept { return velocity_; }

 private:
  SgdConfig cfg_;
  std::map<std::string, DenseTensor> velocity_;
};

}  // namespace largo
