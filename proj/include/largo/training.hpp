// SPDX-License-Identifier: Apache-2.0
#pragma once

// Training with random modality dropout and full-modality guidance: each
// step samples a subset m uniformly from 1..M and minimizes
//
//   0.5 * (loss(net(X_m; m), Y) + loss(net(X; M), Y))
//
// averaged over the batch. At m = M both terms coincide and the full-set
// forward is computed once.

#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "largo/datagen.hpp"
#include "largo/losses.hpp"
#include "largo/networks.hpp"
#include "largo/optim.hpp"

namespace largo {

enum class NormSchedule { none, init_only, per_epoch, per_step };
enum class LossKind { dice_ce, ce };

inline const char* schedule_name(NormSchedule s) {
  switch (s) {
    case NormSchedule::none: return "none";
    case NormSchedule::init_only: return "init-only";
    case NormSchedule::per_epoch: return "per-epoch";
    case NormSchedule::per_step: return "per-step";
  }
  return "?";
}

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 8;
  SgdConfig sgd;
  std::uint64_t seed = 1;
  NormSchedule normalization = NormSchedule::per_epoch;
  LossKind loss = LossKind::dice_ce;

  void validate() const {
    if (batch_size == 0) throw ConfigError("train: batch_size must be >= 1");
    sgd.validate();
  }
};

inline json to_json(const TrainConfig& c) {
  return json{{"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"lr", c.sgd.lr},
              {"momentum", c.sgd.momentum},
              {"weight_decay", c.sgd.weight_decay},
              {"seed", c.seed},
              {"normalization", schedule_name(c.normalization)},
              {"loss", c.loss == LossKind::dice_ce ? "dice+ce" : "ce"}};
}

inline TrainConfig train_config_from_json(const json& j) {
  using detail::get_or;
  TrainConfig c;
  c.epochs = get_or<std::size_t>(j, "epochs", c.epochs);
  c.batch_size = get_or<std::size_t>(j, "batch_size", c.batch_size);
  c.sgd.lr = get_or<double>(j, "lr", c.sgd.lr);
  c.sgd.momentum = get_or<double>(j, "momentum", c.sgd.momentum);
  c.sgd.weight_decay = get_or<double>(j, "weight_decay", c.sgd.weight_decay);
  c.seed = get_or<std::uint64_t>(j, "seed", c.seed);
  const auto norm = get_or<std::string>(j, "normalization", "per-epoch");
  if (norm == "none") c.normalization = NormSchedule::none;
  else if (norm == "init-only") c.normalization = NormSchedule::init_only;
  else if (norm == "per-epoch") c.normalization = NormSchedule::per_epoch;
  else if (norm == "per-step") c.normalization = NormSchedule::per_step;
  else throw ConfigError("train: unknown normalization schedule '" + norm + "'");
  const auto loss = get_or<std::string>(j, "loss", "dice+ce");
  if (loss == "dice+ce") c.loss = LossKind::dice_ce;
  else if (loss == "ce") c.loss = LossKind::ce;
  else throw ConfigError("train: unknown loss '" + loss + "'");
  c.validate();
  return c;
}

/// Uniform draw from 1..M.
inline std::size_t sample_subset(RngState& rng, std::size_t M) {
  if (M == 0) throw ParameterError("sample_subset: M must be >= 1");
  return 1 + static_cast<std::size_t>(rng.below(M));
}

inline void check_compatible(const Network& net, const Dataset& d) {
  const auto& s = net.spec();
  if (s.task != d.spec.task) throw ConfigError("network and dataset tasks differ");
  if (s.n_modalities != d.spec.n_modalities)
    throw ConfigError("network expects " + std::to_string(s.n_modalities) + " modalities, dataset has " +
                      std::to_string(d.spec.n_modalities));
  if (s.classes != d.spec.classes)
    throw ConfigError("network predicts " + std::to_string(s.classes) + " classes, dataset has " +
                      std::to_string(d.spec.classes));
  if (s.task == Task::classification && s.modality_widths != d.spec.widths)
    throw ConfigError("network feature widths differ from the dataset's");
}

/// Classification inputs for a batch: per modality a [width, batch] matrix.
inline ModalityInputs stack_features(const Dataset& d, std::span<const std::size_t> idx,
                                     const ModalityMask& mask) {
  ModalityInputs out;
  const std::size_t B = idx.size();
  for (auto n : mask.members()) {
    const std::size_t w = d.spec.widths[n];
    DenseTensor x({w, B});
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t k = 0; k < w; ++k) x[k * B + b] = d.samples[idx[b]].modalities[n][k];
    out.emplace(n, std::move(x));
  }
  return out;
}

inline DenseTensor stack_labels(const Dataset& d, std::span<const std::size_t> idx) {
  DenseTensor y({idx.size()});
  for (std::size_t b = 0; b < idx.size(); ++b) y[b] = double(d.samples[idx[b]].label);
  return y;
}

/// Mean task loss of the batch under one subset.
inline ad::Var batch_loss(const Network& net, ParamBinder& p, const Dataset& d,
                          std::span<const std::size_t> idx, const ModalityMask& mask, LossKind kind) {
  if (idx.empty()) throw ParameterError("batch_loss: empty batch");
  if (d.spec.task == Task::classification) {
    ad::Var logits = net.forward(p, stack_features(d, idx, mask), mask);
    return cross_entropy(logits, stack_labels(d, idx));
  }
  ad::Var total;
  for (auto i : idx) {
    const auto& s = d.samples[i];
    ad::Var logits = net.forward(p, apply_subset(s, mask), mask);
    ad::Var l = kind == LossKind::dice_ce ? seg_loss(logits, s.target) : cross_entropy(logits, s.target);
    total = total.tape ? ad::add(total, l) : l;
  }
  return ad::scale(total, 1.0 / double(idx.size()));
}

/// The guided objective for subset m.
inline ad::Var total_loss(const Network& net, ParamBinder& p, const Dataset& d,
                          std::span<const std::size_t> idx, std::size_t m, LossKind kind) {
  const std::size_t N = net.spec().n_modalities, M = net.model_count();
  detail::check_model_index(m, M);
  const auto full = ModalityMask::full(N);
  ad::Var guide = batch_loss(net, p, d, idx, full, kind);
  if (m == M) return guide;
  ad::Var sub = batch_loss(net, p, d, idx, ModalityMask::from_index(m, N), kind);
  return ad::scale(ad::add(sub, guide), 0.5);
}

/// Expected guided loss under uniform m, without gradients. Used as the
/// epoch-0 reference of the training log.
inline double expected_total_loss(const Network& net, const NetworkState& state, const Dataset& d,
                                  const std::vector<std::size_t>& idx, std::size_t batch_size,
                                  LossKind kind) {
  const std::size_t N = net.spec().n_modalities, M = net.model_count();
  double acc = 0.0;
  std::size_t batches = 0;
  for (std::size_t start = 0; start < idx.size(); start += batch_size) {
    std::span<const std::size_t> b(idx.data() + start, std::min(batch_size, idx.size() - start));
    std::vector<double> per(M + 1, 0.0);
    for (std::size_t m = 1; m <= M; ++m) {
      ad::Tape tape;
      ParamBinder p(tape, state, false);
      per[m] = batch_loss(net, p, d, b, ModalityMask::from_index(m, N), kind).value()[0];
    }
    double e = per[M];
    for (std::size_t m = 1; m < M; ++m) e += 0.5 * (per[m] + per[M]);
    acc += e / double(M);
    ++batches;
  }
  return acc / double(batches);
}

struct TrainResult {
  NetworkState state;
  std::vector<json> log;  // one record per epoch, epoch 0 = before training
};

/// Per epoch: shuffle, then per batch sample m, step, optionally normalize.
/// Deterministic given (initial state, dataset, indices, config).
inline TrainResult train(const Network& net, NetworkState state, const Dataset& d,
                         const std::vector<std::size_t>& train_idx, const TrainConfig& cfg,
                         const std::function<void(const json&)>& on_epoch = {}) {
  cfg.validate();
  check_compatible(net, d);
  if (train_idx.empty()) throw ConfigError("train: no training samples");
  const std::size_t M = net.model_count();
  SgdNesterov opt(cfg.sgd);
  RngState root(cfg.seed);
  RngState subset_rng = root.fork(1);

  TrainResult r;
  if (cfg.normalization == NormSchedule::init_only) cp_normalize_state(net, state);
  {
    json rec{{"epoch", 0},
             {"loss", expected_total_loss(net, state, d, train_idx, cfg.batch_size, cfg.loss)},
             {"steps", 0}};
    if (on_epoch) on_epoch(rec);
    r.log.push_back(std::move(rec));
  }

  std::vector<std::size_t> order = train_idx;
  std::size_t global_step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    RngState shuffle = root.fork(1000 + epoch);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
    double loss_sum = 0.0;
    std::size_t steps = 0;
    std::vector<std::size_t> counts(M, 0);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      std::span<const std::size_t> batch(order.data() + start, std::min(cfg.batch_size, order.size() - start));
      const std::size_t m = sample_subset(subset_rng, M);
      ++counts[m - 1];
      ad::Tape tape;
      ParamBinder p(tape, state);
      ad::Var loss = total_loss(net, p, d, batch, m, cfg.loss);
      const double lv = loss.value()[0];
      if (!std::isfinite(lv))
        throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                              std::to_string(global_step) + " (subset " + std::to_string(m) + ")");
      tape.backward(loss);
      opt.step(state, p.gradients());
      if (cfg.normalization == NormSchedule::per_step) cp_normalize_state(net, state);
      loss_sum += lv;
      ++steps;
      ++global_step;
    }
    if (cfg.normalization == NormSchedule::per_epoch) cp_normalize_state(net, state);
    json rec{{"epoch", epoch}, {"loss", loss_sum / double(steps)}, {"steps", steps}, {"subset_counts", counts}};
    if (on_epoch) on_epoch(rec);
    r.log.push_back(std::move(rec));
  }
  r.state = std::move(state);
  return r;
}

// ---- gradient check on a whole network ---------------------------------------

/// Coarse parameter groups used to report gradient-check coverage.
inline std::string param_group(const std::string& path, ParamKind kind) {
  if (net_detail::has_component(path, "stem")) return "stem";
  if (net_detail::has_component(path, "head")) return "head";
  switch (kind) {
    case ParamKind::factor_a: return "A";
    case ParamKind::factor_b: return "B";
    case ParamKind::factor_c: return "C";
    case ParamKind::factor_d: return "D";
    case ParamKind::core: return "G";
    case ParamKind::bias: return "bias";
    case ParamKind::dense_weight: return "dense";
    case ParamKind::norm_scale:
    case ParamKind::norm_shift: return "norm";
  }
  return "?";
}

struct GroupCheck {
  double max_rel_err = 0.0;
  std::size_t coordinates = 0;
};

struct NetworkGradCheck {
  double max_rel_err = 0.0;
  std::map<std::string, GroupCheck> groups;
};

/// Finite-difference check of the guided loss for subset m over every
/// tensor that receives gradient. Coordinates are subsampled per tensor.
/// Conv biases feeding instance norm have exactly zero gradient, so the
/// relative-error floor sits well above central-difference rounding noise.
inline constexpr double kGradCheckFloor = 1e-6;

inline NetworkGradCheck gradcheck_network(const Network& net, const NetworkState& state, const Dataset& d,
                                          const std::vector<std::size_t>& idx, std::size_t m, LossKind kind,
                                          double h, RngState& rng, std::size_t coords_per_tensor = 50) {
  // Find the tensors the loss depends on.
  std::vector<std::string> paths;
  {
    ad::Tape tape;
    ParamBinder p(tape, state);
    ad::Var loss = total_loss(net, p, d, idx, m, kind);
    tape.backward(loss);
    for (const auto& [path, g] : p.gradients())
      if (max_abs(g) > 0.0) paths.push_back(path);
  }
  std::vector<DenseTensor> params;
  for (const auto& path : paths) params.push_back(state.value(path));
  ad::TapeFunction f = [&](ad::Tape& tape, std::span<const ad::Var> leaves) {
    ParamBinder p(tape, state, false);
    for (std::size_t i = 0; i < paths.size(); ++i) p.bind(paths[i], leaves[i]);
    return total_loss(net, p, d, idx, m, kind);
  };
  const auto res = ad::check_gradients(f, params, h, rng, coords_per_tensor, kGradCheckFloor);
  NetworkGradCheck out;
  out.max_rel_err = res.max_rel_err;
  for (std::size_t i = 0; i < paths.size(); ++i) {
    auto& g = out.groups[param_group(paths[i], state.at(paths[i]).kind)];
    g.max_rel_err = std::max(g.max_rel_err, res.per_tensor[i]);
    g.coordinates += std::min(coords_per_tensor, params[i].size());
  }
  return out;
}

}  // namespace largo
