// SPDX-License-Identifier: Apache-2.0
#pragma once

// Losses on channel-first logits [C, ...]: per-position cross entropy and
// soft Dice over softmax probabilities. Targets are class ids stored as
// doubles in a tensor of the trailing (spatial or batch) shape.

#include <string>

#include "largo/nn_ops.hpp"

namespace largo {

inline constexpr double kDiceSmooth = 1e-5;

namespace loss_detail {

inline DenseTensor one_hot(const Shape& logits_shape, const DenseTensor& target) {
  const std::size_t C = logits_shape[0];
  const Shape trailing(logits_shape.begin() + 1, logits_shape.end());
  if (target.shape() != trailing)
    throw DimensionError("target shape " + shape_str(target.shape()) + " does not match logits " +
                         shape_str(logits_shape));
  const std::size_t P = target.size();
  DenseTensor oh(logits_shape, 0.0);
  for (std::size_t i = 0; i < P; ++i) {
    const double v = target[i];
    if (!(v >= 0.0) || v >= double(C) || v != std::floor(v))
      throw IndexError("class id " + std::to_string(v) + " out of range [0, " + std::to_string(C) + ")");
    oh[std::size_t(v) * P + i] = 1.0;
  }
  return oh;
}

}  // namespace loss_detail

/// Mean over positions of -log softmax(logits)[target].
inline ad::Var cross_entropy(ad::Var logits, const DenseTensor& target) {
  const DenseTensor oh = loss_detail::one_hot(logits.shape(), target);
  ad::Var picked = ad::mul(ad::log_softmax(logits), logits.tape->constant(oh));
  return ad::scale(ad::sum(picked), -1.0 / double(target.size()));
}

/// 1 - mean_c (2 sum p_c g_c + s) / (sum p_c + sum g_c + s) over all classes.
inline ad::Var dice_loss(ad::Var logits, const DenseTensor& target) {
  const std::size_t C = logits.shape()[0];
  const DenseTensor oh = loss_detail::one_hot(logits.shape(), target);
  ad::Tape& t = *logits.tape;
  const std::size_t P = target.size();
  ad::Var p = ad::reshape(ad::softmax(logits), {C, P});
  ad::Var g = t.constant(oh.reshaped({C, P}));
  ad::Var inter = ad::sum_trailing(ad::mul(p, g));  // [C]
  ad::Var denom = ad::add_scalar(ad::add(ad::sum_trailing(p), ad::sum_trailing(g)), kDiceSmooth);
  ad::Var ratio = ad::div(ad::add_scalar(ad::scale(inter, 2.0), kDiceSmooth), denom);
  return ad::add_scalar(ad::scale(ad::sum(ratio), -1.0 / double(C)), 1.0);
}

inline ad::Var seg_loss(ad::Var logits, const DenseTensor& target) {
  return ad::add(dice_loss(logits, target), cross_entropy(logits, target));
}

}  // namespace largo
