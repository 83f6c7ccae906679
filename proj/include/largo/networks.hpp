// SPDX-License-Identifier: Apache-2.0
#pragma once

// Architecture builders. A Network is a stateless description (layer table,
// parameter paths, forward wiring); its trainable tensors live in a separate
// NetworkState so that training, checkpointing and evaluation can share them.
//
// Segmentation inputs are single samples [C, spatial...]; classification
// inputs are batched feature matrices [width, batch].

#include <cstring>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "largo/layers.hpp"
#include "largo/network_spec.hpp"

namespace largo {

struct LayerReport {
  std::string path;
  std::string role;    // stem, conv, up, linear, norm, head
  std::string decomp;  // dense, cp, tucker, or "-" for norms
  LayerDims dims;
  std::size_t rank = 0;
  std::size_t params = 0;
};

class Network {
 public:
  explicit Network(NetworkSpec spec) : spec_(std::move(spec)) { spec_.validate(); }
  virtual ~Network() = default;

  const NetworkSpec& spec() const noexcept { return spec_; }
  std::size_t model_count() const { return spec_.model_count(); }

  virtual void init(NetworkState& state, RngState& rng) const = 0;
  virtual ad::Var forward(ParamBinder& p, const ModalityInputs& inputs,
                          const ModalityMask& mask) const = 0;
  virtual std::vector<LayerReport> layers() const = 0;
  /// Slots holding CP/Tucker factors (empty for uncompressed networks).
  virtual std::vector<WeightSlot> factorized_slots() const = 0;

  NetworkState initial_state(RngState& rng) const {
    NetworkState s;
    init(s, rng);
    return s;
  }

  std::size_t expected_param_count() const {
    std::size_t n = 0;
    for (const auto& l : layers()) n += l.params;
    return n;
  }

 protected:
  NetworkSpec spec_;
};

namespace net_detail {

inline LayerReport report(const WeightSlot& s, const char* role) {
  return LayerReport{s.path, role, decomposition_name(s.decomp), s.dims, s.rank, s.param_count()};
}

inline LayerReport report(const NormLayer& n) {
  return LayerReport{n.path, "norm", "-", LayerDims{n.copies, n.channels, n.channels, 1, false}, 0,
                     n.param_count()};
}

inline void check_mask(const ModalityMask& mask, std::size_t n_modalities) {
  if (mask.n_modalities() != n_modalities)
    throw ModalityError("mask covers " + std::to_string(mask.n_modalities()) +
                        " modalities, network expects " + std::to_string(n_modalities));
}

}  // namespace net_detail

/// Encoder/decoder U-Net. In hyper mode every inner convolution is factorized
/// across the M subset models and the stem/head are M-entry banks; with a
/// fixed subset it is a single dense network for that subset.
class UNet final : public Network {
 public:
  explicit UNet(NetworkSpec spec, std::optional<ModalityMask> subset = std::nullopt,
                std::string prefix = "")
      : Network(std::move(spec)), subset_(subset), prefix_(std::move(prefix)) {
    if (spec_.task != Task::segmentation) throw BuildError("UNet needs a segmentation spec");
    build();
  }

  bool dense() const noexcept { return subset_.has_value(); }

  void init(NetworkState& state, RngState& rng) const override {
    if (dense())
      stem_single_.init(state, rng);
    else
      stem_.init(state, rng);
    for (const auto& b : blocks_) {
      if (b.conv) b.conv->slot.init(state, rng);
      if (b.norm) b.norm->init(state);
    }
    for (const auto& h : heads_) h.init(state, rng);
  }

  ad::Var forward(ParamBinder& p, const ModalityInputs& inputs,
                  const ModalityMask& mask) const override {
    net_detail::check_mask(mask, spec_.n_modalities);
    const std::size_t m = mask.index();
    ad::Var x;
    if (dense()) {
      if (!(mask == *subset_))
        throw ModalityError("dedicated network for subset " + subset_->pattern() +
                            " called with subset " + mask.pattern());
      check_inputs_match(inputs, mask);
      std::vector<ad::Var> parts;
      for (auto id : mask.members()) parts.push_back(p.tape().constant(inputs.at(id)));
      x = parts.size() == 1 ? parts[0] : ad::concat(parts);
      check_spatial(x.shape());
      x = ad::conv(x, stem_single_.weight(p, 0), stem_single_.bias(p, 0), same_geom());
    } else {
      for (const auto& [id, t] : inputs) check_spatial(t.shape());
      x = stem_.forward(p, inputs, mask);
    }

    std::vector<ad::Var> skips;
    std::size_t i = 0;
    auto block = [&](ad::Var h) {
      const auto& b = blocks_[i++];
      h = b.conv->forward(p, h, m);
      return ad::leaky_relu(b.norm->instance(p, h, m));
    };
    auto finish_block = [&](ad::Var h) {  // norm + activation of the stem output
      const auto& b = blocks_[i++];
      return ad::leaky_relu(b.norm->instance(p, h, m));
    };
    const std::size_t L = spec_.channels.size();
    x = finish_block(x);
    x = block(x);
    if (L > 1) skips.push_back(x);
    for (std::size_t s = 1; s < L; ++s) {
      x = block(x);
      x = block(x);
      if (s + 1 < L) skips.push_back(x);
    }
    for (std::size_t s = L - 1; s-- > 0;) {
      const auto& up = blocks_[i++];
      x = up.conv->forward(p, x, m);
      x = ad::concat({x, skips[s]});
      x = block(x);
      x = block(x);
    }
    const WeightSlot& head = dense() ? heads_.front() : heads_[m - 1];
    return ad::conv(x, head.weight(p, 0), head.bias(p, 0), ConvGeometry{});
  }

  std::vector<LayerReport> layers() const override {
    std::vector<LayerReport> out;
    if (dense())
      out.push_back(net_detail::report(stem_single_, "stem"));
    else
      for (std::size_t m = 1; m <= model_count(); ++m)
        out.push_back(net_detail::report(stem_.entry(m), "stem"));
    for (const auto& b : blocks_) {
      if (b.conv) out.push_back(net_detail::report(b.conv->slot, b.conv->transposed ? "up" : "conv"));
      if (b.norm) out.push_back(net_detail::report(*b.norm));
    }
    for (const auto& h : heads_) out.push_back(net_detail::report(h, "head"));
    return out;
  }

  std::vector<WeightSlot> factorized_slots() const override {
    std::vector<WeightSlot> out;
    for (const auto& b : blocks_)
      if (b.conv && b.conv->slot.decomp != Decomposition::dense) out.push_back(b.conv->slot);
    return out;
  }

  /// Input side lengths must survive L-1 halvings exactly.
  std::size_t size_multiple() const { return std::size_t{1} << (spec_.channels.size() - 1); }

 private:
  struct Block {
    std::optional<LrConvLayer> conv;
    std::optional<NormLayer> norm;
  };

  ConvGeometry same_geom(std::size_t stride = 1) const {
    return ConvGeometry::cube(spec_.spatial_rank, spec_.kernel_size, stride, spec_.kernel_size / 2);
  }

  std::size_t k_flat() const {
    std::size_t k = 1;
    for (std::size_t i = 0; i < spec_.spatial_rank; ++i) k *= spec_.kernel_size;
    return k;
  }

  WeightSlot slot(const std::string& path, std::size_t ci, std::size_t co, std::size_t K) const {
    if (dense()) return WeightSlot{prefix_ + path, LayerDims{1, ci, co, K, true}, Decomposition::dense, 0};
    LayerDims d{model_count(), ci, co, K, true};
    return WeightSlot{prefix_ + path, d, spec_.decomposition, spec_.rank_for(d)};
  }

  NormLayer norm(const std::string& path, std::size_t c) const {
    const bool per_model = !dense() && spec_.norm_params == NormParams::per_model;
    return NormLayer{prefix_ + path, c, per_model ? model_count() : 1};
  }

  void conv_block(const std::string& stage, const char* idx, std::size_t ci, std::size_t co,
                  std::size_t stride) {
    const std::string c = stage + "/conv" + idx, n = stage + "/norm" + idx;
    blocks_.push_back(
        Block{LrConvLayer{slot(c, ci, co, k_flat()), same_geom(stride), spec_.spatial_rank, false},
              norm(n, co)});
  }

  void build() {
    const auto& ch = spec_.channels;
    const std::size_t L = ch.size(), d = spec_.spatial_rank;
    const auto widths = spec_.input_channels();
    if (dense()) {
      std::size_t ci = 0;
      for (auto id : subset_->members()) ci += widths[id];
      stem_single_ = WeightSlot{prefix_ + "stem", LayerDims{1, ci, ch[0], k_flat(), true},
                                Decomposition::dense, 0};
    } else {
      stem_ = StemBank{prefix_ + "stem", spec_.n_modalities, widths, ch[0], k_flat(), same_geom()};
    }
    blocks_.push_back(Block{std::nullopt, norm("enc0/norm0", ch[0])});
    conv_block("enc0", "1", ch[0], ch[0], 1);
    for (std::size_t s = 1; s < L; ++s) {
      const std::string st = "enc" + std::to_string(s);
      conv_block(st, "0", ch[s - 1], ch[s], 2);
      conv_block(st, "1", ch[s], ch[s], 1);
    }
    std::size_t up_k = 1;
    for (std::size_t i = 0; i < d; ++i) up_k *= 2;
    for (std::size_t s = L - 1; s-- > 0;) {
      const std::string st = "dec" + std::to_string(s);
      blocks_.push_back(Block{LrConvLayer{slot(st + "/up", ch[s + 1], ch[s], up_k),
                                          ConvGeometry::cube(d, 2, 2, 0), d, true},
                              std::nullopt});
      conv_block(st, "0", 2 * ch[s], ch[s], 1);
      conv_block(st, "1", ch[s], ch[s], 1);
    }
    if (dense())
      heads_.push_back(WeightSlot{prefix_ + "head", LayerDims{1, ch[0], spec_.classes, 1, true},
                                  Decomposition::dense, 0});
    else
      for (std::size_t m = 1; m <= model_count(); ++m)
        heads_.push_back(WeightSlot{prefix_ + "head/m" + std::to_string(m),
                                    LayerDims{1, ch[0], spec_.classes, 1, true},
                                    Decomposition::dense, 0});
  }

  void check_spatial(const Shape& s) const {
    if (s.size() != spec_.spatial_rank + 1)
      throw DimensionError("expected " + std::to_string(spec_.spatial_rank) +
                           " spatial axes, got input " + shape_str(s));
    for (std::size_t i = 1; i < s.size(); ++i)
      if (s[i] % size_multiple() != 0)
        throw DimensionError("input side " + std::to_string(s[i]) + " is not divisible by " +
                             std::to_string(size_multiple()) + " (one halving per stage)");
  }

  std::optional<ModalityMask> subset_;
  std::string prefix_;
  StemBank stem_;
  WeightSlot stem_single_;
  std::vector<Block> blocks_;
  std::vector<WeightSlot> heads_;
};

/// Late-fusion classifier: per-subset projection of the concatenated
/// features, residual LrLinear fusion blocks, layer norm, per-subset MLP head.
class FusionClassifier final : public Network {
 public:
  explicit FusionClassifier(NetworkSpec spec, std::optional<ModalityMask> subset = std::nullopt,
                            std::string prefix = "")
      : Network(std::move(spec)), subset_(subset), prefix_(std::move(prefix)) {
    if (spec_.task != Task::classification)
      throw BuildError("FusionClassifier needs a classification spec");
    build();
  }

  bool dense() const noexcept { return subset_.has_value(); }

  void init(NetworkState& state, RngState& rng) const override {
    if (dense())
      stem_single_.init(state, rng);
    else
      stem_.init(state, rng);
    for (const auto& b : blocks_) {
      b.norm.init(state);
      b.fc1.slot.init(state, rng);
      b.fc2.slot.init(state, rng);
    }
    final_norm_.init(state);
    for (const auto& h : heads_) {
      h.first.init(state, rng);
      h.second.init(state, rng);
    }
  }

  ad::Var forward(ParamBinder& p, const ModalityInputs& inputs,
                  const ModalityMask& mask) const override {
    net_detail::check_mask(mask, spec_.n_modalities);
    const std::size_t m = mask.index();
    ad::Var x;
    if (dense()) {
      if (!(mask == *subset_))
        throw ModalityError("dedicated network for subset " + subset_->pattern() +
                            " called with subset " + mask.pattern());
      check_inputs_match(inputs, mask);
      std::vector<ad::Var> parts;
      for (auto id : mask.members()) parts.push_back(p.tape().constant(inputs.at(id)));
      x = parts.size() == 1 ? parts[0] : ad::concat(parts);
      x = LrLinearLayer{stem_single_}.forward(p, x, 0);
    } else {
      x = stem_.forward(p, inputs, mask);
    }
    x = ad::relu(x);
    for (const auto& b : blocks_) {
      ad::Var h = b.norm.layer(p, x, m);
      h = ad::relu(b.fc1.forward(p, h, m));
      h = b.fc2.forward(p, h, m);
      x = ad::add(x, h);
    }
    x = final_norm_.layer(p, x, m);
    const auto& head = dense() ? heads_.front() : heads_[m - 1];
    x = ad::relu(LrLinearLayer{head.first}.forward(p, x, 0));
    return LrLinearLayer{head.second}.forward(p, x, 0);
  }

  std::vector<LayerReport> layers() const override {
    std::vector<LayerReport> out;
    if (dense())
      out.push_back(net_detail::report(stem_single_, "stem"));
    else
      for (std::size_t m = 1; m <= model_count(); ++m)
        out.push_back(net_detail::report(stem_.entry(m), "stem"));
    for (const auto& b : blocks_) {
      out.push_back(net_detail::report(b.norm));
      out.push_back(net_detail::report(b.fc1.slot, "linear"));
      out.push_back(net_detail::report(b.fc2.slot, "linear"));
    }
    out.push_back(net_detail::report(final_norm_));
    for (const auto& h : heads_) {
      out.push_back(net_detail::report(h.first, "head"));
      out.push_back(net_detail::report(h.second, "head"));
    }
    return out;
  }

  std::vector<WeightSlot> factorized_slots() const override {
    std::vector<WeightSlot> out;
    for (const auto& b : blocks_)
      for (const auto* s : {&b.fc1.slot, &b.fc2.slot})
        if (s->decomp != Decomposition::dense) out.push_back(*s);
    return out;
  }

 private:
  struct Block {
    NormLayer norm;
    LrLinearLayer fc1, fc2;
  };

  WeightSlot linear(const std::string& path, std::size_t ci, std::size_t co) const {
    if (dense()) return WeightSlot{prefix_ + path, LayerDims{1, ci, co, 1, false}, Decomposition::dense, 0};
    LayerDims d{model_count(), ci, co, 1, false};
    return WeightSlot{prefix_ + path, d, spec_.decomposition, spec_.rank_for(d)};
  }

  NormLayer norm(const std::string& path, std::size_t c) const {
    const bool per_model = !dense() && spec_.norm_params == NormParams::per_model;
    return NormLayer{prefix_ + path, c, per_model ? model_count() : 1};
  }

  static WeightSlot dense_linear(std::string path, std::size_t ci, std::size_t co) {
    return WeightSlot{std::move(path), LayerDims{1, ci, co, 1, false}, Decomposition::dense, 0};
  }

  void build() {
    const auto& w = spec_.modality_widths;
    if (dense()) {
      std::size_t ci = 0;
      for (auto id : subset_->members()) ci += w[id];
      stem_single_ = dense_linear(prefix_ + "stem", ci, spec_.bottleneck);
    } else {
      stem_ = StemBank{prefix_ + "stem", spec_.n_modalities, w, spec_.bottleneck, 1, ConvGeometry{}};
    }
    for (std::size_t b = 0; b < spec_.fusion_blocks; ++b) {
      const std::string st = "fusion" + std::to_string(b);
      blocks_.push_back(Block{norm(st + "/norm", spec_.bottleneck),
                              LrLinearLayer{linear(st + "/fc1", spec_.bottleneck, spec_.hidden)},
                              LrLinearLayer{linear(st + "/fc2", spec_.hidden, spec_.bottleneck)}});
    }
    final_norm_ = norm("final/norm", spec_.bottleneck);
    auto add_head = [&](const std::string& base) {
      heads_.emplace_back(dense_linear(base + "/fc1", spec_.bottleneck, spec_.head_hidden),
                          dense_linear(base + "/fc2", spec_.head_hidden, spec_.classes));
    };
    if (dense())
      add_head(prefix_ + "head");
    else
      for (std::size_t m = 1; m <= model_count(); ++m) add_head(prefix_ + "head/m" + std::to_string(m));
  }

  std::optional<ModalityMask> subset_;
  std::string prefix_;
  StemBank stem_;
  WeightSlot stem_single_;
  std::vector<Block> blocks_;
  NormLayer final_norm_;
  std::vector<std::pair<WeightSlot, WeightSlot>> heads_;
};

/// Single dense network for one subset of `spec` (path prefix optional).
inline std::unique_ptr<Network> make_dedicated(const NetworkSpec& spec, const ModalityMask& subset,
                                               const std::string& prefix = "") {
  if (spec.task == Task::segmentation) return std::make_unique<UNet>(spec, subset, prefix);
  return std::make_unique<FusionClassifier>(spec, subset, prefix);
}

/// M independent dense networks, member m serving subset m only.
class DedicatedFamily final : public Network {
 public:
  explicit DedicatedFamily(NetworkSpec spec) : Network(std::move(spec)) {
    for (std::size_t m = 1; m <= model_count(); ++m)
      members_.push_back(make_dedicated(spec_, ModalityMask::from_index(m, spec_.n_modalities),
                                        member_prefix(m)));
  }

  static std::string member_prefix(std::size_t m) { return "member" + std::to_string(m) + "/"; }

  const Network& member(std::size_t m) const {
    detail::check_model_index(m, members_.size());
    return *members_[m - 1];
  }

  void init(NetworkState& state, RngState& rng) const override {
    for (std::size_t m = 1; m <= members_.size(); ++m) {
      RngState sub = rng.fork(m);
      members_[m - 1]->init(state, sub);
    }
  }

  ad::Var forward(ParamBinder& p, const ModalityInputs& inputs,
                  const ModalityMask& mask) const override {
    net_detail::check_mask(mask, spec_.n_modalities);
    return member(mask.index()).forward(p, inputs, mask);
  }

  std::vector<LayerReport> layers() const override {
    std::vector<LayerReport> out;
    for (const auto& m : members_) {
      auto l = m->layers();
      out.insert(out.end(), l.begin(), l.end());
    }
    return out;
  }

  std::vector<WeightSlot> factorized_slots() const override { return {}; }

 private:
  std::vector<std::unique_ptr<Network>> members_;
};

/// Hypernetwork or dedicated family, as selected by spec.mode.
inline std::unique_ptr<Network> make_network(const NetworkSpec& spec) {
  if (spec.mode == NetworkMode::dedicated) return std::make_unique<DedicatedFamily>(spec);
  if (spec.task == Task::segmentation) return std::make_unique<UNet>(spec);
  return std::make_unique<FusionClassifier>(spec);
}

/// Renormalizes every CP layer in place (B, C, D unit columns, norms into A).
inline void cp_normalize_state(const Network& net, NetworkState& state) {
  for (const auto& slot : net.factorized_slots())
    if (slot.decomp == Decomposition::cp) slot.write_cp_kernel(state, cp_normalize(slot.cp_kernel(state)));
}

// ---- parameter accounting ---------------------------------------------------

struct ParamGroupTotals {
  std::size_t stem = 0, head = 0, norm = 0, factor_a = 0, factor_b = 0, factor_c = 0,
              factor_d = 0, core = 0, bias = 0, dense = 0;
};

struct ParamReport {
  std::size_t total = 0;
  ParamGroupTotals groups;
  std::vector<std::pair<std::string, std::size_t>> per_layer;  // path order

  double stem_head_fraction() const {
    return total ? double(groups.stem + groups.head) / double(total) : 0.0;
  }
};

namespace net_detail {
inline bool has_component(const std::string& path, const char* name) {
  std::size_t start = 0;
  while (start <= path.size()) {
    const std::size_t end = std::min(path.find('/', start), path.size());
    if (path.compare(start, end - start, name) == 0 && end - start == std::strlen(name)) return true;
    start = end + 1;
  }
  return false;
}
}  // namespace net_detail

/// Structural walk over a state: totals, per-layer counts and groups. Stem
/// and head tensors count toward stem/head regardless of their kind.
inline ParamReport count_parameters(const NetworkState& state) {
  ParamReport r;
  for (const auto& [path, p] : state.params()) {
    const std::size_t n = p.value.size();
    r.total += n;
    const std::string layer = path.substr(0, path.rfind('/'));
    if (r.per_layer.empty() || r.per_layer.back().first != layer) r.per_layer.emplace_back(layer, 0);
    r.per_layer.back().second += n;
    auto& g = r.groups;
    if (net_detail::has_component(path, "stem")) { g.stem += n; continue; }
    if (net_detail::has_component(path, "head")) { g.head += n; continue; }
    switch (p.kind) {
      case ParamKind::factor_a: g.factor_a += n; break;
      case ParamKind::factor_b: g.factor_b += n; break;
      case ParamKind::factor_c: g.factor_c += n; break;
      case ParamKind::factor_d: g.factor_d += n; break;
      case ParamKind::core: g.core += n; break;
      case ParamKind::bias: g.bias += n; break;
      case ParamKind::dense_weight: g.dense += n; break;
      case ParamKind::norm_scale:
      case ParamKind::norm_shift: g.norm += n; break;
    }
  }
  return r;
}

/// The same totals from the layer table alone (no tensors allocated).
inline ParamReport count_parameters(const Network& net) {
  ParamReport r;
  for (const auto& l : net.layers()) {
    r.total += l.params;
    r.per_layer.emplace_back(l.path, l.params);
    if (l.role == "stem") r.groups.stem += l.params;
    else if (l.role == "head") r.groups.head += l.params;
    else if (l.role == "norm") r.groups.norm += l.params;
  }
  return r;
}

}  // namespace largo
