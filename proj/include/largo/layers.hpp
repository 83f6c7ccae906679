// SPDX-License-Identifier: Apache-2.0
#pragma once

// Network layers built on factorized kernels. A WeightSlot owns the
// parameters of one layer's weight and bias, stored either densely (one
// model) or as a CP/Tucker factorization across all M subset models; the
// layer types on top only add geometry and wiring.

#include <string>
#include <vector>

#include "largo/kernels.hpp"
#include "largo/modality.hpp"
#include "largo/nn_ops.hpp"
#include "largo/state.hpp"

namespace largo {

enum class Decomposition { dense, cp, tucker };

inline const char* decomposition_name(Decomposition d) {
  switch (d) {
    case Decomposition::dense: return "dense";
    case Decomposition::cp: return "cp";
    case Decomposition::tucker: return "tucker";
  }
  return "?";
}

inline Decomposition decomposition_from_name(const std::string& s) {
  if (s == "dense") return Decomposition::dense;
  if (s == "cp") return Decomposition::cp;
  if (s == "tucker") return Decomposition::tucker;
  throw ConfigError("unknown decomposition '" + s + "' (expected cp, tucker or dense)");
}

struct WeightSlot {
  std::string path;
  LayerDims dims;  // m_count = 1 for dense slots
  Decomposition decomp = Decomposition::dense;
  std::size_t rank = 0;

  std::string tensor_path(const char* name) const { return path + "/" + name; }

  std::size_t param_count() const {
    switch (decomp) {
      case Decomposition::dense:
        return dims.c_in * dims.c_out * dims.k_flat + dims.c_out;
      case Decomposition::cp: {
        CpKernel k;
        k.dims = dims;
        k.rank = rank;
        return largo::param_count(k);
      }
      case Decomposition::tucker: {
        TuckerKernel k;
        k.dims = dims;
        k.rank = rank;
        return largo::param_count(k);
      }
    }
    return 0;
  }

  void init(NetworkState& state, RngState& rng) const {
    switch (decomp) {
      case Decomposition::dense:
        state.add(tensor_path("weight"),
                  kaiming_normal(rng, {dims.c_in, dims.c_out, dims.k_flat}, dims.c_in * dims.k_flat),
                  ParamKind::dense_weight);
        state.add(tensor_path("bias"), DenseTensor({dims.c_out}, 0.0), ParamKind::bias);
        break;
      case Decomposition::cp: {
        CpKernel k = cp_init(dims, rank, rng);
        store(state, k);
        break;
      }
      case Decomposition::tucker: {
        TuckerKernel k = tucker_init(dims, rank, rng);
        state.add(tensor_path("A"), std::move(k.A), ParamKind::factor_a);
        state.add(tensor_path("G"), std::move(k.G), ParamKind::core);
        state.add(tensor_path("B"), std::move(k.B), ParamKind::factor_b);
        state.add(tensor_path("C"), std::move(k.C), ParamKind::factor_c);
        state.add(tensor_path("D"), std::move(k.D), ParamKind::factor_d);
        state.add(tensor_path("bias"), std::move(k.bias), ParamKind::bias);
        break;
      }
    }
  }

  void store(NetworkState& state, const CpKernel& k) const {
    state.add(tensor_path("A"), k.A, ParamKind::factor_a);
    state.add(tensor_path("B"), k.B, ParamKind::factor_b);
    state.add(tensor_path("C"), k.C, ParamKind::factor_c);
    if (k.D) state.add(tensor_path("D"), *k.D, ParamKind::factor_d);
    state.add(tensor_path("bias"), k.bias, ParamKind::bias);
  }

  CpKernel cp_kernel(const NetworkState& state) const {
    if (decomp != Decomposition::cp) throw BuildError(path + " is not a CP layer");
    CpKernel k;
    k.dims = dims;
    k.rank = rank;
    k.A = state.value(tensor_path("A"));
    k.B = state.value(tensor_path("B"));
    k.C = state.value(tensor_path("C"));
    if (dims.spatial_factor) k.D = state.value(tensor_path("D"));
    k.bias = state.value(tensor_path("bias"));
    return k;
  }

  void write_cp_kernel(NetworkState& state, const CpKernel& k) const {
    state.value(tensor_path("A")) = k.A;
    state.value(tensor_path("B")) = k.B;
    state.value(tensor_path("C")) = k.C;
    if (k.D) state.value(tensor_path("D")) = *k.D;
    state.value(tensor_path("bias")) = k.bias;
  }

  TuckerKernel tucker_kernel(const NetworkState& state) const {
    if (decomp != Decomposition::tucker) throw BuildError(path + " is not a Tucker layer");
    return TuckerKernel{dims,
                        rank,
                        state.value(tensor_path("A")),
                        state.value(tensor_path("G")),
                        state.value(tensor_path("B")),
                        state.value(tensor_path("C")),
                        state.value(tensor_path("D")),
                        state.value(tensor_path("bias"))};
  }

  /// Weight of model m as [C_in, C_out, K]; dense slots ignore m.
  ad::Var weight(ParamBinder& p, std::size_t m) const {
    if (decomp == Decomposition::dense) return p(tensor_path("weight"));
    return p.cached(path + "#w" + std::to_string(m), [&] {
      if (decomp == Decomposition::cp)
        return ad::cp_slice(p(tensor_path("A")), p(tensor_path("B")), p(tensor_path("C")),
                            dims.spatial_factor ? p(tensor_path("D")) : ad::Var{}, m);
      return ad::tucker_slice(p(tensor_path("A")), p(tensor_path("G")), p(tensor_path("B")),
                              p(tensor_path("C")), p(tensor_path("D")), m);
    });
  }

  ad::Var bias(ParamBinder& p, std::size_t m) const {
    if (decomp == Decomposition::dense) return p(tensor_path("bias"));
    return p.cached(path + "#b" + std::to_string(m),
                    [&] { return ad::select_row(p(tensor_path("bias")), m); });
  }
};

/// Low-rank (or dense) convolution / transposed convolution.
struct LrConvLayer {
  WeightSlot slot;
  ConvGeometry geom;
  std::size_t spatial_rank = 2;
  bool transposed = false;

  ad::Var forward(ParamBinder& p, ad::Var x, std::size_t m) const {
    if (x.shape()[0] != slot.dims.c_in)
      throw DimensionError(slot.path + ": expected " + std::to_string(slot.dims.c_in) +
                           " input channels, got " + std::to_string(x.shape()[0]));
    if (slot.decomp != Decomposition::dense) largo::detail::check_model_index(m, slot.dims.m_count);
    ad::Var w = slot.weight(p, m);
    ad::Var b = slot.bias(p, m);
    return transposed ? ad::conv_transposed(x, w, b, geom) : ad::conv(x, w, b, geom);
  }
};

/// Linear layer on [features, batch] matrices: a convolution with K = 1 over
/// the batch axis. Factorized linear layers drop the spatial factor D.
struct LrLinearLayer {
  WeightSlot slot;

  ad::Var forward(ParamBinder& p, ad::Var x, std::size_t m) const {
    if (x.shape().size() != 2 || x.shape()[0] != slot.dims.c_in)
      throw DimensionError(slot.path + ": expected [" + std::to_string(slot.dims.c_in) +
                           ", batch] input, got " + shape_str(x.shape()));
    if (slot.decomp != Decomposition::dense) largo::detail::check_model_index(m, slot.dims.m_count);
    return ad::conv(x, slot.weight(p, m), slot.bias(p, m), ConvGeometry{});
  }
};

/// Affine parameters of an instance/layer norm, per model or shared.
struct NormLayer {
  std::string path;
  std::size_t channels = 0;
  std::size_t copies = 1;  // M when per-model, 1 when shared

  std::size_t param_count() const { return 2 * copies * channels; }

  void init(NetworkState& state) const {
    state.add(path + "/scale", DenseTensor({copies, channels}, 1.0), ParamKind::norm_scale);
    state.add(path + "/shift", DenseTensor({copies, channels}, 0.0), ParamKind::norm_shift);
  }

  ad::Var affine(ParamBinder& p, ad::Var normalized, std::size_t m) const {
    const std::size_t row = copies == 1 ? 1 : m;
    ad::Var g = p.cached(path + "#s" + std::to_string(row),
                         [&] { return ad::select_row(p(path + "/scale"), row); });
    ad::Var b = p.cached(path + "#t" + std::to_string(row),
                         [&] { return ad::select_row(p(path + "/shift"), row); });
    return ad::channel_affine(normalized, g, b);
  }

  ad::Var instance(ParamBinder& p, ad::Var x, std::size_t m) const {
    return affine(p, ad::instance_norm(x), m);
  }

  ad::Var layer(ParamBinder& p, ad::Var x, std::size_t m) const {
    return affine(p, ad::layer_norm(x), m);
  }
};

/// M uncompressed first layers; entry m reads the channels of subset m's
/// modalities concatenated in ascending modality order.
struct StemBank {
  std::string path;
  std::size_t n_modalities = 1;
  std::vector<std::size_t> modality_channels;  // channels contributed per modality
  std::size_t c_out = 1;
  std::size_t k_flat = 1;
  ConvGeometry geom;

  std::size_t model_count() const { return model_count_for(n_modalities); }

  std::size_t in_channels(std::size_t m) const {
    std::size_t c = 0;
    for (auto i : ModalityMask::from_index(m, n_modalities).members()) c += modality_channels[i];
    return c;
  }

  WeightSlot entry(std::size_t m) const {
    return WeightSlot{path + "/m" + std::to_string(m),
                      LayerDims{1, in_channels(m), c_out, k_flat, true}, Decomposition::dense, 0};
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (std::size_t m = 1; m <= model_count(); ++m) n += entry(m).param_count();
    return n;
  }

  void init(NetworkState& state, RngState& rng) const {
    for (std::size_t m = 1; m <= model_count(); ++m) entry(m).init(state, rng);
  }

  /// Concatenates the supplied modalities (keyed by id) and applies stem m.
  ad::Var forward(ParamBinder& p, const ModalityInputs& inputs, const ModalityMask& mask) const {
    check_inputs_match(inputs, mask);
    std::vector<ad::Var> parts;
    for (auto id : mask.members()) {
      const auto& t = inputs.at(id);
      if (t.dim(0) != modality_channels[id])
        throw DimensionError("modality " + std::to_string(id) + " has " +
                             std::to_string(t.dim(0)) + " channels, expected " +
                             std::to_string(modality_channels[id]));
      parts.push_back(p.tape().constant(t));
    }
    ad::Var x = parts.size() == 1 ? parts[0] : ad::concat(parts);
    const WeightSlot s = entry(mask.index());
    return ad::conv(x, s.weight(p, 0), s.bias(p, 0), geom);
  }
};

}  // namespace largo
