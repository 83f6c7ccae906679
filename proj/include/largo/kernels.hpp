// SPDX-License-Identifier: Apache-2.0
#pragma once

// Factorized joint weight tensors W[M, C_in, C_out, K] for one layer across
// all M modality-subset models.
//
// Model indices are 1-based (m in 1..M) everywhere in the public API; row
// m - 1 of the model-mode factor belongs to model m.

#include <cstdint>
#include <optional>
#include <string>
#include <variant>

#include "largo/error.hpp"
#include "largo/linalg.hpp"
#include "largo/rng.hpp"
#include "largo/tensor.hpp"

namespace largo {

struct LayerDims {
  std::size_t m_count = 1;
  std::size_t c_in = 1;
  std::size_t c_out = 1;
  std::size_t k_flat = 1;
  /// False for linear layers: the spatial factor D is dropped entirely and
  /// K takes no part in rank selection.
  bool spatial_factor = true;

  std::string str() const {
    return "(M=" + std::to_string(m_count) + ", C_in=" + std::to_string(c_in) +
           ", C_out=" + std::to_string(c_out) + ", K=" + std::to_string(k_flat) +
           (spatial_factor ? "" : ", linear") + ")";
  }

  void validate() const {
    if (m_count == 0 || c_in == 0 || c_out == 0 || k_flat == 0)
      throw ParameterError("layer dims must be >= 1: " + str());
    if (((m_count + 1) & m_count) != 0)
      throw ParameterError("model count must be 2^N - 1: " + str());
    if (!spatial_factor && k_flat != 1)
      throw ParameterError("linear layer dims require K = 1: " + str());
  }
};

/// R = max(1, floor(C_in C_out K / (M + C_in + C_out + K))); K is omitted from
/// the denominator for linear layers.
inline std::size_t cp_rank_for_budget(const LayerDims& d) {
  d.validate();
  const std::uint64_t dense = std::uint64_t{d.c_in} * d.c_out * d.k_flat;
  const std::uint64_t per_rank = d.m_count + d.c_in + d.c_out + (d.spatial_factor ? d.k_flat : 0);
  return std::max<std::uint64_t>(1, dense / per_rank);
}

namespace detail {
inline std::uint64_t isqrt(std::uint64_t v) {
  auto r = static_cast<std::uint64_t>(std::sqrt(static_cast<long double>(v)));
  while (r * r > v) --r;
  while ((r + 1) * (r + 1) <= v) ++r;
  return r;
}
}  // namespace detail

/// Largest R with M K R^2 + (C_in + C_out) R + M^2 + K^2 <= C_in C_out K,
/// clamped to >= 1. Throws when the discriminant is negative.
inline std::size_t tucker_rank_for_budget(const LayerDims& d) {
  d.validate();
  using i128 = __int128;
  const i128 m = d.m_count, k = d.k_flat, s = d.c_in + d.c_out;
  const i128 disc = s * s - 4 * m * k * (m * m + k * k - k * i128(d.c_in) * d.c_out);
  if (disc < 0) throw BudgetInfeasibleError("Tucker rank budget infeasible for " + d.str());
  // floor((-s + sqrt(disc)) / 2MK) == floor((-s + isqrt(disc)) / 2MK) since -s is integral.
  const i128 numer = static_cast<i128>(detail::isqrt(static_cast<std::uint64_t>(disc))) - s;
  if (numer < 2 * m * k) return 1;
  return static_cast<std::size_t>(numer / (2 * m * k));
}

/// W = sum_r a_r o b_r o c_r o d_r with per-(model, output-channel) bias.
struct CpKernel {
  LayerDims dims;
  std::size_t rank = 1;
  DenseTensor A;                  // [M, R]
  DenseTensor B;                  // [C_in, R]
  DenseTensor C;                  // [C_out, R]
  std::optional<DenseTensor> D;   // [K, R]; absent for linear layers
  DenseTensor bias;               // [M, C_out]

  void validate() const {
    dims.validate();
    const std::size_t R = rank;
    auto expect = [&](const DenseTensor& t, Shape s, const char* name) {
      if (t.shape() != s)
        throw DimensionError(std::string("CP factor ") + name + " has shape " +
                             shape_str(t.shape()) + ", expected " + shape_str(s));
    };
    if (R == 0) throw ParameterError("CP rank must be >= 1");
    expect(A, {dims.m_count, R}, "A");
    expect(B, {dims.c_in, R}, "B");
    expect(C, {dims.c_out, R}, "C");
    if (dims.spatial_factor != D.has_value())
      throw DimensionError("CP factor D presence does not match layer kind");
    if (D) expect(*D, {dims.k_flat, R}, "D");
    expect(bias, {dims.m_count, dims.c_out}, "bias");
  }
};

/// Tucker form with uncompressed model and kernel modes:
/// W[m,i,j,k] = sum A[m,m'] G[m',r,s,k'] B[i,r] C[j,s] D[k,k'].
struct TuckerKernel {
  LayerDims dims;
  std::size_t rank = 1;
  DenseTensor A;     // [M, M]
  DenseTensor G;     // [M, R, R, K]
  DenseTensor B;     // [C_in, R]
  DenseTensor C;     // [C_out, R]
  DenseTensor D;     // [K, K]
  DenseTensor bias;  // [M, C_out]
};

inline std::size_t param_count(const CpKernel& k) {
  const auto& d = k.dims;
  return (d.m_count + d.c_in + d.c_out + (d.spatial_factor ? d.k_flat : 0)) * k.rank +
         d.m_count * d.c_out;
}

inline std::size_t param_count(const TuckerKernel& k) {
  const auto& d = k.dims;
  return d.m_count * d.k_flat * k.rank * k.rank + (d.c_in + d.c_out) * k.rank +
         d.m_count * d.m_count + d.k_flat * d.k_flat + d.m_count * d.c_out;
}

/// Weights plus biases of M independent dense layers.
inline std::size_t dense_equivalent_count(const LayerDims& d) {
  return d.m_count * d.c_in * d.c_out * d.k_flat + d.m_count * d.c_out;
}

/// A = ones, bias = zeros, B/C/D Kaiming-normal with fan_in = C_in K.
inline CpKernel cp_init(const LayerDims& dims, std::size_t rank, RngState& rng) {
  dims.validate();
  if (rank == 0) throw ParameterError("CP rank must be >= 1");
  const std::size_t fan_in = dims.c_in * dims.k_flat;
  CpKernel k;
  k.dims = dims;
  k.rank = rank;
  k.A = DenseTensor({dims.m_count, rank}, 1.0);
  k.B = kaiming_normal(rng, {dims.c_in, rank}, fan_in);
  k.C = kaiming_normal(rng, {dims.c_out, rank}, fan_in);
  if (dims.spatial_factor) k.D = kaiming_normal(rng, {dims.k_flat, rank}, fan_in);
  k.bias = DenseTensor({dims.m_count, dims.c_out}, 0.0);
  return k;
}

/// A = ones, D = identity, bias = zeros; G, B, C Kaiming-normal (fan_in = C_in K).
inline TuckerKernel tucker_init(const LayerDims& dims, std::size_t rank, RngState& rng) {
  dims.validate();
  if (rank == 0) throw ParameterError("Tucker rank must be >= 1");
  const std::size_t M = dims.m_count, K = dims.k_flat, fan_in = dims.c_in * dims.k_flat;
  TuckerKernel k;
  k.dims = dims;
  k.rank = rank;
  k.A = DenseTensor({M, M}, 1.0);
  k.G = kaiming_normal(rng, {M, rank, rank, K}, fan_in);
  k.B = kaiming_normal(rng, {dims.c_in, rank}, fan_in);
  k.C = kaiming_normal(rng, {dims.c_out, rank}, fan_in);
  k.D = DenseTensor({K, K}, 0.0);
  for (std::size_t i = 0; i < K; ++i) k.D.at(i, i) = 1.0;
  k.bias = DenseTensor({M, dims.c_out}, 0.0);
  return k;
}

namespace detail {
inline void check_model_index(std::size_t m, std::size_t m_count) {
  if (m < 1 || m > m_count)
    throw IndexError("model index " + std::to_string(m) + " outside 1.." +
                     std::to_string(m_count));
}

/// CD[(j,k), r] = C[j,r] D[k,r] (D treated as ones when absent).
inline DenseTensor cp_output_kernel_factor(const CpKernel& k) {
  const std::size_t R = k.rank, Co = k.dims.c_out, K = k.dims.k_flat;
  DenseTensor cd({Co * K, R});
  for (std::size_t j = 0; j < Co; ++j)
    for (std::size_t kk = 0; kk < K; ++kk)
      for (std::size_t r = 0; r < R; ++r)
        cd[(j * K + kk) * R + r] = k.C[j * R + r] * (k.D ? (*k.D)[kk * R + r] : 1.0);
  return cd;
}
}  // namespace detail

/// Joint tensor W [M, C_in, C_out, K] = A . (B o C o D)^T.
inline DenseTensor cp_reconstruct_full(const CpKernel& k) {
  k.validate();
  const std::size_t R = k.rank, Ci = k.dims.c_in, CoK = k.dims.c_out * k.dims.k_flat;
  const DenseTensor cd = detail::cp_output_kernel_factor(k);
  DenseTensor bcd({Ci * CoK, R});
  for (std::size_t i = 0; i < Ci; ++i)
    for (std::size_t jk = 0; jk < CoK; ++jk)
      for (std::size_t r = 0; r < R; ++r)
        bcd[(i * CoK + jk) * R + r] = k.B[i * R + r] * cd[jk * R + r];
  DenseTensor w({k.dims.m_count, Ci, k.dims.c_out, k.dims.k_flat});
  gemm(false, true, k.dims.m_count, Ci * CoK, R, k.A.raw(), bcd.raw(), w.raw());
  return w;
}

/// W^(m) [C_in, C_out, K] = sum_r A[m,r] (b_r o c_r o d_r), O(C_in C_out K R).
inline DenseTensor cp_reconstruct_slice(const CpKernel& k, std::size_t m) {
  k.validate();
  detail::check_model_index(m, k.dims.m_count);
  const std::size_t R = k.rank, Ci = k.dims.c_in, CoK = k.dims.c_out * k.dims.k_flat;
  DenseTensor ba({Ci, R});
  for (std::size_t i = 0; i < Ci; ++i)
    for (std::size_t r = 0; r < R; ++r) ba[i * R + r] = k.B[i * R + r] * k.A[(m - 1) * R + r];
  const DenseTensor cd = detail::cp_output_kernel_factor(k);
  DenseTensor w({Ci, k.dims.c_out, k.dims.k_flat});
  gemm(false, true, Ci, CoK, R, ba.raw(), cd.raw(), w.raw());
  return w;
}

/// Contracts A row m into the core mode-M, then D, B and C.
inline DenseTensor tucker_reconstruct_slice(const TuckerKernel& k, std::size_t m) {
  detail::check_model_index(m, k.dims.m_count);
  const std::size_t M = k.dims.m_count;
  DenseTensor a_row({M});
  for (std::size_t i = 0; i < M; ++i) a_row[i] = k.A.at(m - 1, i);
  DenseTensor g = contract_modes(a_row, k.G, {{0, 0}});  // [R, R, K']
  g = contract_modes(g, k.D, {{2, 1}});                  // [R, R, K]
  g = contract_modes(k.B, g, {{1, 0}});                  // [C_in, R, K]
  g = contract_modes(g, k.C, {{1, 1}});                  // [C_in, K, C_out]
  return permute(g, {0, 2, 1});
}

/// Rescales B, C (and D) to unit-norm columns, absorbing the norms into A.
inline CpKernel cp_normalize(const CpKernel& k) {
  k.validate();
  CpKernel out = k;
  auto nb = column_l2_normalize(k.B);
  auto nc = column_l2_normalize(k.C);
  out.B = std::move(nb.normalized);
  out.C = std::move(nc.normalized);
  std::vector<double> scale(k.rank);
  for (std::size_t r = 0; r < k.rank; ++r) scale[r] = nb.norms[r] * nc.norms[r];
  if (k.D) {
    auto nd = column_l2_normalize(*k.D);
    out.D = std::move(nd.normalized);
    for (std::size_t r = 0; r < k.rank; ++r) scale[r] *= nd.norms[r];
  }
  for (std::size_t m = 0; m < k.dims.m_count; ++m)
    for (std::size_t r = 0; r < k.rank; ++r) out.A[m * k.rank + r] *= scale[r];
  return out;
}

}  // namespace largo
