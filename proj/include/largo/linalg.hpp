// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dense kernels over DenseTensor: GEMM, axis permutation, general mode
// contraction, outer products, Kaiming init and column normalization.
//
// Every product accumulates over the contracted index in increasing order,
// so results are bitwise stable.

#include <array>
#include <cmath>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "largo/error.hpp"
#include "largo/rng.hpp"
#include "largo/tensor.hpp"

namespace largo {

namespace gemm_detail {

// [rows, cols] -> [cols, rows], tiled.
inline std::vector<double> transpose(const double* x, std::size_t rows, std::size_t cols) {
  std::vector<double> out(rows * cols);
  constexpr std::size_t T = 32;
  for (std::size_t r0 = 0; r0 < rows; r0 += T)
    for (std::size_t c0 = 0; c0 < cols; c0 += T)
      for (std::size_t r = r0; r < std::min(rows, r0 + T); ++r)
        for (std::size_t c = c0; c < std::min(cols, c0 + T); ++c) out[c * rows + r] = x[r * cols + c];
  return out;
}

// ci[j] += sum_p av(p) * b[p*n + j], accumulated in increasing p. Four rows
// of B per pass so the output row is loaded once per block.
template <class AAt>
inline void axpy_rows(double* ci, const double* b, std::size_t n, std::size_t k, AAt av) {
  std::size_t p = 0;
  for (; p + 4 <= k; p += 4) {
    const double a0 = av(p), a1 = av(p + 1), a2 = av(p + 2), a3 = av(p + 3);
    const double *b0 = b + p * n, *b1 = b0 + n, *b2 = b1 + n, *b3 = b2 + n;
    for (std::size_t j = 0; j < n; ++j)
      ci[j] = (((ci[j] + a0 * b0[j]) + a1 * b1[j]) + a2 * b2[j]) + a3 * b3[j];
  }
  for (; p < k; ++p) {
    const double a0 = av(p);
    const double* b0 = b + p * n;
    for (std::size_t j = 0; j < n; ++j) ci[j] += a0 * b0[j];
  }
}

}  // namespace gemm_detail

/// C[m,n] (+)= sum_p opA[m,p] * opB[p,n] on raw row-major buffers.
/// With `trans_a`, A is stored [k,m]; with `trans_b`, B is stored [n,k].
inline void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
                 const double* a, const double* b, double* c, bool accumulate = false) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  if (!trans_a && !trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      const double* ai = a + i * k;
      gemm_detail::axpy_rows(c + i * n, b, n, k, [ai](std::size_t p) { return ai[p]; });
    }
  } else if (!trans_a && trans_b) {
    const std::vector<double> bt = gemm_detail::transpose(b, n, k);
    for (std::size_t i = 0; i < m; ++i) {
      const double* ai = a + i * k;
      gemm_detail::axpy_rows(c + i * n, bt.data(), n, k, [ai](std::size_t p) { return ai[p]; });
    }
  } else if (trans_a && !trans_b) {
    for (std::size_t i = 0; i < m; ++i)
      gemm_detail::axpy_rows(c + i * n, b, n, k, [a, m, i](std::size_t p) { return a[p * m + i]; });
  } else {
    const std::vector<double> bt = gemm_detail::transpose(b, n, k);
    for (std::size_t i = 0; i < m; ++i)
      gemm_detail::axpy_rows(c + i * n, bt.data(), n, k, [a, m, i](std::size_t p) { return a[p * m + i]; });
  }
}

/// Matrix product of rank-2 tensors.
inline DenseTensor matmul(const DenseTensor& a, const DenseTensor& b, bool trans_a = false,
                          bool trans_b = false) {
  if (a.rank() != 2 || b.rank() != 2) throw DimensionError("matmul expects rank-2 operands");
  const std::size_t m = trans_a ? a.dim(1) : a.dim(0);
  const std::size_t k = trans_a ? a.dim(0) : a.dim(1);
  const std::size_t kb = trans_b ? b.dim(1) : b.dim(0);
  const std::size_t n = trans_b ? b.dim(0) : b.dim(1);
  if (k != kb)
    throw DimensionError("matmul inner sizes differ: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  DenseTensor c(Shape{m, n});
  gemm(trans_a, trans_b, m, n, k, a.raw(), b.raw(), c.raw());
  return c;
}

/// out.shape[i] = x.shape[perm[i]].
inline DenseTensor permute(const DenseTensor& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  if (perm.size() != r) throw DimensionError("permutation rank mismatch");
  std::array<bool, kMaxRank> seen{};
  for (auto p : perm) {
    if (p >= r || seen[p]) throw DimensionError("invalid permutation");
    seen[p] = true;
  }
  bool identity = true;
  for (std::size_t i = 0; i < r; ++i) identity = identity && perm[i] == i;
  if (identity) return x;

  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.dim(perm[i]);
  std::array<std::size_t, kMaxRank> in_stride{};
  in_stride[r - 1] = 1;
  for (std::size_t i = r - 1; i > 0; --i) in_stride[i - 1] = in_stride[i] * x.dim(i);
  std::array<std::size_t, kMaxRank> step{};
  for (std::size_t i = 0; i < r; ++i) step[i] = in_stride[perm[i]];

  DenseTensor out(out_shape);
  std::array<std::size_t, kMaxRank> idx{};
  std::size_t src = 0;
  const double* in = x.raw();
  double* dst = out.raw();
  const std::size_t n = out.size();
  for (std::size_t lin = 0; lin < n; ++lin) {
    dst[lin] = in[src];
    for (std::size_t ax = r; ax-- > 0;) {
      ++idx[ax];
      src += step[ax];
      if (idx[ax] < out_shape[ax]) break;
      src -= step[ax] * out_shape[ax];
      idx[ax] = 0;
    }
  }
  return out;
}

inline std::vector<std::size_t> inverse_permutation(const std::vector<std::size_t>& perm) {
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
  return inv;
}

/// Pairs (mode of x, mode of y) summed over in a contraction.
using ModePairs = std::vector<std::pair<std::size_t, std::size_t>>;

/// Tensor contraction over the paired modes. The result carries the unpaired
/// modes of x followed by the unpaired modes of y, each in their original
/// order. A full contraction returns a scalar of shape {1}.
inline DenseTensor contract_modes(const DenseTensor& x, const DenseTensor& y,
                                  const ModePairs& modes) {
  std::array<bool, kMaxRank> xc{}, yc{};
  std::size_t k = 1;
  for (auto [mx, my] : modes) {
    if (mx >= x.rank() || my >= y.rank() || xc[mx] || yc[my])
      throw DimensionError("invalid contraction mode pairing");
    if (x.dim(mx) != y.dim(my))
      throw DimensionError("contracted modes differ in size: x[" + std::to_string(mx) +
                           "]=" + std::to_string(x.dim(mx)) + " vs y[" + std::to_string(my) +
                           "]=" + std::to_string(y.dim(my)));
    xc[mx] = yc[my] = true;
    k *= x.dim(mx);
  }
  std::vector<std::size_t> xperm, yperm;
  Shape out_shape;
  std::size_t m = 1, n = 1;
  for (std::size_t i = 0; i < x.rank(); ++i)
    if (!xc[i]) {
      xperm.push_back(i);
      out_shape.push_back(x.dim(i));
      m *= x.dim(i);
    }
  for (auto [mx, my] : modes) {
    xperm.push_back(mx);
    yperm.push_back(my);
  }
  for (std::size_t i = 0; i < y.rank(); ++i)
    if (!yc[i]) {
      yperm.push_back(i);
      out_shape.push_back(y.dim(i));
      n *= y.dim(i);
    }
  if (out_shape.empty()) out_shape.push_back(1);
  if (out_shape.size() > kMaxRank) throw DimensionError("contraction result exceeds rank 5");

  const DenseTensor xp = permute(x, xperm);
  const DenseTensor yp = permute(y, yperm);
  DenseTensor out(out_shape);
  gemm(false, false, m, n, k, xp.raw(), yp.raw(), out.raw());
  return out;
}

/// result[i,j,k,l] = a[i] b[j] c[k] d[l].
inline DenseTensor outer_product_4(std::span<const double> a, std::span<const double> b,
                                   std::span<const double> c, std::span<const double> d) {
  if (a.empty() || b.empty() || c.empty() || d.empty())
    throw DimensionError("outer_product_4 requires non-empty vectors");
  DenseTensor out(Shape{a.size(), b.size(), c.size(), d.size()});
  double* o = out.raw();
  for (double ai : a)
    for (double bj : b) {
      const double ab = ai * bj;
      for (double ck : c) {
        const double abc = ab * ck;
        for (double dl : d) *o++ = abc * dl;
      }
    }
  return out;
}

/// I.i.d. Normal(0, 2 / fan_in) samples.
inline DenseTensor kaiming_normal(RngState& rng, const Shape& shape, std::size_t fan_in) {
  if (fan_in == 0) throw ParameterError("kaiming_normal: fan_in must be >= 1");
  DenseTensor out(shape);
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : out.data()) v = stddev * rng.normal();
  return out;
}

struct ColumnNormalized {
  DenseTensor normalized;
  std::vector<double> norms;
};

/// Scales every column of a [P,R] matrix to unit L2 norm.
inline ColumnNormalized column_l2_normalize(const DenseTensor& mat) {
  if (mat.rank() != 2) throw DimensionError("column_l2_normalize expects a matrix");
  const std::size_t rows = mat.dim(0), cols = mat.dim(1);
  ColumnNormalized out{mat, std::vector<double>(cols, 0.0)};
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t r = 0; r < cols; ++r) out.norms[r] += mat[i * cols + r] * mat[i * cols + r];
  for (std::size_t r = 0; r < cols; ++r) {
    out.norms[r] = std::sqrt(out.norms[r]);
    if (out.norms[r] == 0.0) throw DegenerateColumnError("zero column cannot be normalized", r);
  }
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t r = 0; r < cols; ++r) out.normalized[i * cols + r] /= out.norms[r];
  return out;
}

}  // namespace largo
