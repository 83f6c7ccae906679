// SPDX-License-Identifier: Apache-2.0
#pragma once

// Differentiable network primitives: convolution, transposed convolution,
// normalization, softmax and the factorized weight reconstructions.
//
// Activations are laid out [C, spatial...] with one to three spatial axes.
// Convolution weights are [C_in, C_out, K] with K the row-major flattening
// of the kernel window, which is exactly the layout a CP/Tucker slice
// reconstructs to, for both the forward and the transposed direction.

#include <array>
#include <string>

#include "largo/autodiff.hpp"
#include "largo/kernels.hpp"

namespace largo {

/// Window geometry for up to three spatial axes. Entries for axes that the
/// input does not have must stay at their defaults.
struct ConvGeometry {
  std::array<std::size_t, 3> kernel{1, 1, 1};
  std::size_t stride = 1;
  std::size_t pad = 0;

  static ConvGeometry cube(std::size_t spatial_rank, std::size_t k, std::size_t stride,
                           std::size_t pad) {
    ConvGeometry g;
    for (std::size_t i = 0; i < spatial_rank; ++i) g.kernel[i] = k;
    g.stride = stride;
    g.pad = pad;
    return g;
  }

  std::size_t k_flat(std::size_t spatial_rank) const {
    std::size_t k = 1;
    for (std::size_t i = 0; i < spatial_rank; ++i) k *= kernel[i];
    return k;
  }
};

namespace conv_detail {

/// Spatial extents padded to three axes (leading axes of size 1) plus the
/// per-axis kernel/stride/pad used internally.
struct Plan {
  std::size_t spatial_rank = 0;
  std::size_t channels = 0;
  std::array<std::size_t, 3> in{1, 1, 1};   // image side (the larger grid for a conv)
  std::array<std::size_t, 3> out{1, 1, 1};  // column side
  std::array<std::size_t, 3> k{1, 1, 1};
  std::array<std::size_t, 3> s{1, 1, 1};
  std::array<std::size_t, 3> p{0, 0, 0};
  std::size_t k_flat() const { return k[0] * k[1] * k[2]; }
  std::size_t in_size() const { return in[0] * in[1] * in[2]; }
  std::size_t out_size() const { return out[0] * out[1] * out[2]; }
};

inline Plan make_plan(std::size_t channels, const Shape& spatial, const ConvGeometry& g,
                      bool image_is_input) {
  const std::size_t sr = spatial.size();
  if (sr < 1 || sr > 3) throw DimensionError("convolution needs 1-3 spatial axes");
  Plan pl;
  pl.spatial_rank = sr;
  pl.channels = channels;
  const std::size_t off = 3 - sr;
  for (std::size_t i = 0; i < 3; ++i)
    if (i >= sr && g.kernel[i] != 1)
      throw DimensionError("kernel extent given for a missing spatial axis");
  for (std::size_t i = 0; i < sr; ++i) {
    const std::size_t ax = off + i;
    pl.k[ax] = g.kernel[i];
    pl.s[ax] = g.stride;
    pl.p[ax] = g.pad;
    if (g.stride == 0 || g.kernel[i] == 0) throw DimensionError("zero stride or kernel extent");
    if (image_is_input) {
      pl.in[ax] = spatial[i];
      if (spatial[i] + 2 * g.pad < g.kernel[i])
        throw DimensionError("kernel larger than padded input");
      pl.out[ax] = (spatial[i] + 2 * g.pad - g.kernel[i]) / g.stride + 1;
    } else {
      pl.out[ax] = spatial[i];
      const std::size_t full = (spatial[i] - 1) * g.stride + g.kernel[i];
      if (full < 2 * g.pad) throw DimensionError("transposed convolution output would be empty");
      pl.in[ax] = full - 2 * g.pad;
    }
  }
  return pl;
}

/// col[(c, kd, kh, kw), (od, oh, ow)] = image[c, od*s - p + kd, ...] (zero outside).
inline void im2col(const Plan& pl, const double* image, double* col) {
  const std::size_t P = pl.out_size(), K = pl.k_flat();
  for (std::size_t c = 0; c < pl.channels; ++c) {
    const double* img = image + c * pl.in_size();
    for (std::size_t kd = 0; kd < pl.k[0]; ++kd)
      for (std::size_t kh = 0; kh < pl.k[1]; ++kh)
        for (std::size_t kw = 0; kw < pl.k[2]; ++kw) {
          double* row = col + (c * K + (kd * pl.k[1] + kh) * pl.k[2] + kw) * P;
          for (std::size_t od = 0; od < pl.out[0]; ++od) {
            const long id = long(od * pl.s[0] + kd) - long(pl.p[0]);
            for (std::size_t oh = 0; oh < pl.out[1]; ++oh) {
              const long ih = long(oh * pl.s[1] + kh) - long(pl.p[1]);
              double* dst = row + (od * pl.out[1] + oh) * pl.out[2];
              if (id < 0 || id >= long(pl.in[0]) || ih < 0 || ih >= long(pl.in[1])) {
                std::fill(dst, dst + pl.out[2], 0.0);
                continue;
              }
              const double* src = img + (std::size_t(id) * pl.in[1] + std::size_t(ih)) * pl.in[2];
              for (std::size_t ow = 0; ow < pl.out[2]; ++ow) {
                const long iw = long(ow * pl.s[2] + kw) - long(pl.p[2]);
                dst[ow] = (iw < 0 || iw >= long(pl.in[2])) ? 0.0 : src[iw];
              }
            }
          }
        }
  }
}

/// Adjoint of im2col: scatters-adds columns back onto the image grid.
inline void col2im(const Plan& pl, const double* col, double* image) {
  const std::size_t P = pl.out_size(), K = pl.k_flat();
  std::fill(image, image + pl.channels * pl.in_size(), 0.0);
  for (std::size_t c = 0; c < pl.channels; ++c) {
    double* img = image + c * pl.in_size();
    for (std::size_t kd = 0; kd < pl.k[0]; ++kd)
      for (std::size_t kh = 0; kh < pl.k[1]; ++kh)
        for (std::size_t kw = 0; kw < pl.k[2]; ++kw) {
          const double* row = col + (c * K + (kd * pl.k[1] + kh) * pl.k[2] + kw) * P;
          for (std::size_t od = 0; od < pl.out[0]; ++od) {
            const long id = long(od * pl.s[0] + kd) - long(pl.p[0]);
            if (id < 0 || id >= long(pl.in[0])) continue;
            for (std::size_t oh = 0; oh < pl.out[1]; ++oh) {
              const long ih = long(oh * pl.s[1] + kh) - long(pl.p[1]);
              if (ih < 0 || ih >= long(pl.in[1])) continue;
              const double* src = row + (od * pl.out[1] + oh) * pl.out[2];
              double* dst = img + (std::size_t(id) * pl.in[1] + std::size_t(ih)) * pl.in[2];
              for (std::size_t ow = 0; ow < pl.out[2]; ++ow) {
                const long iw = long(ow * pl.s[2] + kw) - long(pl.p[2]);
                if (iw >= 0 && iw < long(pl.in[2])) dst[iw] += src[ow];
              }
            }
          }
        }
  }
}

inline Shape spatial_of(const Shape& s) { return Shape(s.begin() + 1, s.end()); }

inline Shape grid_shape(std::size_t channels, const std::array<std::size_t, 3>& grid,
                        std::size_t spatial_rank) {
  Shape out{channels};
  for (std::size_t i = 3 - spatial_rank; i < 3; ++i) out.push_back(grid[i]);
  return out;
}

inline void check_weight(const DenseTensor& w, std::size_t c_in, std::size_t k_flat) {
  if (w.rank() != 3 || w.dim(0) != c_in || w.dim(2) != k_flat)
    throw DimensionError("weight shape " + shape_str(w.shape()) + " incompatible with C_in=" +
                         std::to_string(c_in) + ", K=" + std::to_string(k_flat));
}

inline void add_bias(DenseTensor& y, const DenseTensor& b) {
  const std::size_t c = y.dim(0), inner = y.size() / c;
  if (b.size() != c) throw DimensionError("bias length does not match channel count");
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < inner; ++j) y[i * inner + j] += b[i];
}

inline DenseTensor bias_grad(const DenseTensor& g) {
  const std::size_t c = g.dim(0), inner = g.size() / c;
  DenseTensor gb({c}, 0.0);
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < inner; ++j) gb[i] += g[i * inner + j];
  return gb;
}

}  // namespace conv_detail

namespace ad {

/// y[co, p] = sum_{ci, k} W[ci, co, k] x[ci, window(p, k)] + bias[co].
/// Pass a default-constructed Var (tape == nullptr) to omit the bias.
inline Var conv(Var x, Var w, Var bias, const ConvGeometry& geom) {
  using namespace conv_detail;
  const auto& xs = x.shape();
  const Plan pl = make_plan(xs[0], spatial_of(xs), geom, true);
  check_weight(w.value(), xs[0], pl.k_flat());
  const std::size_t ci = xs[0], co = w.shape()[1], K = pl.k_flat(), P = pl.out_size();
  detail::same_tape(x, w);

  // wm[co, (ci, k)]
  const DenseTensor wm = largo::permute(w.value(), {1, 0, 2});
  DenseTensor col({ci * K, P});
  im2col(pl, x.value().raw(), col.raw());
  DenseTensor y(grid_shape(co, pl.out, pl.spatial_rank));
  gemm(false, false, co, P, ci * K, wm.raw(), col.raw(), y.raw());
  std::vector<std::size_t> parents{x.id, w.id};
  const bool has_bias = bias.tape != nullptr;
  if (has_bias) {
    detail::same_tape(x, bias);
    add_bias(y, bias.value());
    parents.push_back(bias.id);
  }
  return x.tape->record(std::move(y), parents, [=](Tape& t, const DenseTensor& g) {
    if (t.needs_grad(w)) {
      DenseTensor col2({ci * K, P});
      im2col(pl, x.value().raw(), col2.raw());
      DenseTensor gwm({co, ci, K});
      gemm(false, true, co, ci * K, P, g.raw(), col2.raw(), gwm.raw());
      t.accumulate(w, largo::permute(gwm, {1, 0, 2}));
    }
    if (t.needs_grad(x)) {
      const DenseTensor wm2 = largo::permute(w.value(), {1, 0, 2});
      DenseTensor gcol({ci * K, P});
      gemm(true, false, ci * K, P, co, wm2.raw(), g.raw(), gcol.raw());
      DenseTensor gx(x.shape());
      col2im(pl, gcol.raw(), gx.raw());
      t.accumulate(x, std::move(gx));
    }
    if (has_bias && t.needs_grad(bias)) t.accumulate(bias, bias_grad(g));
  });
}

/// Transposed convolution (the adjoint of conv in x): every input position
/// scatters W[ci, co, k] x[ci, p] onto output position p*stride - pad + k.
inline Var conv_transposed(Var x, Var w, Var bias, const ConvGeometry& geom) {
  using namespace conv_detail;
  const auto& xs = x.shape();
  const std::size_t ci = xs[0];
  const std::size_t co = w.shape().size() == 3 ? w.shape()[1] : 0;
  // The image side of the plan is the (larger) output grid with C_out channels.
  const Plan pl = make_plan(co, spatial_of(xs), geom, false);
  check_weight(w.value(), ci, pl.k_flat());
  detail::same_tape(x, w);
  const std::size_t K = pl.k_flat(), P = pl.out_size();

  DenseTensor ycol({co * K, P});
  gemm(true, false, co * K, P, ci, w.value().raw(), x.value().raw(), ycol.raw());
  DenseTensor y(grid_shape(co, pl.in, pl.spatial_rank));
  col2im(pl, ycol.raw(), y.raw());
  std::vector<std::size_t> parents{x.id, w.id};
  const bool has_bias = bias.tape != nullptr;
  if (has_bias) {
    detail::same_tape(x, bias);
    add_bias(y, bias.value());
    parents.push_back(bias.id);
  }
  return x.tape->record(std::move(y), parents, [=](Tape& t, const DenseTensor& g) {
    DenseTensor gcol({co * K, P});
    im2col(pl, g.raw(), gcol.raw());
    if (t.needs_grad(x)) {
      DenseTensor gx(x.shape());
      gemm(false, false, ci, P, co * K, w.value().raw(), gcol.raw(), gx.raw());
      t.accumulate(x, std::move(gx));
    }
    if (t.needs_grad(w)) {
      DenseTensor gw(w.shape());
      gemm(false, true, ci, co * K, P, x.value().raw(), gcol.raw(), gw.raw());
      t.accumulate(w, std::move(gw));
    }
    if (has_bias && t.needs_grad(bias)) t.accumulate(bias, bias_grad(g));
  });
}

/// Per-channel standardization over all trailing axes: (x - mean) / sqrt(var + eps),
/// with the biased variance. Gradients flow through the statistics.
inline Var instance_norm(Var x, double eps = 1e-5) {
  const std::size_t c = x.shape()[0], n = x.value().size() / c;
  if (n < 2) throw DegenerateStatisticsError("instance_norm needs spatial size >= 2");
  DenseTensor y(x.shape());
  std::vector<double> inv_std(c);
  for (std::size_t i = 0; i < c; ++i) {
    const double* xi = x.value().raw() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xi[j];
    mu /= double(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= double(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] = (xi[j] - mu) * inv_std[i];
  }
  DenseTensor yhat = y;
  return x.tape->record(std::move(y), {x.id}, [=](Tape& t, const DenseTensor& g) {
    DenseTensor gx(x.shape());
    for (std::size_t i = 0; i < c; ++i) {
      double mg = 0.0, mgy = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        mg += g[i * n + j];
        mgy += g[i * n + j] * yhat[i * n + j];
      }
      mg /= double(n);
      mgy /= double(n);
      for (std::size_t j = 0; j < n; ++j)
        gx[i * n + j] = inv_std[i] * (g[i * n + j] - mg - yhat[i * n + j] * mgy);
    }
    t.accumulate(x, std::move(gx));
  });
}

/// Standardizes every column of a [C, B] matrix over its C features.
inline Var layer_norm(Var x, double eps = 1e-5) {
  if (x.shape().size() != 2) throw DimensionError("layer_norm expects [features, batch]");
  return permute(instance_norm(permute(x, {1, 0}), eps), {1, 0});
}

/// y[c, ...] = gamma[c] x[c, ...] + beta[c].
inline Var channel_affine(Var x, Var gamma, Var beta) {
  const std::size_t c = x.shape()[0], n = x.value().size() / c;
  if (gamma.value().size() != c || beta.value().size() != c)
    throw DimensionError("affine parameters do not match channel count");
  DenseTensor y = x.value();
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] = gamma.value()[i] * y[i * n + j] + beta.value()[i];
  return x.tape->record(std::move(y), {x.id, gamma.id, beta.id}, [=](Tape& t, const DenseTensor& g) {
    if (t.needs_grad(x)) {
      DenseTensor gx = g;
      for (std::size_t i = 0; i < c; ++i)
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] *= gamma.value()[i];
      t.accumulate(x, std::move(gx));
    }
    if (t.needs_grad(gamma)) {
      DenseTensor gg(gamma.shape(), 0.0);
      for (std::size_t i = 0; i < c; ++i)
        for (std::size_t j = 0; j < n; ++j) gg[i] += g[i * n + j] * x.value()[i * n + j];
      t.accumulate(gamma, std::move(gg));
    }
    if (t.needs_grad(beta)) t.accumulate(beta, conv_detail::bias_grad(g).reshaped(beta.shape()));
  });
}

/// y[c, ...] = x[c, ...] + b[c].
inline Var add_channel_bias(Var x, Var b) {
  DenseTensor y = x.value();
  conv_detail::add_bias(y, b.value());
  return x.tape->record(std::move(y), {x.id, b.id}, [=](Tape& t, const DenseTensor& g) {
    t.accumulate(x, g);
    if (t.needs_grad(b)) t.accumulate(b, conv_detail::bias_grad(g).reshaped(b.shape()));
  });
}

namespace detail {
inline DenseTensor softmax_axis0(const DenseTensor& x, bool log_space) {
  const std::size_t c = x.dim(0), n = x.size() / c;
  DenseTensor y(x.shape());
  for (std::size_t j = 0; j < n; ++j) {
    double mx = x[j];
    for (std::size_t i = 1; i < c; ++i) mx = std::max(mx, x[i * n + j]);
    double z = 0.0;
    for (std::size_t i = 0; i < c; ++i) z += std::exp(x[i * n + j] - mx);
    const double lz = std::log(z) + mx;
    for (std::size_t i = 0; i < c; ++i)
      y[i * n + j] = log_space ? x[i * n + j] - lz : std::exp(x[i * n + j] - lz);
  }
  return y;
}
}  // namespace detail

/// Softmax across axis 0 (classes) independently at every position.
inline Var softmax(Var x) {
  DenseTensor y = detail::softmax_axis0(x.value(), false);
  DenseTensor s = y;
  return x.tape->record(std::move(y), {x.id}, [=](Tape& t, const DenseTensor& g) {
    const std::size_t c = s.dim(0), n = s.size() / c;
    DenseTensor gx(s.shape());
    for (std::size_t j = 0; j < n; ++j) {
      double d = 0.0;
      for (std::size_t i = 0; i < c; ++i) d += g[i * n + j] * s[i * n + j];
      for (std::size_t i = 0; i < c; ++i) gx[i * n + j] = s[i * n + j] * (g[i * n + j] - d);
    }
    t.accumulate(x, std::move(gx));
  });
}

inline Var log_softmax(Var x) {
  DenseTensor y = detail::softmax_axis0(x.value(), true);
  DenseTensor s = detail::softmax_axis0(x.value(), false);
  return x.tape->record(std::move(y), {x.id}, [=](Tape& t, const DenseTensor& g) {
    const std::size_t c = s.dim(0), n = s.size() / c;
    DenseTensor gx(s.shape());
    for (std::size_t j = 0; j < n; ++j) {
      double d = 0.0;
      for (std::size_t i = 0; i < c; ++i) d += g[i * n + j];
      for (std::size_t i = 0; i < c; ++i) gx[i * n + j] = g[i * n + j] - s[i * n + j] * d;
    }
    t.accumulate(x, std::move(gx));
  });
}

/// W^(m) [C_in, C_out, K] = sum_r A[m, r] B[:, r] o C[:, r] o D[:, r].
/// `d` may be a default Var for linear layers (K = 1, no spatial factor).
inline Var cp_slice(Var a, Var b, Var c, Var d, std::size_t m) {
  const bool has_d = d.tape != nullptr;
  const std::size_t M = a.shape()[0], R = a.shape()[1], Ci = b.shape()[0], Co = c.shape()[0];
  const std::size_t K = has_d ? d.shape()[0] : 1;
  if (b.shape()[1] != R || c.shape()[1] != R || (has_d && d.shape()[1] != R))
    throw DimensionError("CP factors disagree on rank");
  largo::detail::check_model_index(m, M);
  detail::same_tape(a, b);
  detail::same_tape(a, c);

  const double* av = a.value().raw() + (m - 1) * R;
  DenseTensor ba({Ci, R});
  for (std::size_t i = 0; i < Ci; ++i)
    for (std::size_t r = 0; r < R; ++r) ba[i * R + r] = b.value()[i * R + r] * av[r];
  DenseTensor cd({Co * K, R});
  for (std::size_t j = 0; j < Co; ++j)
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t r = 0; r < R; ++r)
        cd[(j * K + k) * R + r] = c.value()[j * R + r] * (has_d ? d.value()[k * R + r] : 1.0);
  DenseTensor w({Ci, Co, K});
  gemm(false, true, Ci, Co * K, R, ba.raw(), cd.raw(), w.raw());

  std::vector<std::size_t> parents{a.id, b.id, c.id};
  if (has_d) {
    detail::same_tape(a, d);
    parents.push_back(d.id);
  }
  return a.tape->record(std::move(w), parents, [=](Tape& t, const DenseTensor& g) {
    // g viewed as [Ci, Co*K].
    DenseTensor gba({Ci, R});
    gemm(false, false, Ci, R, Co * K, g.raw(), cd.raw(), gba.raw());
    DenseTensor gcd({Co * K, R});
    gemm(true, false, Co * K, R, Ci, g.raw(), ba.raw(), gcd.raw());
    const double* arow = a.value().raw() + (m - 1) * R;
    if (t.needs_grad(a)) {
      DenseTensor ga(a.shape(), 0.0);
      for (std::size_t i = 0; i < Ci; ++i)
        for (std::size_t r = 0; r < R; ++r) ga[(m - 1) * R + r] += gba[i * R + r] * b.value()[i * R + r];
      t.accumulate(a, std::move(ga));
    }
    if (t.needs_grad(b)) {
      DenseTensor gb({Ci, R});
      for (std::size_t i = 0; i < Ci; ++i)
        for (std::size_t r = 0; r < R; ++r) gb[i * R + r] = gba[i * R + r] * arow[r];
      t.accumulate(b, std::move(gb));
    }
    if (t.needs_grad(c)) {
      DenseTensor gc({Co, R}, 0.0);
      for (std::size_t j = 0; j < Co; ++j)
        for (std::size_t k = 0; k < K; ++k)
          for (std::size_t r = 0; r < R; ++r)
            gc[j * R + r] += gcd[(j * K + k) * R + r] * (has_d ? d.value()[k * R + r] : 1.0);
      t.accumulate(c, std::move(gc));
    }
    if (has_d && t.needs_grad(d)) {
      DenseTensor gd({K, R}, 0.0);
      for (std::size_t j = 0; j < Co; ++j)
        for (std::size_t k = 0; k < K; ++k)
          for (std::size_t r = 0; r < R; ++r)
            gd[k * R + r] += gcd[(j * K + k) * R + r] * c.value()[j * R + r];
      t.accumulate(d, std::move(gd));
    }
  });
}

/// Tucker slice as a chain of differentiable contractions:
/// A row m -> core mode M, then D over K, B over the first R mode, C over the second.
inline Var tucker_slice(Var a, Var g, Var b, Var c, Var d, std::size_t m) {
  Var row = select_row(a, m);                 // [M]
  Var w = contract(row, g, {{0, 0}});         // [R, R, K']
  w = contract(w, d, {{2, 1}});               // [R, R, K]
  w = contract(b, w, {{1, 0}});               // [C_in, R, K]
  w = contract(w, c, {{1, 1}});               // [C_in, K, C_out]
  return permute(w, {0, 2, 1});
}

}  // namespace ad
}  // namespace largo
