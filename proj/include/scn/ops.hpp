#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "scn/error.hpp"
#include "scn/tensor.hpp"

// Differentiable operations over scn::Tensor. Every op validates extents,
// computes its forward value eagerly and records a closure that pushes the
// output gradient back into whichever inputs require it.

namespace scn {

namespace detail {

inline void require_rank(const Shape& shape, std::size_t rank, const char* op, const char* what) {
  if (shape.size() != rank) {
    throw DimensionError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                         ", got " + shape_str(shape));
  }
}

template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  T acc = T(0);
#pragma omp simd reduction(+ : acc)
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

// y += alpha * x
template <typename T>
void axpy(T alpha, const T* x, T* y, std::size_t n) {
#pragma omp simd
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

struct ConvGeometry {
  std::size_t batch, channels, height, width;
  std::size_t filters, kh, kw, stride;
  std::size_t out_h, out_w;
  std::size_t patch() const { return channels * kh * kw; }
  std::size_t positions() const { return out_h * out_w; }
};

// col[k][ld * ...] with k = (c, ky, kx) kernel-row-major; the image's
// positions (oy, ox) land in columns [0, positions) of each row.
template <typename T>
void im2col(const T* image, const ConvGeometry& g, T* col, std::size_t ld) {
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        T* row = col + ((c * g.kh + ky) * g.kw + kx) * ld;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const T* src = image + (c * g.height + oy * g.stride + ky) * g.width + kx;
          T* dst = row + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) dst[ox] = src[ox * g.stride];
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* image, std::size_t ld) {
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const T* row = col + ((c * g.kh + ky) * g.kw + kx) * ld;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          T* dst = image + (c * g.height + oy * g.stride + ky) * g.width + kx;
          const T* src = row + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) dst[ox * g.stride] += src[ox];
        }
      }
    }
  }
}

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

// Conv forward tile: FB filters x QB columns held in registers. Each output
// sums its products from zero in kernel-row order and adds the bias last,
// the same sequence as the plain nested-loop definition.
template <typename T, std::size_t FB, std::size_t QB>
void conv_tile(const T* k, const T* col, std::size_t patch, std::size_t ld, std::size_t q0, std::size_t f0,
               std::size_t qn, T (&acc)[FB][QB]) {
  for (std::size_t i = 0; i < FB; ++i)
    for (std::size_t j = 0; j < QB; ++j) acc[i][j] = T(0);
  for (std::size_t kk = 0; kk < patch; ++kk) {
    const T* c = col + kk * ld + q0;
    T w[FB];
    for (std::size_t i = 0; i < FB; ++i) w[i] = k[(f0 + i) * patch + kk];
    if (qn == QB) {
      for (std::size_t i = 0; i < FB; ++i) {
#pragma omp simd
        for (std::size_t j = 0; j < QB; ++j) acc[i][j] += w[i] * c[j];
      }
    } else {
      for (std::size_t i = 0; i < FB; ++i)
        for (std::size_t j = 0; j < qn; ++j) acc[i][j] += w[i] * c[j];
    }
  }
}

}  // namespace detail

/// Valid (unpadded) 2-D cross-correlation plus per-filter bias.
///
/// input [N,C,H,W], kernels [F,C,kh,kw], bias [F] -> [N,F,H',W'] with
/// H' = (H-kh)/stride + 1. Each output is accumulated from zero over the
/// kernel in (c, ky, kx) order and the bias is added last, so the result is
/// bit-identical to the textbook seven-loop form.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernels, const Tensor<T>& bias, int stride) {
  if (stride <= 0) throw ArgumentError("conv2d: stride must be positive, got " + std::to_string(stride));
  detail::require_rank(input.shape(), 4, "conv2d", "input");
  detail::require_rank(kernels.shape(), 4, "conv2d", "kernels");
  detail::require_rank(bias.shape(), 1, "conv2d", "bias");
  detail::ConvGeometry g{};
  g.batch = input.dim(0);
  g.channels = input.dim(1);
  g.height = input.dim(2);
  g.width = input.dim(3);
  g.filters = kernels.dim(0);
  g.kh = kernels.dim(2);
  g.kw = kernels.dim(3);
  g.stride = static_cast<std::size_t>(stride);
  if (kernels.dim(1) != g.channels) {
    throw DimensionError("conv2d: input " + shape_str(input.shape()) + " incompatible with kernels " +
                         shape_str(kernels.shape()));
  }
  if (bias.dim(0) != g.filters) {
    throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " does not match " +
                         std::to_string(g.filters) + " filters");
  }
  if (g.height < g.kh || g.width < g.kw) {
    throw DimensionError("conv2d: input " + shape_str(input.shape()) + " smaller than kernel " +
                         shape_str(kernels.shape()));
  }
  g.out_h = (g.height - g.kh) / g.stride + 1;
  g.out_w = (g.width - g.kw) / g.stride + 1;

  const std::size_t patch = g.patch();
  const std::size_t positions = g.positions();
  const std::size_t image_size = g.channels * g.height * g.width;
  const std::size_t out_image = g.filters * positions;
  // All frames share one column matrix [patch, batch * positions].
  const std::size_t ld = g.batch * positions;
  std::vector<T> col(patch * ld);
  const T* x = input.data().data();
  for (std::size_t n = 0; n < g.batch; ++n) detail::im2col(x + n * image_size, g, col.data() + n * positions, ld);

  std::vector<T> out(g.batch * out_image);
  const T* k = kernels.data().data();
  const T* b = bias.data().data();
  constexpr std::size_t FB = 4, QB = 16;
  auto store = [&](std::size_t f, std::size_t q0, std::size_t qn, const T* acc) {
    for (std::size_t j = 0; j < qn; ++j) {
      const std::size_t q = q0 + j, n = q / positions, p = q % positions;
      out[n * out_image + f * positions + p] = acc[j] + b[f];
    }
  };
  for (std::size_t q0 = 0; q0 < ld; q0 += QB) {
    const std::size_t qn = std::min(QB, ld - q0);
    std::size_t f = 0;
    for (; f + FB <= g.filters; f += FB) {
      T acc[FB][QB];
      detail::conv_tile<T, FB, QB>(k, col.data(), patch, ld, q0, f, qn, acc);
      for (std::size_t i = 0; i < FB; ++i) store(f + i, q0, qn, acc[i]);
    }
    for (; f < g.filters; ++f) {
      T acc[1][QB];
      detail::conv_tile<T, 1, QB>(k, col.data(), patch, ld, q0, f, qn, acc);
      store(f, q0, qn, acc[0]);
    }
  }

  Shape out_shape{g.batch, g.filters, g.out_h, g.out_w};
  // The kernel gradient reuses the forward column matrix.
  auto saved_col = kernels.requires_grad() && grad_mode_enabled() ? std::make_shared<std::vector<T>>(std::move(col)) : nullptr;
  return Tensor<T>::make_result(
      std::move(out_shape), std::move(out), {input, kernels, bias},
      [input, kernels, bias, g, saved_col](const std::vector<T>& grad) {
        const std::size_t patch = g.patch();
        const std::size_t positions = g.positions();
        const std::size_t image_size = g.channels * g.height * g.width;
        const std::size_t out_image = g.filters * positions;
        const std::size_t ld = g.batch * positions;
        T* dx = input.grad_target();
        T* dk = kernels.grad_target();
        T* db = bias.grad_target();
        // Output gradient regrouped as [filters, batch * positions].
        std::vector<T> gy(g.filters * ld);
        for (std::size_t n = 0; n < g.batch; ++n)
          for (std::size_t f = 0; f < g.filters; ++f)
            std::copy_n(grad.data() + n * out_image + f * positions, positions, gy.data() + f * ld + n * positions);
        const detail::ConstMatrixMap<T> gy_m(gy.data(), g.filters, ld);
        if (db) {
          for (std::size_t f = 0; f < g.filters; ++f) db[f] += gy_m.row(f).sum();
        }
        if (dk) {
          std::vector<T> local;
          const T* col = saved_col ? saved_col->data() : nullptr;
          if (!col) {
            local.resize(patch * ld);
            const T* x = input.data().data();
            for (std::size_t n = 0; n < g.batch; ++n) detail::im2col(x + n * image_size, g, local.data() + n * positions, ld);
            col = local.data();
          }
          detail::MatrixMap<T>(dk, g.filters, patch).noalias() += gy_m * detail::ConstMatrixMap<T>(col, patch, ld).transpose();
        }
        if (dx) {
          std::vector<T> dcol(patch * ld);
          detail::MatrixMap<T> dcol_m(dcol.data(), patch, ld);
          dcol_m.noalias() = detail::ConstMatrixMap<T>(kernels.data().data(), g.filters, patch).transpose() * gy_m;
          for (std::size_t n = 0; n < g.batch; ++n) detail::col2im_add(dcol.data() + n * positions, g, dx + n * image_size, ld);
        }
      });
}

namespace detail {

// When set, relu appends the sign of every input it sees (used by
// gradient_check to spot finite-difference steps that cross a kink).
inline thread_local std::vector<bool>* relu_sign_trace = nullptr;

}  // namespace detail

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.data().begin(), x.data().end());
  if (auto* trace = detail::relu_sign_trace)
    for (const auto& v : out) trace->push_back(v > T(0));
  for (auto& v : out) v = v > T(0) ? v : T(0);
  return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [x](const std::vector<T>& grad) {
    T* dx = x.grad_target();
    const auto v = x.data();
    for (std::size_t i = 0; i < grad.size(); ++i)
      if (v[i] > T(0)) dx[i] += grad[i];
  });
}

// Same values under a new shape with the same element count.
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return Tensor<T>::make_result(std::move(shape), std::move(out), {x}, [x](const std::vector<T>& grad) {
    T* dx = x.grad_target();
    for (std::size_t i = 0; i < grad.size(); ++i) dx[i] += grad[i];
  });
}

/// Affine map over rows: x [M,I], weight [O,I], bias [O] -> [M,O].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  detail::require_rank(x.shape(), 2, "linear", "input");
  detail::require_rank(weight.shape(), 2, "linear", "weight");
  detail::require_rank(bias.shape(), 1, "linear", "bias");
  const std::size_t rows = x.dim(0), in = x.dim(1), outs = weight.dim(0);
  if (weight.dim(1) != in || bias.dim(0) != outs) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + ", weight " + shape_str(weight.shape()) +
                         ", bias " + shape_str(bias.shape()) + " do not line up");
  }
  std::vector<T> out(rows * outs);
  {
    detail::MatrixMap<T> y(out.data(), rows, outs);
    y.noalias() = detail::ConstMatrixMap<T>(x.data().data(), rows, in) *
                  detail::ConstMatrixMap<T>(weight.data().data(), outs, in).transpose();
    y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.data().data(), outs);
  }

  return Tensor<T>::make_result({rows, outs}, std::move(out), {x, weight, bias},
                                [x, weight, bias, rows, in, outs](const std::vector<T>& grad) {
                                  const detail::ConstMatrixMap<T> g(grad.data(), rows, outs);
                                  if (T* dx = x.grad_target()) {
                                    detail::MatrixMap<T>(dx, rows, in).noalias() +=
                                        g * detail::ConstMatrixMap<T>(weight.data().data(), outs, in);
                                  }
                                  if (T* dw = weight.grad_target()) {
                                    detail::MatrixMap<T>(dw, outs, in).noalias() +=
                                        g.transpose() * detail::ConstMatrixMap<T>(x.data().data(), rows, in);
                                  }
                                  if (T* db = bias.grad_target()) {
                                    for (std::size_t o = 0; o < outs; ++o) db[o] += g.col(o).sum();
                                  }
                                });
}

/// Plain matrix product a [M,D] x b [D,E] -> [M,E].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank(a.shape(), 2, "matmul", "lhs");
  detail::require_rank(b.shape(), 2, "matmul", "rhs");
  const std::size_t rows = a.dim(0), inner = a.dim(1), cols = b.dim(1);
  if (b.dim(0) != inner) {
    throw DimensionError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<T> out(rows * cols);
  detail::MatrixMap<T>(out.data(), rows, cols).noalias() =
      detail::ConstMatrixMap<T>(a.data().data(), rows, inner) * detail::ConstMatrixMap<T>(b.data().data(), inner, cols);

  return Tensor<T>::make_result({rows, cols}, std::move(out), {a, b}, [a, b, rows, inner, cols](const std::vector<T>& grad) {
    const detail::ConstMatrixMap<T> g(grad.data(), rows, cols);
    if (T* da = a.grad_target()) {
      detail::MatrixMap<T>(da, rows, inner).noalias() += g * detail::ConstMatrixMap<T>(b.data().data(), inner, cols).transpose();
    }
    if (T* db = b.grad_target()) {
      detail::MatrixMap<T>(db, inner, cols).noalias() += detail::ConstMatrixMap<T>(a.data().data(), rows, inner).transpose() * g;
    }
  });
}

// Swap the two leading axes: [A,B,C] -> [B,A,C].
template <typename T>
Tensor<T> transpose01(const Tensor<T>& x) {
  detail::require_rank(x.shape(), 3, "transpose01", "input");
  const std::size_t a = x.dim(0), b = x.dim(1), c = x.dim(2);
  std::vector<T> out(x.numel());
  const T* xd = x.data().data();
  for (std::size_t i = 0; i < a; ++i)
    for (std::size_t j = 0; j < b; ++j) std::copy_n(xd + (i * b + j) * c, c, out.data() + (j * a + i) * c);
  return Tensor<T>::make_result({b, a, c}, std::move(out), {x}, [x, a, b, c](const std::vector<T>& grad) {
    T* dx = x.grad_target();
    for (std::size_t i = 0; i < a; ++i)
      for (std::size_t j = 0; j < b; ++j) {
        const T* src = grad.data() + (j * a + i) * c;
        T* dst = dx + (i * b + j) * c;
        for (std::size_t k = 0; k < c; ++k) dst[k] += src[k];
      }
  });
}

/// Per-group inner products: x [G,M,D], y [G,M2,D] -> [G,M,M2] with
/// out[g,i,j] = <x[g,i,:], y[g,j,:]>.
template <typename T>
Tensor<T> batched_inner(const Tensor<T>& x, const Tensor<T>& y) {
  detail::require_rank(x.shape(), 3, "batched_inner", "lhs");
  detail::require_rank(y.shape(), 3, "batched_inner", "rhs");
  const std::size_t groups = x.dim(0), m = x.dim(1), m2 = y.dim(1), d = x.dim(2);
  if (y.dim(0) != groups || y.dim(2) != d) {
    throw DimensionError("batched_inner: " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  }
  std::vector<T> out(groups * m * m2);
  const T* xd = x.data().data();
  const T* yd = y.data().data();
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m2; ++j)
        out[(g * m + i) * m2 + j] = detail::dot(xd + (g * m + i) * d, yd + (g * m2 + j) * d, d);

  return Tensor<T>::make_result({groups, m, m2}, std::move(out), {x, y}, [x, y, groups, m, m2, d](const std::vector<T>& grad) {
    T* dx = x.grad_target();
    T* dy = y.grad_target();
    const T* xd = x.data().data();
    const T* yd = y.data().data();
    for (std::size_t g = 0; g < groups; ++g)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < m2; ++j) {
          const T gv = grad[(g * m + i) * m2 + j];
          if (dx) detail::axpy(gv, yd + (g * m2 + j) * d, dx + (g * m + i) * d, d);
          if (dy) detail::axpy(gv, xd + (g * m + i) * d, dy + (g * m2 + j) * d, d);
        }
  });
}

/// Independent affine map per group: x [N,G,I], weight [G,O,I], bias [G,O] -> [N,G,O].
template <typename T>
Tensor<T> grouped_linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  detail::require_rank(x.shape(), 3, "grouped_linear", "input");
  detail::require_rank(weight.shape(), 3, "grouped_linear", "weight");
  detail::require_rank(bias.shape(), 2, "grouped_linear", "bias");
  const std::size_t n = x.dim(0), groups = x.dim(1), in = x.dim(2), outs = weight.dim(1);
  if (weight.dim(0) != groups || weight.dim(2) != in || bias.dim(0) != groups || bias.dim(1) != outs) {
    throw DimensionError("grouped_linear: input " + shape_str(x.shape()) + ", weight " + shape_str(weight.shape()) +
                         ", bias " + shape_str(bias.shape()) + " do not line up");
  }
  std::vector<T> out(n * groups * outs);
  const T* xd = x.data().data();
  const T* wd = weight.data().data();
  const T* bd = bias.data().data();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t g = 0; g < groups; ++g)
      for (std::size_t o = 0; o < outs; ++o)
        out[(r * groups + g) * outs + o] =
            detail::dot(xd + (r * groups + g) * in, wd + (g * outs + o) * in, in) + bd[g * outs + o];

  return Tensor<T>::make_result(
      {n, groups, outs}, std::move(out), {x, weight, bias}, [x, weight, bias, n, groups, in, outs](const std::vector<T>& grad) {
        T* dx = x.grad_target();
        T* dw = weight.grad_target();
        T* db = bias.grad_target();
        const T* xd = x.data().data();
        const T* wd = weight.data().data();
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t g = 0; g < groups; ++g)
            for (std::size_t o = 0; o < outs; ++o) {
              const T gv = grad[(r * groups + g) * outs + o];
              if (dx) detail::axpy(gv, wd + (g * outs + o) * in, dx + (r * groups + g) * in, in);
              if (dw) detail::axpy(gv, xd + (r * groups + g) * in, dw + (g * outs + o) * in, in);
              if (db) db[g * outs + o] += gv;
            }
      });
}

/// Scalar bilinear form aᵀ W b.
template <typename T>
Tensor<T> bilinear(const Tensor<T>& a, const Tensor<T>& w, const Tensor<T>& b) {
  detail::require_rank(a.shape(), 1, "bilinear", "lhs vector");
  detail::require_rank(b.shape(), 1, "bilinear", "rhs vector");
  detail::require_rank(w.shape(), 2, "bilinear", "matrix");
  const std::size_t d = a.dim(0);
  if (b.dim(0) != d || w.dim(0) != d || w.dim(1) != d) {
    throw DimensionError("bilinear: " + shape_str(a.shape()) + ", " + shape_str(w.shape()) + ", " + shape_str(b.shape()));
  }
  const T* ad = a.data().data();
  const T* wd = w.data().data();
  const T* bd = b.data().data();
  T total = T(0);
  for (std::size_t i = 0; i < d; ++i) total += ad[i] * detail::dot(wd + i * d, bd, d);

  return Tensor<T>::make_result({1}, {total}, {a, w, b}, [a, w, b, d](const std::vector<T>& grad) {
    const T g = grad[0];
    T* da = a.grad_target();
    T* dw = w.grad_target();
    T* db = b.grad_target();
    const T* ad = a.data().data();
    const T* wd = w.data().data();
    const T* bd = b.data().data();
    for (std::size_t i = 0; i < d; ++i) {
      if (da) da[i] += g * detail::dot(wd + i * d, bd, d);
      if (dw) detail::axpy(g * ad[i], bd, dw + i * d, d);
      if (db) detail::axpy(g * ad[i], wd + i * d, db, d);
    }
  });
}

/// Mean over rows of the softmax cross-entropy -log softmax(scores[r])[target[r]].
/// scores [R,C]; log-sum-exp is taken after subtracting the row maximum.
template <typename T>
Tensor<T> cross_entropy_rows(const Tensor<T>& scores, std::span<const std::size_t> targets) {
  detail::require_rank(scores.shape(), 2, "cross_entropy_rows", "scores");
  const std::size_t rows = scores.dim(0), cols = scores.dim(1);
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy_rows: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(rows) + " rows");
  }
  std::vector<std::size_t> target_copy(targets.begin(), targets.end());
  for (auto t : target_copy) {
    if (t >= cols) {
      throw ArgumentError("cross_entropy_rows: target " + std::to_string(t) + " out of range for " +
                          std::to_string(cols) + " classes");
    }
  }
  const T* s = scores.data().data();
  T total = T(0);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = s + r * cols;
    const T peak = *std::max_element(row, row + cols);
    T sum = T(0);
    for (std::size_t c = 0; c < cols; ++c) sum += std::exp(row[c] - peak);
    total += (peak + std::log(sum)) - row[target_copy[r]];
  }
  total /= static_cast<T>(rows);

  return Tensor<T>::make_result({1}, {total}, {scores},
                                [scores, targets = std::move(target_copy), rows, cols](const std::vector<T>& grad) {
                                  T* ds = scores.grad_target();
                                  const T* s = scores.data().data();
                                  const T scale = grad[0] / static_cast<T>(rows);
                                  std::vector<T> prob(cols);
                                  for (std::size_t r = 0; r < rows; ++r) {
                                    const T* row = s + r * cols;
                                    const T peak = *std::max_element(row, row + cols);
                                    T sum = T(0);
                                    for (std::size_t c = 0; c < cols; ++c) sum += (prob[c] = std::exp(row[c] - peak));
                                    for (std::size_t c = 0; c < cols; ++c) ds[r * cols + c] += scale * prob[c] / sum;
                                    ds[r * cols + targets[r]] -= scale;
                                  }
                                });
}

/// InfoNCE term for one classification instance:
/// -log(exp(scores[target]) / sum_i exp(scores[i])).
template <typename T>
Tensor<T> nce_loss(const Tensor<T>& scores, std::size_t target_index) {
  detail::require_rank(scores.shape(), 1, "nce_loss", "scores");
  if (target_index >= scores.dim(0)) {
    throw ArgumentError("nce_loss: target " + std::to_string(target_index) + " out of range for " +
                        std::to_string(scores.dim(0)) + " scores");
  }
  const std::size_t target[1] = {target_index};
  return cross_entropy_rows(reshape(scores, {1, scores.dim(0)}), std::span<const std::size_t>(target));
}

// Mean squared error against constant targets.
template <typename T>
Tensor<T> mse(const Tensor<T>& prediction, std::span<const T> targets) {
  if (targets.size() != prediction.numel()) {
    throw DimensionError("mse: " + std::to_string(targets.size()) + " targets for prediction " +
                         shape_str(prediction.shape()));
  }
  std::vector<T> diff(prediction.numel());
  T total = T(0);
  for (std::size_t i = 0; i < diff.size(); ++i) {
    diff[i] = prediction.data()[i] - targets[i];
    total += diff[i] * diff[i];
  }
  const T count = static_cast<T>(diff.size());
  return Tensor<T>::make_result({1}, {total / count}, {prediction},
                                [prediction, diff = std::move(diff), count](const std::vector<T>& grad) {
                                  T* dp = prediction.grad_target();
                                  const T scale = T(2) * grad[0] / count;
                                  for (std::size_t i = 0; i < diff.size(); ++i) dp[i] += scale * diff[i];
                                });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw DimensionError("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [a, b](const std::vector<T>& grad) {
    if (T* da = a.grad_target())
      for (std::size_t i = 0; i < grad.size(); ++i) da[i] += grad[i];
    if (T* db = b.grad_target())
      for (std::size_t i = 0; i < grad.size(); ++i) db[i] += grad[i];
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  return Tensor<T>::make_result(a.shape(), std::move(out), {a}, [a, factor](const std::vector<T>& grad) {
    T* da = a.grad_target();
    for (std::size_t i = 0; i < grad.size(); ++i) da[i] += grad[i] * factor;
  });
}

// Elementwise product.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw DimensionError("mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [a, b](const std::vector<T>& grad) {
    if (T* da = a.grad_target())
      for (std::size_t i = 0; i < grad.size(); ++i) da[i] += grad[i] * b.data()[i];
    if (T* db = b.grad_target())
      for (std::size_t i = 0; i < grad.size(); ++i) db[i] += grad[i] * a.data()[i];
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = T(0);
  for (auto v : a.data()) total += v;
  return Tensor<T>::make_result({1}, {total}, {a}, [a](const std::vector<T>& grad) {
    T* da = a.grad_target();
    for (std::size_t i = 0; i < a.numel(); ++i) da[i] += grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

}  // namespace scn
