#pragma once

// Differentiable operations. No broadcasting: every op states its shapes and
// raises ShapeError when they disagree. Reductions accumulate in double.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "sgp/tensor.hpp"

namespace sgp {

using acc_t = double;

namespace detail {

template <typename T>
using ImplPtr = std::shared_ptr<TensorImpl<T>>;

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t r, const char* op) {
  require(t.rank() == r, std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                             shape_str(t.dims()));
}

template <typename T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(a.dims() == b.dims(),
          std::string(op) + ": shape mismatch " + shape_str(a.dims()) + " vs " + shape_str(b.dims()));
}

// C (+)= A[m x k] * B[k x n], double accumulation per output element.
// Rows of A are processed four at a time so each row of B is loaded once per block.
template <typename T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  constexpr std::size_t R = 4;
  std::vector<acc_t> rows(R * n);
  for (std::size_t i0 = 0; i0 < m; i0 += R) {
    const std::size_t nr = std::min(R, m - i0);
    std::fill(rows.begin(), rows.end(), acc_t(0));
    for (std::size_t t = 0; t < k; ++t) {
      const T* bt = b + t * n;
      if (nr == R) {
        const acc_t a0 = a[(i0 + 0) * k + t], a1 = a[(i0 + 1) * k + t];
        const acc_t a2 = a[(i0 + 2) * k + t], a3 = a[(i0 + 3) * k + t];
        acc_t* r0 = rows.data();
        acc_t* r1 = r0 + n;
        acc_t* r2 = r1 + n;
        acc_t* r3 = r2 + n;
        for (std::size_t j = 0; j < n; ++j) {
          const acc_t bv = bt[j];
          r0[j] += a0 * bv;
          r1[j] += a1 * bv;
          r2[j] += a2 * bv;
          r3[j] += a3 * bv;
        }
      } else {
        for (std::size_t r = 0; r < nr; ++r) {
          const acc_t av = a[(i0 + r) * k + t];
          acc_t* rr = rows.data() + r * n;
          for (std::size_t j = 0; j < n; ++j) rr[j] += av * acc_t(bt[j]);
        }
      }
    }
    for (std::size_t r = 0; r < nr; ++r) {
      T* ci = c + (i0 + r) * n;
      const acc_t* rr = rows.data() + r * n;
      if (accumulate) {
        for (std::size_t j = 0; j < n; ++j) ci[j] += T(rr[j]);
      } else {
        for (std::size_t j = 0; j < n; ++j) ci[j] = T(rr[j]);
      }
    }
  }
}

template <typename T>
std::vector<T> transposed(const T* x, std::size_t rows, std::size_t cols) {
  std::vector<T> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = x[i * cols + j];
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
                  "matmul: cannot multiply " + shape_str(a.dims()) + " by " + shape_str(b.dims()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n);
  detail::gemm(a.data().data(), b.data().data(), out.data(), m, k, n, false);
  auto ai = a.impl();
  auto bi = b.impl();
  return Tensor<T>::make_result({m, n}, std::move(out), "matmul", {ai, bi}, [ai, bi, m, k, n](const TensorImpl<T>& self) {
    if (ai->requires_grad) {
      auto bt = detail::transposed(bi->data.data(), k, n);
      detail::gemm(self.grad.data(), bt.data(), ai->grad_buffer().data(), m, n, k, true);
    }
    if (bi->requires_grad) {
      auto at = detail::transposed(ai->data.data(), m, k);
      detail::gemm(at.data(), self.grad.data(), bi->grad_buffer().data(), k, m, n, true);
    }
  });
}

// a[m x k] * b[n x k]^T
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1),
                  "matmul_nt: cannot multiply " + shape_str(a.dims()) + " by transpose of " +
                      shape_str(b.dims()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  std::vector<T> out(m * n);
  {
    auto bt = detail::transposed(b.data().data(), n, k);
    detail::gemm(a.data().data(), bt.data(), out.data(), m, k, n, false);
  }
  auto ai = a.impl();
  auto bi = b.impl();
  return Tensor<T>::make_result({m, n}, std::move(out), "matmul_nt", {ai, bi}, [ai, bi, m, k, n](const TensorImpl<T>& self) {
    if (ai->requires_grad) {
      detail::gemm(self.grad.data(), bi->data.data(), ai->grad_buffer().data(), m, n, k, true);
    }
    if (bi->requires_grad) {
      auto gt = detail::transposed(self.grad.data(), m, n);
      detail::gemm(gt.data(), ai->data.data(), bi->grad_buffer().data(), n, m, k, true);
    }
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  detail::require_rank(x, 2, "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  auto xi = x.impl();
  return Tensor<T>::make_result({c, r}, detail::transposed(x.data().data(), r, c), "transpose", {xi},
                                [xi, r, c](const TensorImpl<T>& self) {
                                  auto& g = xi->grad_buffer();
                                  for (std::size_t i = 0; i < r; ++i)
                                    for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
                                });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  auto ai = a.impl();
  auto bi = b.impl();
  return Tensor<T>::make_result(a.dims(), std::move(out), "add", {ai, bi}, [ai, bi](const TensorImpl<T>& self) {
    for (auto* in : {ai.get(), bi.get()}) {
      if (!in->requires_grad) continue;
      auto& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  auto ai = a.impl();
  auto bi = b.impl();
  return Tensor<T>::make_result(a.dims(), std::move(out), "mul", {ai, bi}, [ai, bi](const TensorImpl<T>& self) {
    if (ai->requires_grad) {
      auto& g = ai->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bi->data[i];
    }
    if (bi->requires_grad) {
      auto& g = bi->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * ai->data[i];
    }
  });
}

// scalar * tensor
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * s;
  auto xi = x.impl();
  return Tensor<T>::make_result(x.dims(), std::move(out), "scale", {xi}, [xi, s](const TensorImpl<T>& self) {
    auto& g = xi->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
  });
}

// x[n x d] + b[d] on every row.
template <typename T>
Tensor<T> add_bias_rows(const Tensor<T>& x, const Tensor<T>& b) {
  detail::require(x.rank() == 2 && b.rank() == 1 && b.dim(0) == x.dim(1),
                  "add_bias_rows: bias " + shape_str(b.dims()) + " does not fit " + shape_str(x.dims()));
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = x[i * d + j] + b[j];
  auto xi = x.impl();
  auto bi = b.impl();
  return Tensor<T>::make_result(x.dims(), std::move(out), "add_bias_rows", {xi, bi}, [xi, bi, n, d](const TensorImpl<T>& self) {
    if (xi->requires_grad) {
      auto& g = xi->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (bi->requires_grad) {
      std::vector<acc_t> acc(d, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) acc[j] += self.grad[i * d + j];
      auto& g = bi->grad_buffer();
      for (std::size_t j = 0; j < d; ++j) g[j] += T(acc[j]);
    }
  });
}

// Row i of x[n x d] multiplied by gate[i]; gate has n elements (any shape).
template <typename T>
Tensor<T> scale_rows(const Tensor<T>& x, const Tensor<T>& gate) {
  detail::require(x.rank() == 2 && gate.numel() == x.dim(0),
                  "scale_rows: gate " + shape_str(gate.dims()) + " does not fit rows of " + shape_str(x.dims()));
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = gate[i] * x[i * d + j];
  auto xi = x.impl();
  auto gi = gate.impl();
  return Tensor<T>::make_result(x.dims(), std::move(out), "scale_rows", {xi, gi}, [xi, gi, n, d](const TensorImpl<T>& self) {
    if (xi->requires_grad) {
      auto& g = xi->grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) g[i * d + j] += self.grad[i * d + j] * gi->data[i];
    }
    if (gi->requires_grad) {
      auto& g = gi->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        acc_t acc = 0;
        for (std::size_t j = 0; j < d; ++j) acc += acc_t(self.grad[i * d + j]) * xi->data[i * d + j];
        g[i] += T(acc);
      }
    }
  });
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  detail::require_rank(x, 2, "softmax_rows");
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<T> out(x.numel());
  std::vector<acc_t> e(d);
  for (std::size_t i = 0; i < n; ++i) {
    const T* xr = x.data().data() + i * d;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < d; ++j) {
      if (std::isnan(xr[j])) throw NumericError("softmax_rows: NaN in row " + std::to_string(i));
      mx = std::max(mx, xr[j]);
    }
    acc_t sum = 0;
    for (std::size_t j = 0; j < d; ++j) {
      e[j] = std::exp(acc_t(xr[j]) - acc_t(mx));
      sum += e[j];
    }
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = T(e[j] / sum);
  }
  auto xi = x.impl();
  return Tensor<T>::make_result(x.dims(), std::move(out), "softmax_rows", {xi}, [xi, n, d](const TensorImpl<T>& self) {
    auto& g = xi->grad_buffer();
    for (std::size_t i = 0; i < n; ++i) {
      const T* y = self.data.data() + i * d;
      const T* gy = self.grad.data() + i * d;
      acc_t dot = 0;
      for (std::size_t j = 0; j < d; ++j) dot += acc_t(gy[j]) * y[j];
      for (std::size_t j = 0; j < d; ++j) g[i * d + j] += T(acc_t(y[j]) * (acc_t(gy[j]) - dot));
    }
  });
}

// Per-row normalization with learned gain and bias, both of length d.
template <typename T>
Tensor<T> layer_norm_rows(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, double eps = 1e-5) {
  detail::require(x.rank() == 2 && gain.numel() == x.dim(1) && bias.numel() == x.dim(1),
                  "layer_norm_rows: gain/bias do not fit " + shape_str(x.dims()));
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<T> out(x.numel());
  std::vector<acc_t> xhat(x.numel()), inv_std(n);
  for (std::size_t i = 0; i < n; ++i) {
    acc_t mean = 0, var = 0;
    for (std::size_t j = 0; j < d; ++j) mean += x[i * d + j];
    mean /= acc_t(d);
    for (std::size_t j = 0; j < d; ++j) {
      acc_t c = acc_t(x[i * d + j]) - mean;
      var += c * c;
    }
    var /= acc_t(d);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (acc_t(x[i * d + j]) - mean) * inv_std[i];
      out[i * d + j] = T(xhat[i * d + j] * acc_t(gain[j]) + acc_t(bias[j]));
    }
  }
  auto xi = x.impl();
  auto gi = gain.impl();
  auto bi = bias.impl();
  return Tensor<T>::make_result(
      x.dims(), std::move(out), "layer_norm_rows", {xi, gi, bi},
      [xi, gi, bi, n, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](const TensorImpl<T>& self) {
        const auto& gy = self.grad;
        if (gi->requires_grad || bi->requires_grad) {
          std::vector<acc_t> gg(d, 0.0), gb(d, 0.0);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) {
              gg[j] += acc_t(gy[i * d + j]) * xhat[i * d + j];
              gb[j] += gy[i * d + j];
            }
          if (gi->requires_grad) {
            auto& g = gi->grad_buffer();
            for (std::size_t j = 0; j < d; ++j) g[j] += T(gg[j]);
          }
          if (bi->requires_grad) {
            auto& g = bi->grad_buffer();
            for (std::size_t j = 0; j < d; ++j) g[j] += T(gb[j]);
          }
        }
        if (xi->requires_grad) {
          auto& g = xi->grad_buffer();
          for (std::size_t i = 0; i < n; ++i) {
            acc_t s1 = 0, s2 = 0;
            for (std::size_t j = 0; j < d; ++j) {
              acc_t gh = acc_t(gy[i * d + j]) * gi->data[j];
              s1 += gh;
              s2 += gh * xhat[i * d + j];
            }
            for (std::size_t j = 0; j < d; ++j) {
              acc_t gh = acc_t(gy[i * d + j]) * gi->data[j];
              g[i * d + j] += T(inv_std[i] * (gh - s1 / acc_t(d) - xhat[i * d + j] * s2 / acc_t(d)));
            }
          }
        }
      });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr acc_t inv_sqrt2 = 0.70710678118654752440;
  constexpr acc_t inv_sqrt2pi = 0.39894228040143267794;
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    acc_t v = x[i];
    out[i] = T(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
  }
  auto xi = x.impl();
  return Tensor<T>::make_result(x.dims(), std::move(out), "gelu", {xi}, [xi](const TensorImpl<T>& self) {
    auto& g = xi->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      acc_t v = xi->data[i];
      acc_t cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
      acc_t pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
      g[i] += T(acc_t(self.grad[i]) * (cdf + v * pdf));
    }
  });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  // Kept strictly inside (0, 1) even where the logistic rounds to 0 or 1.
  const T lo = std::numeric_limits<T>::min(), hi = T(1) - std::numeric_limits<T>::epsilon() / 2;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(T(1.0 / (1.0 + std::exp(-acc_t(x[i])))), lo, hi);
  auto xi = x.impl();
  return Tensor<T>::make_result(x.dims(), std::move(out), "sigmoid", {xi}, [xi](const TensorImpl<T>& self) {
    auto& g = xi->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      acc_t y = self.data[i];
      g[i] += T(acc_t(self.grad[i]) * y * (1.0 - y));
    }
  });
}

// x[C x H x W], kernels[C' x C x k x k], optional bias[C'] (numel 0 = none).
// Zero padding k/2 on each side for every stride.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernels, const Tensor<T>& bias, int stride) {
  if (stride < 1) throw ContractError("conv2d: stride must be >= 1, got " + std::to_string(stride));
  detail::require(x.rank() == 3 && kernels.rank() == 4 && kernels.dim(1) == x.dim(0) &&
                      kernels.dim(2) == kernels.dim(3),
                  "conv2d: kernels " + shape_str(kernels.dims()) + " incompatible with input " +
                      shape_str(x.dims()));
  const std::size_t k = kernels.dim(2);
  if (k % 2 == 0) throw ContractError("conv2d: kernel size must be odd, got " + std::to_string(k));
  const std::size_t cin = x.dim(0), H = x.dim(1), W = x.dim(2), cout = kernels.dim(0);
  detail::require(H >= k && W >= k, "conv2d: input " + shape_str(x.dims()) + " smaller than kernel");
  detail::require(bias.numel() == 0 || bias.numel() == cout,
                  "conv2d: bias " + shape_str(bias.dims()) + " does not match " + std::to_string(cout) + " outputs");
  const long pad = long(k / 2), s = stride;
  const std::size_t Ho = (H - k + 2 * pad) / s + 1, Wo = (W - k + 2 * pad) / s + 1;

  // Valid output range for tap offset `o` (= kernel index - pad) along an axis of length len.
  auto range = [s](long o, std::size_t len, std::size_t olen) {
    long lo = o >= 0 ? 0 : (-o + s - 1) / s;
    long hi_in = long(len) - 1 - o;  // need o + out*s <= len-1
    long hi = hi_in < 0 ? -1 : hi_in / s;
    hi = std::min(hi, long(olen) - 1);
    return std::pair<long, long>{lo, hi};
  };

  std::vector<T> out(cout * Ho * Wo);
  std::vector<acc_t> acc(Ho * Wo);
  const T* xd = x.data().data();
  const T* wd = kernels.data().data();
  for (std::size_t co = 0; co < cout; ++co) {
    std::fill(acc.begin(), acc.end(), bias.numel() ? acc_t(bias[co]) : acc_t(0));
    for (std::size_t ci = 0; ci < cin; ++ci) {
      for (std::size_t kh = 0; kh < k; ++kh) {
        const long oh_off = long(kh) - pad;
        auto [ohl, ohh] = range(oh_off, H, Ho);
        for (std::size_t kw = 0; kw < k; ++kw) {
          const acc_t wv = wd[((co * cin + ci) * k + kh) * k + kw];
          if (wv == acc_t(0)) continue;
          const long ow_off = long(kw) - pad;
          auto [owl, owh] = range(ow_off, W, Wo);
          for (long oh = ohl; oh <= ohh; ++oh) {
            const T* xr = xd + (ci * H + std::size_t(oh * s + oh_off)) * W;
            acc_t* ar = acc.data() + std::size_t(oh) * Wo;
            for (long ow = owl; ow <= owh; ++ow) ar[ow] += wv * acc_t(xr[ow * s + ow_off]);
          }
        }
      }
    }
    for (std::size_t i = 0; i < Ho * Wo; ++i) out[co * Ho * Wo + i] = T(acc[i]);
  }

  auto xi = x.impl();
  auto ki = kernels.impl();
  auto bi = bias.impl();
  return Tensor<T>::make_result(
      {cout, Ho, Wo}, std::move(out), "conv2d", {xi, ki, bi},
      [xi, ki, bi, cin, cout, H, W, Ho, Wo, k, pad, s, range](const TensorImpl<T>& self) {
        const T* gy = self.grad.data();
        if (bi->requires_grad && !bi->data.empty()) {
          auto& gb = bi->grad_buffer();
          for (std::size_t co = 0; co < cout; ++co) {
            acc_t a = 0;
            for (std::size_t i = 0; i < Ho * Wo; ++i) a += gy[co * Ho * Wo + i];
            gb[co] += T(a);
          }
        }
        const T* xd = xi->data.data();
        const T* wd = ki->data.data();
        T* gx = xi->requires_grad ? xi->grad_buffer().data() : nullptr;
        T* gw = ki->requires_grad ? ki->grad_buffer().data() : nullptr;
        for (std::size_t co = 0; co < cout; ++co) {
          const T* gco = gy + co * Ho * Wo;
          for (std::size_t ci = 0; ci < cin; ++ci) {
            for (std::size_t kh = 0; kh < k; ++kh) {
              const long oh_off = long(kh) - pad;
              auto [ohl, ohh] = range(oh_off, H, Ho);
              for (std::size_t kw = 0; kw < k; ++kw) {
                const std::size_t widx = ((co * cin + ci) * k + kh) * k + kw;
                const long ow_off = long(kw) - pad;
                auto [owl, owh] = range(ow_off, W, Wo);
                acc_t wacc = 0;
                const T wv = wd[widx];
                for (long oh = ohl; oh <= ohh; ++oh) {
                  const std::size_t xrow = (ci * H + std::size_t(oh * s + oh_off)) * W;
                  const T* gr = gco + std::size_t(oh) * Wo;
                  if (gw) {
                    const T* xr = xd + xrow;
                    for (long ow = owl; ow <= owh; ++ow) wacc += acc_t(gr[ow]) * xr[ow * s + ow_off];
                  }
                  if (gx && wv != T(0)) {
                    T* gxr = gx + xrow;
                    for (long ow = owl; ow <= owh; ++ow) gxr[ow * s + ow_off] += gr[ow] * wv;
                  }
                }
                if (gw) gw[widx] += T(wacc);
              }
            }
          }
        }
      });
}

namespace detail {

struct LerpTap {
  std::size_t i0, i1;
  double f;  // weight of i1
};

// Half-pixel-centre sampling positions, clamped at the borders.
inline std::vector<LerpTap> lerp_taps(std::size_t src, std::size_t dst) {
  std::vector<LerpTap> taps(dst);
  const double sc = double(src) / double(dst);
  for (std::size_t o = 0; o < dst; ++o) {
    double p = (double(o) + 0.5) * sc - 0.5;
    p = std::clamp(p, 0.0, double(src - 1));
    std::size_t i0 = std::size_t(std::floor(p));
    std::size_t i1 = std::min(i0 + 1, src - 1);
    taps[o] = {i0, i1, p - double(i0)};
  }
  return taps;
}

}  // namespace detail

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, std::size_t h, std::size_t w) {
  detail::require_rank(x, 3, "resize_bilinear");
  if (h < 1 || w < 1) throw ContractError("resize_bilinear: target size must be >= 1");
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  auto xi = x.impl();
  if (h == H && w == W) {
    return Tensor<T>::make_result(x.dims(), x.vec(), "resize_bilinear", {xi}, [xi](const TensorImpl<T>& self) {
      auto& g = xi->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
  }
  auto ty = detail::lerp_taps(H, h);
  auto tx = detail::lerp_taps(W, w);
  std::vector<T> out(C * h * w);
  for (std::size_t c = 0; c < C; ++c) {
    const T* xc = x.data().data() + c * H * W;
    for (std::size_t r = 0; r < h; ++r) {
      const auto& a = ty[r];
      for (std::size_t q = 0; q < w; ++q) {
        const auto& b = tx[q];
        const acc_t v00 = xc[a.i0 * W + b.i0], v01 = xc[a.i0 * W + b.i1];
        const acc_t v10 = xc[a.i1 * W + b.i0], v11 = xc[a.i1 * W + b.i1];
        const acc_t top = v00 + b.f * (v01 - v00);
        const acc_t bot = v10 + b.f * (v11 - v10);
        out[(c * h + r) * w + q] = T(top + a.f * (bot - top));
      }
    }
  }
  return Tensor<T>::make_result({C, h, w}, std::move(out), "resize_bilinear", {xi},
                                [xi, ty, tx, C, H, W, h, w](const TensorImpl<T>& self) {
                                  auto& g = xi->grad_buffer();
                                  for (std::size_t c = 0; c < C; ++c) {
                                    T* gc = g.data() + c * H * W;
                                    for (std::size_t r = 0; r < h; ++r) {
                                      const auto& a = ty[r];
                                      for (std::size_t q = 0; q < w; ++q) {
                                        const auto& b = tx[q];
                                        const acc_t go = self.grad[(c * h + r) * w + q];
                                        gc[a.i0 * W + b.i0] += T(go * (1 - a.f) * (1 - b.f));
                                        gc[a.i0 * W + b.i1] += T(go * (1 - a.f) * b.f);
                                        gc[a.i1 * W + b.i0] += T(go * a.f * (1 - b.f));
                                        gc[a.i1 * W + b.i1] += T(go * a.f * b.f);
                                      }
                                    }
                                  }
                                });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape dims) {
  detail::require(sgp::numel(dims) == x.numel(),
                  "reshape: cannot view " + shape_str(x.dims()) + " as " + shape_str(dims));
  auto xi = x.impl();
  return Tensor<T>::make_result(std::move(dims), x.vec(), "reshape", {xi}, [xi](const TensorImpl<T>& self) {
    auto& g = xi->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

// [C x h x w] grid -> [h*w x C] tokens (row-major spatial order).
template <typename T>
Tensor<T> grid_to_tokens(const Tensor<T>& grid) {
  detail::require_rank(grid, 3, "grid_to_tokens");
  return transpose(reshape(grid, {grid.dim(0), grid.dim(1) * grid.dim(2)}));
}

template <typename T>
Tensor<T> tokens_to_grid(const Tensor<T>& tokens, std::size_t h, std::size_t w) {
  detail::require(tokens.rank() == 2 && tokens.dim(0) == h * w,
                  "tokens_to_grid: " + shape_str(tokens.dims()) + " is not a " + std::to_string(h) + "x" +
                      std::to_string(w) + " token grid");
  return reshape(transpose(tokens), {tokens.dim(1), h, w});
}

// Concatenation along the leading axis.
template <typename T>
Tensor<T> concat0(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ContractError("concat0: nothing to concatenate");
  Shape tail(parts[0].dims().begin() + 1, parts[0].dims().end());
  std::size_t lead = 0;
  std::vector<T> out;
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  for (const auto& p : parts) {
    detail::require(p.rank() == tail.size() + 1 && Shape(p.dims().begin() + 1, p.dims().end()) == tail,
                    "concat0: " + shape_str(p.dims()) + " does not match " + shape_str(parts[0].dims()));
    lead += p.dim(0);
    out.insert(out.end(), p.data().begin(), p.data().end());
    inputs.push_back(p.impl());
  }
  Shape dims{lead};
  dims.insert(dims.end(), tail.begin(), tail.end());
  auto ins = inputs;
  return Tensor<T>::make_result(std::move(dims), std::move(out), "concat0", std::move(inputs),
                                [ins](const TensorImpl<T>& self) {
                                  std::size_t off = 0;
                                  for (const auto& in : ins) {
                                    const std::size_t n = in->data.size();
                                    if (in->requires_grad) {
                                      auto& g = in->grad_buffer();
                                      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[off + i];
                                    }
                                    off += n;
                                  }
                                });
}

// Leading-axis slice [begin, end).
template <typename T>
Tensor<T> slice0(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  detail::require(x.rank() >= 1 && begin < end && end <= x.dim(0),
                  "slice0: range [" + std::to_string(begin) + "," + std::to_string(end) + ") outside " +
                      shape_str(x.dims()));
  const std::size_t stride = x.numel() / x.dim(0);
  Shape dims = x.dims();
  dims[0] = end - begin;
  std::vector<T> out(x.data().begin() + begin * stride, x.data().begin() + end * stride);
  auto xi = x.impl();
  return Tensor<T>::make_result(std::move(dims), std::move(out), "slice0", {xi},
                                [xi, off = begin * stride](const TensorImpl<T>& self) {
                                  auto& g = xi->grad_buffer();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) g[off + i] += self.grad[i];
                                });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  acc_t acc = 0;
  for (T v : x.data()) acc += v;
  auto xi = x.impl();
  return Tensor<T>::make_result({}, {T(acc)}, "sum", {xi}, [xi](const TensorImpl<T>& self) {
    auto& g = xi->grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  acc_t acc = 0;
  for (T v : x.data()) acc += v;
  const acc_t n = acc_t(x.numel());
  auto xi = x.impl();
  return Tensor<T>::make_result({}, {T(acc / n)}, "mean", {xi}, [xi, n](const TensorImpl<T>& self) {
    auto& g = xi->grad_buffer();
    const T s = T(acc_t(self.grad[0]) / n);
    for (auto& v : g) v += s;
  });
}

// Column means of x[n x d] -> [d].
template <typename T>
Tensor<T> mean_rows(const Tensor<T>& x) {
  detail::require_rank(x, 2, "mean_rows");
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<acc_t> acc(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) acc[j] += x[i * d + j];
  std::vector<T> out(d);
  for (std::size_t j = 0; j < d; ++j) out[j] = T(acc[j] / acc_t(n));
  auto xi = x.impl();
  return Tensor<T>::make_result({d}, std::move(out), "mean_rows", {xi}, [xi, n, d](const TensorImpl<T>& self) {
    auto& g = xi->grad_buffer();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) g[i * d + j] += T(acc_t(self.grad[j]) / acc_t(n));
  });
}

}  // namespace sgp
