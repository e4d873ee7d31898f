#include "hded/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <vector>

namespace hded {
namespace {

template <typename T>
using StoragePtr = std::shared_ptr<TensorStorage<T>>;

void require_rank(const Shape& s, std::size_t rank, const char* what) {
  if (s.size() != rank) {
    throw ShapeError(std::string(what) + " expects rank " + std::to_string(rank) +
                     ", got shape " + to_string(s));
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": dimension mismatch between " + to_string(a.shape()) +
                     " and " + to_string(b.shape()));
  }
}

// ---------------------------------------------------------------------------
// Convolution kernels (im2col + GEMM). "Conv geometry": x [N,Cin,H,W] -> y [N,Cout,OH,OW]
// with w [Cout,Cin,KH,KW].

struct ConvGeom {
  long n, cin, h, w, cout, kh, kw, oh, ow, stride, pad;
};

struct Range {
  long begin, end;
};

// Output positions o in [0, out) such that 0 <= o*s - p + k < in.
Range valid_range(long out, long in, long s, long p, long k) {
  long lo = p - k;
  lo = lo <= 0 ? 0 : (lo + s - 1) / s;
  const long hi_num = in - 1 + p - k;
  const long hi = hi_num < 0 ? -1 : std::min(out - 1, hi_num / s);
  return {lo, std::max(lo, hi + 1)};
}

// Unfolds one sample: col[(ci*kh + ki)*kw + kj][oh*ow + o] = x[ci][...], zero outside.
template <typename T>
void im2col(const T* x, T* col, const ConvGeom& g) {
  const long plane_out = g.oh * g.ow;
  for (long ci = 0; ci < g.cin; ++ci) {
    const T* xp = x + ci * g.h * g.w;
    for (long ki = 0; ki < g.kh; ++ki) {
      const Range rh = valid_range(g.oh, g.h, g.stride, g.pad, ki);
      for (long kj = 0; kj < g.kw; ++kj) {
        const Range rw = valid_range(g.ow, g.w, g.stride, g.pad, kj);
        T* row = col + ((ci * g.kh + ki) * g.kw + kj) * plane_out;
        std::fill(row, row + plane_out, T{0});
        for (long oh = rh.begin; oh < rh.end; ++oh) {
          const T* src = xp + (oh * g.stride - g.pad + ki) * g.w + kj - g.pad;
          T* dst = row + oh * g.ow;
          for (long ow = rw.begin; ow < rw.end; ++ow) dst[ow] = src[ow * g.stride];
        }
      }
    }
  }
}

// Adjoint of im2col: scatters col back into x (accumulating).
template <typename T>
void col2im(const T* col, T* x, const ConvGeom& g) {
  const long plane_out = g.oh * g.ow;
  for (long ci = 0; ci < g.cin; ++ci) {
    T* xp = x + ci * g.h * g.w;
    for (long ki = 0; ki < g.kh; ++ki) {
      const Range rh = valid_range(g.oh, g.h, g.stride, g.pad, ki);
      for (long kj = 0; kj < g.kw; ++kj) {
        const Range rw = valid_range(g.ow, g.w, g.stride, g.pad, kj);
        const T* row = col + ((ci * g.kh + ki) * g.kw + kj) * plane_out;
        for (long oh = rh.begin; oh < rh.end; ++oh) {
          T* dst = xp + (oh * g.stride - g.pad + ki) * g.w + kj - g.pad;
          const T* src = row + oh * g.ow;
          for (long ow = rw.begin; ow < rw.end; ++ow) dst[ow * g.stride] += src[ow];
        }
      }
    }
  }
}

// Row-major C = alpha * op(A) * op(B) + beta * C.
void gemm(bool ta, bool tb, long m, long n, long k, float alpha, const float* a, long lda,
          const float* b, long ldb, float beta, float* c, long ldc) {
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
              static_cast<blasint>(m), static_cast<blasint>(n), static_cast<blasint>(k), alpha, a,
              static_cast<blasint>(lda), b, static_cast<blasint>(ldb), beta, c, static_cast<blasint>(ldc));
}

void gemm(bool ta, bool tb, long m, long n, long k, double alpha, const double* a, long lda,
          const double* b, long ldb, double beta, double* c, long ldc) {
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
              static_cast<blasint>(m), static_cast<blasint>(n), static_cast<blasint>(k), alpha, a,
              static_cast<blasint>(lda), b, static_cast<blasint>(ldb), beta, c, static_cast<blasint>(ldc));
}

// y = W * im2col(x) + b, per sample.
template <typename T>
void conv_forward(const T* x, const T* w, const T* b, T* y, const ConvGeom& g) {
  const long plane_out = g.oh * g.ow;
  const long k = g.cin * g.kh * g.kw;
  std::vector<T> col(static_cast<std::size_t>(k * plane_out));
  for (long n = 0; n < g.n; ++n) {
    T* yp = y + n * g.cout * plane_out;
    for (long co = 0; co < g.cout; ++co) {
      std::fill(yp + co * plane_out, yp + (co + 1) * plane_out, b ? b[co] : T{0});
    }
    im2col(x + n * g.cin * g.h * g.w, col.data(), g);
    gemm(false, false, g.cout, plane_out, k, T{1}, w, k, col.data(), plane_out, T{1}, yp, plane_out);
  }
}

// gx += W^T gy (scatter form); also the forward pass of the transposed convolution.
template <typename T>
void conv_backward_input(const T* gy, const T* w, T* gx, const ConvGeom& g) {
  const long plane_out = g.oh * g.ow;
  const long k = g.cin * g.kh * g.kw;
  std::vector<T> col(static_cast<std::size_t>(k * plane_out));
  for (long n = 0; n < g.n; ++n) {
    gemm(true, false, k, plane_out, g.cout, T{1}, w, k, gy + n * g.cout * plane_out, plane_out, T{0},
         col.data(), plane_out);
    col2im(col.data(), gx + n * g.cin * g.h * g.w, g);
  }
}

// gw += sum_n gy_n * im2col(x_n)^T
template <typename T>
void conv_backward_weight(const T* gy, const T* x, T* gw, const ConvGeom& g) {
  const long plane_out = g.oh * g.ow;
  const long k = g.cin * g.kh * g.kw;
  std::vector<T> col(static_cast<std::size_t>(k * plane_out));
  for (long n = 0; n < g.n; ++n) {
    im2col(x + n * g.cin * g.h * g.w, col.data(), g);
    gemm(false, true, g.cout, k, plane_out, T{1}, gy + n * g.cout * plane_out, plane_out, col.data(),
         plane_out, T{1}, gw, k);
  }
}

template <typename T>
void bias_backward(const T* gy, T* gb, long n, long c, long plane) {
  for (long co = 0; co < c; ++co) {
    double acc = 0.0;
    for (long i = 0; i < n; ++i) {
      const T* p = gy + (i * c + co) * plane;
      for (long k = 0; k < plane; ++k) acc += p[k];
    }
    gb[co] += static_cast<T>(acc);
  }
}

template <typename T>
void check_bias(const Tensor<T>& bias, std::size_t channels, const char* what) {
  if (bias.defined() && bias.shape() != Shape{channels}) {
    throw ShapeError(std::string(what) + ": bias shape " + to_string(bias.shape()) +
                     " does not match " + std::to_string(channels) + " output channels");
  }
}

// ---------------------------------------------------------------------------
// Element-wise helpers.

template <typename T, typename F, typename D>
Tensor<T> unary(std::string_view kind, const Tensor<T>& x, F f, D dfdx) {
  Tensor<T> out(x.shape());
  const auto xs = x.data();
  auto ys = out.data_mut();
  for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = f(xs[i]);
  auto& tape = Tape<T>::current();
  if (tape.should_record({&x})) {
    StoragePtr<T> xp = x.storage_ptr();
    StoragePtr<T> op = out.storage_ptr();
    tape.record(kind, out, {&x}, [xp, op, dfdx] {
      T* gx = grad_target(*xp);
      if (!gx) return;
      const auto& go = op->grad;
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * dfdx(xp->data[i], op->data[i]);
    });
  }
  return out;
}

template <typename T, typename F, typename DA, typename DB>
Tensor<T> binary(std::string_view kind, const Tensor<T>& a, const Tensor<T>& b, F f, DA dfda,
                 DB dfdb) {
  require_same_shape(a, b, std::string(kind).c_str());
  Tensor<T> out(a.shape());
  const auto as = a.data();
  const auto bs = b.data();
  auto ys = out.data_mut();
  for (std::size_t i = 0; i < as.size(); ++i) ys[i] = f(as[i], bs[i]);
  auto& tape = Tape<T>::current();
  if (tape.should_record({&a, &b})) {
    StoragePtr<T> ap = a.storage_ptr();
    StoragePtr<T> bp = b.storage_ptr();
    StoragePtr<T> op = out.storage_ptr();
    tape.record(kind, out, {&a, &b}, [ap, bp, op, dfda, dfdb] {
      const auto& go = op->grad;
      if (T* ga = grad_target(*ap)) {
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * dfda(ap->data[i], bp->data[i]);
      }
      if (T* gb = grad_target(*bp)) {
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * dfdb(ap->data[i], bp->data[i]);
      }
    });
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride, std::size_t padding) {
  require_rank(input.shape(), 4, "conv2d input");
  require_rank(weight.shape(), 4, "conv2d weight");
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  const auto& is = input.shape();
  const auto& ws = weight.shape();
  if (ws[1] != is[1]) {
    throw ShapeError("conv2d: dimension mismatch between input " + to_string(is) +
                     " and weight " + to_string(ws) + " (input channels)");
  }
  if (ws[2] > is[2] + 2 * padding || ws[3] > is[3] + 2 * padding) {
    throw ShapeError("conv2d: kernel " + to_string(ws) + " larger than padded input " +
                     to_string(is));
  }
  check_bias(bias, ws[0], "conv2d");
  ConvGeom g{};
  g.n = static_cast<long>(is[0]);
  g.cin = static_cast<long>(is[1]);
  g.h = static_cast<long>(is[2]);
  g.w = static_cast<long>(is[3]);
  g.cout = static_cast<long>(ws[0]);
  g.kh = static_cast<long>(ws[2]);
  g.kw = static_cast<long>(ws[3]);
  g.stride = static_cast<long>(stride);
  g.pad = static_cast<long>(padding);
  g.oh = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
  g.ow = (g.w + 2 * g.pad - g.kw) / g.stride + 1;

  Tensor<T> out(Shape{is[0], ws[0], static_cast<std::size_t>(g.oh), static_cast<std::size_t>(g.ow)});
  conv_forward(input.data().data(), weight.data().data(),
               bias.defined() ? bias.data().data() : nullptr, out.data_mut().data(), g);

  auto& tape = Tape<T>::current();
  if (tape.should_record({&input, &weight, &bias})) {
    StoragePtr<T> xp = input.storage_ptr();
    StoragePtr<T> wp = weight.storage_ptr();
    StoragePtr<T> bp = bias.defined() ? bias.storage_ptr() : nullptr;
    StoragePtr<T> op = out.storage_ptr();
    tape.record("conv2d", out, {&input, &weight, &bias}, [xp, wp, bp, op, g] {
      const T* gy = op->grad.data();
      if (T* gx = grad_target(*xp)) conv_backward_input(gy, wp->data.data(), gx, g);
      if (T* gw = grad_target(*wp)) conv_backward_weight(gy, xp->data.data(), gw, g);
      if (bp) {
        if (T* gb = grad_target(*bp)) bias_backward(gy, gb, g.n, g.cout, g.oh * g.ow);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& input, const Tensor<T>& weight,
                           const Tensor<T>& bias, std::size_t stride, std::size_t padding) {
  require_rank(input.shape(), 4, "conv_transpose2d input");
  require_rank(weight.shape(), 4, "conv_transpose2d weight");
  if (stride == 0) throw ShapeError("conv_transpose2d: stride must be positive");
  const auto& is = input.shape();
  const auto& ws = weight.shape();
  if (ws[0] != is[1]) {
    throw ShapeError("conv_transpose2d: dimension mismatch between input " + to_string(is) +
                     " and weight " + to_string(ws) + " (input channels)");
  }
  const long out_h = (static_cast<long>(is[2]) - 1) * static_cast<long>(stride) -
                     2 * static_cast<long>(padding) + static_cast<long>(ws[2]);
  const long out_w = (static_cast<long>(is[3]) - 1) * static_cast<long>(stride) -
                     2 * static_cast<long>(padding) + static_cast<long>(ws[3]);
  if (out_h <= 0 || out_w <= 0) {
    throw ShapeError("conv_transpose2d: geometry of input " + to_string(is) + " and weight " +
                     to_string(ws) + " yields a non-positive output extent");
  }
  check_bias(bias, ws[1], "conv_transpose2d");

  // Same arrays, read as the conv2d whose adjoint this is: its input is our
  // output and its output is our input.
  ConvGeom g{};
  g.n = static_cast<long>(is[0]);
  g.cin = static_cast<long>(ws[1]);
  g.h = out_h;
  g.w = out_w;
  g.cout = static_cast<long>(is[1]);
  g.kh = static_cast<long>(ws[2]);
  g.kw = static_cast<long>(ws[3]);
  g.oh = static_cast<long>(is[2]);
  g.ow = static_cast<long>(is[3]);
  g.stride = static_cast<long>(stride);
  g.pad = static_cast<long>(padding);

  Tensor<T> out(Shape{is[0], ws[1], static_cast<std::size_t>(out_h), static_cast<std::size_t>(out_w)});
  T* y = out.data_mut().data();
  if (bias.defined()) {
    const long plane = out_h * out_w;
    for (long n = 0; n < g.n; ++n) {
      for (long c = 0; c < g.cin; ++c) {
        std::fill(y + (n * g.cin + c) * plane, y + (n * g.cin + c + 1) * plane, bias.data()[c]);
      }
    }
  }
  conv_backward_input(input.data().data(), weight.data().data(), y, g);

  auto& tape = Tape<T>::current();
  if (tape.should_record({&input, &weight, &bias})) {
    StoragePtr<T> xp = input.storage_ptr();
    StoragePtr<T> wp = weight.storage_ptr();
    StoragePtr<T> bp = bias.defined() ? bias.storage_ptr() : nullptr;
    StoragePtr<T> op = out.storage_ptr();
    tape.record("conv_transpose2d", out, {&input, &weight, &bias}, [xp, wp, bp, op, g] {
      const T* gy = op->grad.data();
      if (T* gx = grad_target(*xp)) {
        std::vector<T> tmp(xp->data.size());
        conv_forward(gy, wp->data.data(), static_cast<const T*>(nullptr), tmp.data(), g);
        for (std::size_t i = 0; i < tmp.size(); ++i) gx[i] += tmp[i];
      }
      if (T* gw = grad_target(*wp)) conv_backward_weight(xp->data.data(), gy, gw, g);
      if (bp) {
        if (T* gb = grad_target(*bp)) bias_backward(gy, gb, g.n, g.cin, g.h * g.w);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                       NormMode mode, BatchNormState<T>& state) {
  require_rank(input.shape(), 4, "batch_norm2d input");
  const auto& s = input.shape();
  const std::size_t n = s[0], c = s[1], plane = s[2] * s[3];
  const Shape cshape{c};
  if (gamma.shape() != cshape || beta.shape() != cshape || state.running_mean.shape() != cshape ||
      state.running_var.shape() != cshape) {
    throw ShapeError("batch_norm2d: per-channel parameters must have shape " + to_string(cshape) +
                     " for input " + to_string(s));
  }
  const std::size_t count = n * plane;
  if (mode == NormMode::train && count < 2) {
    throw DomainError("batch_norm2d: degenerate variance, train mode needs N*H*W >= 2 (input " +
                      to_string(s) + ")");
  }

  Tensor<T> out(s);
  std::vector<T> xhat(input.numel());
  std::vector<T> inv_std(c);
  const T* x = input.data().data();
  T* y = out.data_mut().data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mean, var;
    if (mode == NormMode::train) {
      long double sum = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const T* p = x + (i * c + ch) * plane;
        for (std::size_t k = 0; k < plane; ++k) sum += p[k];
      }
      mean = static_cast<double>(sum / static_cast<long double>(count));
      long double sq = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const T* p = x + (i * c + ch) * plane;
        for (std::size_t k = 0; k < plane; ++k) {
          const double d = static_cast<double>(p[k]) - mean;
          sq += d * d;
        }
      }
      var = static_cast<double>(sq / static_cast<long double>(count));
      auto rm = state.running_mean.data_mut();
      auto rv = state.running_var.data_mut();
      const double m = state.momentum;
      rm[ch] = static_cast<T>((1.0 - m) * rm[ch] + m * mean);
      rv[ch] = static_cast<T>((1.0 - m) * rv[ch] +
                              m * var * static_cast<double>(count) / static_cast<double>(count - 1));
    } else {
      mean = state.running_mean.data()[ch];
      var = state.running_var.data()[ch];
    }
    const double is = 1.0 / std::sqrt(var + state.eps);
    inv_std[ch] = static_cast<T>(is);
    const T g = gamma.data()[ch];
    const T b = beta.data()[ch];
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t off = (i * c + ch) * plane;
      for (std::size_t k = 0; k < plane; ++k) {
        const T xh = static_cast<T>((static_cast<double>(x[off + k]) - mean) * is);
        xhat[off + k] = xh;
        y[off + k] = g * xh + b;
      }
    }
  }

  auto& tape = Tape<T>::current();
  if (tape.should_record({&input, &gamma, &beta})) {
    StoragePtr<T> xp = input.storage_ptr();
    StoragePtr<T> gp = gamma.storage_ptr();
    StoragePtr<T> bp = beta.storage_ptr();
    StoragePtr<T> op = out.storage_ptr();
    const bool train = mode == NormMode::train;
    tape.record(train ? "batch_norm2d_train" : "batch_norm2d_eval", out, {&input, &gamma, &beta},
                [xp, gp, bp, op, xhat = std::move(xhat), inv_std = std::move(inv_std), n, c, plane,
                 train] {
                  const auto& gy = op->grad;
                  T* gx = grad_target(*xp);
                  T* gg = grad_target(*gp);
                  T* gb = grad_target(*bp);
                  const double count = static_cast<double>(n * plane);
                  for (std::size_t ch = 0; ch < c; ++ch) {
                    double sum_dy = 0.0, sum_dy_xhat = 0.0;
                    for (std::size_t i = 0; i < n; ++i) {
                      const std::size_t off = (i * c + ch) * plane;
                      for (std::size_t k = 0; k < plane; ++k) {
                        sum_dy += gy[off + k];
                        sum_dy_xhat += static_cast<double>(gy[off + k]) * xhat[off + k];
                      }
                    }
                    if (gg) gg[ch] += static_cast<T>(sum_dy_xhat);
                    if (gb) gb[ch] += static_cast<T>(sum_dy);
                    if (!gx) continue;
                    const double g = gp->data[ch];
                    const double is = inv_std[ch];
                    for (std::size_t i = 0; i < n; ++i) {
                      const std::size_t off = (i * c + ch) * plane;
                      for (std::size_t k = 0; k < plane; ++k) {
                        double d;
                        if (train) {
                          d = g * is *
                              (gy[off + k] - sum_dy / count - xhat[off + k] * sum_dy_xhat / count);
                        } else {
                          d = g * is * gy[off + k];
                        }
                        gx[off + k] += static_cast<T>(d);
                      }
                    }
                  }
                });
  }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary<T>(
      "relu", x, [](T v) { return v > T{0} ? v : T{0}; },
      [](T v, T) { return v > T{0} ? T{1} : T{0}; });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
  return unary<T>(
      "abs", x, [](T v) { return std::abs(v); },
      [](T v, T) { return v > T{0} ? T{1} : (v < T{0} ? T{-1} : T{0}); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return unary<T>(
      "square", x, [](T v) { return v * v; }, [](T v, T) { return T{2} * v; });
}

template <typename T>
Tensor<T> sqrt_shifted(const Tensor<T>& x, T c) {
  std::size_t bad = 0;
  for (T v : x.data()) {
    if (!(v + c >= T{0})) ++bad;
  }
  if (bad) {
    throw DomainError("sqrt_shifted: x + c < 0 at " + std::to_string(bad) + " element(s)");
  }
  return unary<T>(
      "sqrt_shifted", x, [c](T v) { return std::sqrt(v + c); },
      [](T, T y) { return T{0.5} / y; });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      "add", a, b, [](T u, T v) { return u + v; }, [](T, T) { return T{1}; },
      [](T, T) { return T{1}; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      "sub", a, b, [](T u, T v) { return u - v; }, [](T, T) { return T{1}; },
      [](T, T) { return T{-1}; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      "mul", a, b, [](T u, T v) { return u * v; }, [](T, T v) { return v; },
      [](T u, T) { return u; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      "div", a, b, [](T u, T v) { return u / v; }, [](T, T v) { return T{1} / v; },
      [](T u, T v) { return -u / (v * v); });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return unary<T>(
      "scale", x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return unary<T>(
      "add_scalar", x, [s](T v) { return v + s; }, [](T, T) { return T{1}; });
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a.shape(), 4, "concat_channels");
  require_rank(b.shape(), 4, "concat_channels");
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as[0] != bs[0] || as[2] != bs[2] || as[3] != bs[3]) {
    throw ShapeError("concat_channels: dimension mismatch between " + to_string(as) + " and " +
                     to_string(bs));
  }
  const std::size_t n = as[0], ca = as[1], cb = bs[1], plane = as[2] * as[3];
  Tensor<T> out(Shape{n, ca + cb, as[2], as[3]});
  T* y = out.data_mut().data();
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.data().data() + i * ca * plane, ca * plane, y + i * (ca + cb) * plane);
    std::copy_n(b.data().data() + i * cb * plane, cb * plane, y + (i * (ca + cb) + ca) * plane);
  }
  auto& tape = Tape<T>::current();
  if (tape.should_record({&a, &b})) {
    StoragePtr<T> ap = a.storage_ptr();
    StoragePtr<T> bp = b.storage_ptr();
    StoragePtr<T> op = out.storage_ptr();
    tape.record("concat_channels", out, {&a, &b}, [ap, bp, op, n, ca, cb, plane] {
      const T* gy = op->grad.data();
      T* ga = grad_target(*ap);
      T* gb = grad_target(*bp);
      for (std::size_t i = 0; i < n; ++i) {
        const T* src = gy + i * (ca + cb) * plane;
        if (ga) {
          for (std::size_t k = 0; k < ca * plane; ++k) ga[i * ca * plane + k] += src[k];
        }
        if (gb) {
          for (std::size_t k = 0; k < cb * plane; ++k) gb[i * cb * plane + k] += src[ca * plane + k];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x) {
  long double acc = 0;
  for (T v : x.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
  auto& tape = Tape<T>::current();
  if (tape.should_record({&x})) {
    StoragePtr<T> xp = x.storage_ptr();
    StoragePtr<T> op = out.storage_ptr();
    tape.record("reduce_sum", out, {&x}, [xp, op] {
      T* gx = grad_target(*xp);
      if (!gx) return;
      const T g = op->grad[0];
      for (std::size_t i = 0; i < xp->data.size(); ++i) gx[i] += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw ShapeError("reduce_mean of an empty tensor");
  long double acc = 0;
  for (T v : x.data()) acc += v;
  const auto count = static_cast<long double>(x.numel());
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / count));
  auto& tape = Tape<T>::current();
  if (tape.should_record({&x})) {
    StoragePtr<T> xp = x.storage_ptr();
    StoragePtr<T> op = out.storage_ptr();
    tape.record("reduce_mean", out, {&x}, [xp, op] {
      T* gx = grad_target(*xp);
      if (!gx) return;
      const T g = op->grad[0] / static_cast<T>(xp->data.size());
      for (std::size_t i = 0; i < xp->data.size(); ++i) gx[i] += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (hded::numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  Tensor<T> out(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  auto& tape = Tape<T>::current();
  if (tape.should_record({&x})) {
    StoragePtr<T> xp = x.storage_ptr();
    StoragePtr<T> op = out.storage_ptr();
    tape.record("reshape", out, {&x}, [xp, op] {
      T* gx = grad_target(*xp);
      if (!gx) return;
      for (std::size_t i = 0; i < op->grad.size(); ++i) gx[i] += op->grad[i];
    });
  }
  return out;
}

template <typename T>
SpatialDiff<T> spatial_diff(const Tensor<T>& x) {
  require_rank(x.shape(), 4, "spatial_diff");
  const auto& s = x.shape();
  if (s[2] < 2 || s[3] < 2) {
    throw ShapeError("spatial_diff needs H >= 2 and W >= 2, got " + to_string(s));
  }
  const std::size_t planes = s[0] * s[1], h = s[2], w = s[3];
  Tensor<T> dx(Shape{s[0], s[1], h, w - 1});
  Tensor<T> dy(Shape{s[0], s[1], h - 1, w});
  const T* xv = x.data().data();
  T* px = dx.data_mut().data();
  T* py = dy.data_mut().data();
  for (std::size_t p = 0; p < planes; ++p) {
    const T* xp = xv + p * h * w;
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j + 1 < w; ++j) px[(p * h + i) * (w - 1) + j] = xp[i * w + j + 1] - xp[i * w + j];
    }
    for (std::size_t i = 0; i + 1 < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) py[(p * (h - 1) + i) * w + j] = xp[(i + 1) * w + j] - xp[i * w + j];
    }
  }
  auto& tape = Tape<T>::current();
  if (tape.should_record({&x})) {
    StoragePtr<T> xp = x.storage_ptr();
    StoragePtr<T> dxp = dx.storage_ptr();
    StoragePtr<T> dyp = dy.storage_ptr();
    tape.record("spatial_diff_x", dx, {&x}, [xp, dxp, planes, h, w] {
      T* gx = grad_target(*xp);
      if (!gx) return;
      const T* g = dxp->grad.data();
      for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t i = 0; i < h; ++i) {
          for (std::size_t j = 0; j + 1 < w; ++j) {
            const T v = g[(p * h + i) * (w - 1) + j];
            gx[(p * h + i) * w + j + 1] += v;
            gx[(p * h + i) * w + j] -= v;
          }
        }
      }
    });
    tape.record("spatial_diff_y", dy, {&x}, [xp, dyp, planes, h, w] {
      T* gx = grad_target(*xp);
      if (!gx) return;
      const T* g = dyp->grad.data();
      for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t i = 0; i + 1 < h; ++i) {
          for (std::size_t j = 0; j < w; ++j) {
            const T v = g[(p * (h - 1) + i) * w + j];
            gx[(p * h + i + 1) * w + j] += v;
            gx[(p * h + i) * w + j] -= v;
          }
        }
      }
    });
  }
  return {dx, dy};
}

template <typename T>
double inner(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "inner");
  long double acc = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    acc += static_cast<long double>(a.data()[i]) * b.data()[i];
  }
  return static_cast<double>(acc);
}

#define HDED_INSTANTIATE_OPS(T)                                                                  \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t,   \
                            std::size_t);                                                        \
  template Tensor<T> conv_transpose2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,      \
                                      std::size_t, std::size_t);                                 \
  template Tensor<T> batch_norm2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,          \
                                  NormMode, BatchNormState<T>&);                                 \
  template Tensor<T> relu(const Tensor<T>&);                                                     \
  template Tensor<T> abs(const Tensor<T>&);                                                      \
  template Tensor<T> square(const Tensor<T>&);                                                   \
  template Tensor<T> sqrt_shifted(const Tensor<T>&, T);                                          \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> scale(const Tensor<T>&, T);                                                 \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                            \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> reduce_sum(const Tensor<T>&);                                               \
  template Tensor<T> reduce_mean(const Tensor<T>&);                                              \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                           \
  template SpatialDiff<T> spatial_diff(const Tensor<T>&);                                        \
  template double inner(const Tensor<T>&, const Tensor<T>&);

HDED_INSTANTIATE_OPS(float)
HDED_INSTANTIATE_OPS(double)

#undef HDED_INSTANTIATE_OPS

std::vector<std::string_view> recorded_op_kinds() {
  return {"conv2d", "conv_transpose2d", "batch_norm2d_train", "batch_norm2d_eval", "relu", "abs",
          "square", "sqrt_shifted", "add", "sub", "mul", "div", "scale", "add_scalar",
          "concat_channels", "reduce_sum", "reduce_mean", "reshape", "spatial_diff_x", "spatial_diff_y"};
}

}  // namespace hded
