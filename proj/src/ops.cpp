#include "gem/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "gem/vecmath.hpp"

namespace gem::nn {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

// Gradient buffer of parent i, or null when it needs none.
Tensor* pgrad(Node& self, size_t i) {
  auto& p = self.parents[i];
  return p->requires_grad ? &p->grad_buffer() : nullptr;
}

void require_same(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw Error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                shape_str(b.shape()));
  }
}

int64_t last_dim(const Tensor& t) { return t.rank() == 0 ? 1 : t.dim(-1); }

template <typename F, typename G>
Var unary(const Var& x, F f, G dfdx) {
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  for (int64_t i = 0; i < xv.numel(); ++i) y[i] = f(xv[i]);
  return make_result(std::move(y), {x}, [dfdx](Node& self) {
    Tensor* gx = pgrad(self, 0);
    if (!gx) return;
    const Tensor& xv = self.parents[0]->value;
    for (int64_t i = 0; i < xv.numel(); ++i) (*gx)[i] += self.grad[i] * dfdx(xv[i], self.value[i]);
  });
}

double sigmoid_scalar(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

// im2col for conv3d with "same" padding. cols: [T*H*W, kt*kh*kw*Ci].
void im2col3d(const Tensor& x, int64_t kt, int64_t kh, int64_t kw, std::vector<double>& cols) {
  const int64_t T = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  const int64_t pt = kt / 2, ph = kh / 2, pw = kw / 2;
  const int64_t row_len = kt * kh * kw * C;
  cols.assign(static_cast<size_t>(T * H * W * row_len), 0.0);
  const double* xd = x.data();
  for (int64_t t = 0; t < T; ++t)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t xx = 0; xx < W; ++xx) {
        double* row = cols.data() + ((t * H + y) * W + xx) * row_len;
        int64_t k = 0;
        for (int64_t a = 0; a < kt; ++a) {
          const int64_t ts = t + a - pt;
          for (int64_t b = 0; b < kh; ++b) {
            const int64_t ys = y + b - ph;
            for (int64_t c = 0; c < kw; ++c, ++k) {
              const int64_t xs = xx + c - pw;
              if (ts < 0 || ts >= T || ys < 0 || ys >= H || xs < 0 || xs >= W) continue;
              std::copy_n(xd + ((ts * H + ys) * W + xs) * C, C, row + k * C);
            }
          }
        }
      }
}

void col2im3d(const std::vector<double>& cols, int64_t kt, int64_t kh, int64_t kw, Tensor& gx) {
  const int64_t T = gx.dim(0), H = gx.dim(1), W = gx.dim(2), C = gx.dim(3);
  const int64_t pt = kt / 2, ph = kh / 2, pw = kw / 2;
  const int64_t row_len = kt * kh * kw * C;
  double* gd = gx.data();
  for (int64_t t = 0; t < T; ++t)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t xx = 0; xx < W; ++xx) {
        const double* row = cols.data() + ((t * H + y) * W + xx) * row_len;
        int64_t k = 0;
        for (int64_t a = 0; a < kt; ++a) {
          const int64_t ts = t + a - pt;
          for (int64_t b = 0; b < kh; ++b) {
            const int64_t ys = y + b - ph;
            for (int64_t c = 0; c < kw; ++c, ++k) {
              const int64_t xs = xx + c - pw;
              if (ts < 0 || ts >= T || ys < 0 || ys >= H || xs < 0 || xs >= W) continue;
              double* dst = gd + ((ts * H + ys) * W + xs) * C;
              const double* src = row + k * C;
              for (int64_t ci = 0; ci < C; ++ci) dst[ci] += src[ci];
            }
          }
        }
      }
}

struct Conv2dGeom {
  int64_t H, W, C, kh, kw, stride, pad, Ho, Wo;
};

void im2col2d(const Tensor& x, const Conv2dGeom& g, std::vector<double>& cols) {
  const int64_t row_len = g.kh * g.kw * g.C;
  cols.assign(static_cast<size_t>(g.Ho * g.Wo * row_len), 0.0);
  const double* xd = x.data();
  for (int64_t oy = 0; oy < g.Ho; ++oy)
    for (int64_t ox = 0; ox < g.Wo; ++ox) {
      double* row = cols.data() + (oy * g.Wo + ox) * row_len;
      int64_t k = 0;
      for (int64_t b = 0; b < g.kh; ++b) {
        const int64_t ys = oy * g.stride + b - g.pad;
        for (int64_t c = 0; c < g.kw; ++c, ++k) {
          const int64_t xs = ox * g.stride + c - g.pad;
          if (ys < 0 || ys >= g.H || xs < 0 || xs >= g.W) continue;
          std::copy_n(xd + (ys * g.W + xs) * g.C, g.C, row + k * g.C);
        }
      }
    }
}

void col2im2d(const std::vector<double>& cols, const Conv2dGeom& g, Tensor& gx) {
  const int64_t row_len = g.kh * g.kw * g.C;
  double* gd = gx.data();
  for (int64_t oy = 0; oy < g.Ho; ++oy)
    for (int64_t ox = 0; ox < g.Wo; ++ox) {
      const double* row = cols.data() + (oy * g.Wo + ox) * row_len;
      int64_t k = 0;
      for (int64_t b = 0; b < g.kh; ++b) {
        const int64_t ys = oy * g.stride + b - g.pad;
        for (int64_t c = 0; c < g.kw; ++c, ++k) {
          const int64_t xs = ox * g.stride + c - g.pad;
          if (ys < 0 || ys >= g.H || xs < 0 || xs >= g.W) continue;
          double* dst = gd + (ys * g.W + xs) * g.C;
          const double* src = row + k * g.C;
          for (int64_t ci = 0; ci < g.C; ++ci) dst[ci] += src[ci];
        }
      }
    }
}

// Shared normalization backward: given normalized values yhat, upstream g,
// inverse std and group size n, dx = inv * (g - mean(g) - yhat*mean(g*yhat)).
void norm_backward(const double* g, const double* yhat, double inv, int64_t n, double* gx_base,
                   const int64_t* offsets) {
  double sg = 0.0, sgy = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const int64_t o = offsets ? offsets[i] : i;
    sg += g[o];
    sgy += g[o] * yhat[o];
  }
  const double mg = sg / static_cast<double>(n), mgy = sgy / static_cast<double>(n);
  for (int64_t i = 0; i < n; ++i) {
    const int64_t o = offsets ? offsets[i] : i;
    gx_base[o] += inv * (g[o] - mg - yhat[o] * mgy);
  }
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same(a, b, "add");
  Tensor y = a.value();
  for (int64_t i = 0; i < y.numel(); ++i) y[i] += b.value()[i];
  return make_result(std::move(y), {a, b}, [](Node& self) {
    for (size_t k = 0; k < 2; ++k)
      if (Tensor* g = pgrad(self, k))
        for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i];
  });
}

Var sub(const Var& a, const Var& b) {
  require_same(a, b, "sub");
  Tensor y = a.value();
  for (int64_t i = 0; i < y.numel(); ++i) y[i] -= b.value()[i];
  return make_result(std::move(y), {a, b}, [](Node& self) {
    if (Tensor* g = pgrad(self, 0))
      for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i];
    if (Tensor* g = pgrad(self, 1))
      for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] -= self.grad[i];
  });
}

Var mul(const Var& a, const Var& b) {
  require_same(a, b, "mul");
  Tensor y = a.value();
  for (int64_t i = 0; i < y.numel(); ++i) y[i] *= b.value()[i];
  return make_result(std::move(y), {a, b}, [](Node& self) {
    const Tensor& av = self.parents[0]->value;
    const Tensor& bv = self.parents[1]->value;
    if (Tensor* g = pgrad(self, 0))
      for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i] * bv[i];
    if (Tensor* g = pgrad(self, 1))
      for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i] * av[i];
  });
}

Var scale(const Var& x, double s) {
  return unary(x, [s](double v) { return v * s; }, [s](double, double) { return s; });
}

Var add_scalar(const Var& x, double s) {
  return unary(x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Var one_minus(const Var& x) {
  return unary(x, [](double v) { return 1.0 - v; }, [](double, double) { return -1.0; });
}

Var square(const Var& x) {
  return unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Var abs(const Var& x) {
  return unary(
      x, [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Var add_bias(const Var& x, const Var& bias) {
  const int64_t C = last_dim(x.value());
  if (bias.numel() != C) throw Error("add_bias: bias size does not match last axis");
  Tensor y = x.value();
  const int64_t rows = y.numel() / C;
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < C; ++c) y[r * C + c] += bias.value()[c];
  return make_result(std::move(y), {x, bias}, [C, rows](Node& self) {
    if (Tensor* g = pgrad(self, 0))
      for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i];
    if (Tensor* g = pgrad(self, 1))
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < C; ++c) (*g)[c] += self.grad[r * C + c];
  });
}

Var mul_channel(const Var& x, const Var& s) {
  const int64_t C = last_dim(x.value());
  if (s.numel() != C) throw Error("mul_channel: scale size does not match last axis");
  Tensor y = x.value();
  const int64_t rows = y.numel() / C;
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < C; ++c) y[r * C + c] *= s.value()[c];
  return make_result(std::move(y), {x, s}, [C, rows](Node& self) {
    const Tensor& xv = self.parents[0]->value;
    const Tensor& sv = self.parents[1]->value;
    if (Tensor* g = pgrad(self, 0))
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < C; ++c) (*g)[r * C + c] += self.grad[r * C + c] * sv[c];
    if (Tensor* g = pgrad(self, 1))
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < C; ++c) (*g)[c] += self.grad[r * C + c] * xv[r * C + c];
  });
}

Var matmul(const Var& x, const Var& w) {
  if (w.value().rank() != 2) throw Error("matmul: weight must be rank 2");
  const int64_t K = w.dim(0), N = w.dim(1);
  if (last_dim(x.value()) != K) {
    throw Error("matmul: inner dimension mismatch " + shape_str(x.shape()) + " x " +
                shape_str(w.shape()));
  }
  const int64_t M = x.numel() / K;
  Shape out_shape = x.shape();
  out_shape.back() = N;
  Tensor y(out_shape);
  MapMat(y.data(), M, N).noalias() = CMapMat(x.value().data(), M, K) * CMapMat(w.value().data(), K, N);
  return make_result(std::move(y), {x, w}, [M, K, N](Node& self) {
    CMapMat gy(self.grad.data(), M, N);
    if (Tensor* g = pgrad(self, 0))
      MapMat(g->data(), M, K).noalias() += gy * CMapMat(self.parents[1]->value.data(), K, N).transpose();
    if (Tensor* g = pgrad(self, 1))
      MapMat(g->data(), K, N).noalias() += CMapMat(self.parents[0]->value.data(), M, K).transpose() * gy;
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  Var y = matmul(x, w);
  return b.defined() ? add_bias(y, b) : y;
}

Var relu(const Var& x) {
  return unary(
      x, [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Var silu(const Var& x) {
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  vec::sigmoid(xv.data(), y.data(), xv.numel());
  for (int64_t i = 0; i < xv.numel(); ++i) y[i] *= xv[i];
  return make_result(std::move(y), {x}, [](Node& self) {
    Tensor* gx = pgrad(self, 0);
    if (!gx) return;
    const Tensor& xv = self.parents[0]->value;
    std::vector<double> s(static_cast<size_t>(xv.numel()));
    vec::sigmoid(xv.data(), s.data(), xv.numel());
    for (int64_t i = 0; i < xv.numel(); ++i) {
      const double si = s[static_cast<size_t>(i)];
      (*gx)[i] += self.grad[i] * si * (1.0 + xv[i] * (1.0 - si));
    }
  });
}

Var gelu(const Var& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [](double v, double) {
        return 0.5 * (1.0 + std::erf(v * kInvSqrt2)) + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
      });
}

Var sigmoid(const Var& x) {
  Tensor y(x.shape());
  vec::sigmoid(x.value().data(), y.data(), x.numel());
  return make_result(std::move(y), {x}, [](Node& self) {
    if (Tensor* gx = pgrad(self, 0))
      for (int64_t i = 0; i < gx->numel(); ++i) (*gx)[i] += self.grad[i] * self.value[i] * (1.0 - self.value[i]);
  });
}

Var tanh(const Var& x) {
  return unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Var softplus(const Var& x) {
  return unary(
      x, [](double v) { return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); },
      [](double v, double) { return sigmoid_scalar(v); });
}

Var exp(const Var& x) {
  Tensor y(x.shape());
  vec::exp(x.value().data(), y.data(), x.numel());
  return make_result(std::move(y), {x}, [](Node& self) {
    if (Tensor* gx = pgrad(self, 0))
      for (int64_t i = 0; i < gx->numel(); ++i) (*gx)[i] += self.grad[i] * self.value[i];
  });
}

Var log_clamped(const Var& x, double eps) {
  return unary(
      x, [eps](double v) { return std::log(std::clamp(v, eps, 1.0 - eps)); },
      [eps](double v, double) { return (v > eps && v < 1.0 - eps) ? 1.0 / v : 0.0; });
}

Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return make_result(Tensor({1}, {s}), {x}, [](Node& self) {
    if (Tensor* g = pgrad(self, 0))
      for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[0];
  });
}

Var mean(const Var& x) {
  const double n = static_cast<double>(std::max<int64_t>(1, x.numel()));
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return make_result(Tensor({1}, {s / n}), {x}, [n](Node& self) {
    if (Tensor* g = pgrad(self, 0))
      for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[0] / n;
  });
}

Var mean_rows(const Var& x) {
  const int64_t C = last_dim(x.value());
  const int64_t rows = x.numel() / C;
  Tensor y({C});
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < C; ++c) y[c] += x.value()[r * C + c];
  for (int64_t c = 0; c < C; ++c) y[c] /= static_cast<double>(rows);
  return make_result(std::move(y), {x}, [C, rows](Node& self) {
    if (Tensor* g = pgrad(self, 0))
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < C; ++c) (*g)[r * C + c] += self.grad[c] / static_cast<double>(rows);
  });
}

Var mean_time_range(const Var& x, int64_t begin, int64_t end) {
  return mean_rows(slice0(x, begin, end));
}

Var reshape(const Var& x, Shape shape) {
  Tensor y = x.value().reshaped(std::move(shape));
  return make_result(std::move(y), {x}, [](Node& self) {
    if (Tensor* g = pgrad(self, 0))
      for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i];
  });
}

Var concat_last(const std::vector<Var>& xs) {
  if (xs.empty()) throw Error("concat_last: no inputs");
  const int64_t rows = xs[0].numel() / last_dim(xs[0].value());
  std::vector<int64_t> widths;
  int64_t total = 0;
  for (const Var& v : xs) {
    const int64_t c = last_dim(v.value());
    if (v.numel() / c != rows) throw Error("concat_last: leading shapes differ");
    widths.push_back(c);
    total += c;
  }
  Shape out_shape = xs[0].shape();
  out_shape.back() = total;
  Tensor y(out_shape);
  int64_t off = 0;
  for (size_t k = 0; k < xs.size(); ++k) {
    const int64_t c = widths[k];
    for (int64_t r = 0; r < rows; ++r)
      std::copy_n(xs[k].value().data() + r * c, c, y.data() + r * total + off);
    off += c;
  }
  return make_result(std::move(y), xs, [widths, rows, total](Node& self) {
    int64_t off = 0;
    for (size_t k = 0; k < widths.size(); ++k) {
      const int64_t c = widths[k];
      if (Tensor* g = pgrad(self, k))
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < c; ++j) (*g)[r * c + j] += self.grad[r * total + off + j];
      off += c;
    }
  });
}

Var concat0(const std::vector<Var>& xs) {
  if (xs.empty()) throw Error("concat0: no inputs");
  Shape out_shape = xs[0].shape();
  int64_t rows = 0;
  for (const Var& v : xs) {
    Shape s = v.shape();
    if (s.size() != out_shape.size()) throw Error("concat0: rank mismatch");
    rows += s[0];
    s[0] = out_shape[0];
    if (s != out_shape) throw Error("concat0: trailing shapes differ");
  }
  out_shape[0] = rows;
  Tensor y(out_shape);
  int64_t off = 0;
  for (const Var& v : xs) {
    std::copy_n(v.value().data(), v.numel(), y.data() + off);
    off += v.numel();
  }
  return make_result(std::move(y), xs, [](Node& self) {
    int64_t off = 0;
    for (size_t k = 0; k < self.parents.size(); ++k) {
      const int64_t n = self.parents[k]->value.numel();
      if (Tensor* g = pgrad(self, k))
        for (int64_t i = 0; i < n; ++i) (*g)[i] += self.grad[off + i];
      off += n;
    }
  });
}

Var slice0(const Var& x, int64_t begin, int64_t end) {
  const int64_t n0 = x.dim(0);
  if (begin < 0 || end > n0 || begin > end) throw Error("slice0: range out of bounds");
  const int64_t stride = x.numel() / std::max<int64_t>(1, n0);
  Shape s = x.shape();
  s[0] = end - begin;
  Tensor y(s);
  std::copy_n(x.value().data() + begin * stride, (end - begin) * stride, y.data());
  return make_result(std::move(y), {x}, [begin, stride](Node& self) {
    if (Tensor* g = pgrad(self, 0))
      for (int64_t i = 0; i < self.grad.numel(); ++i) (*g)[begin * stride + i] += self.grad[i];
  });
}

Var slice_last(const Var& x, int64_t begin, int64_t end) {
  const int64_t C = last_dim(x.value());
  if (begin < 0 || end > C || begin > end) throw Error("slice_last: range out of bounds");
  const int64_t rows = x.numel() / C, w = end - begin;
  Shape s = x.shape();
  s.back() = w;
  Tensor y(s);
  for (int64_t r = 0; r < rows; ++r) std::copy_n(x.value().data() + r * C + begin, w, y.data() + r * w);
  return make_result(std::move(y), {x}, [begin, C, rows, w](Node& self) {
    if (Tensor* g = pgrad(self, 0))
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < w; ++j) (*g)[r * C + begin + j] += self.grad[r * w + j];
  });
}

Var reverse0(const Var& x) {
  const int64_t n0 = x.dim(0);
  const int64_t stride = x.numel() / std::max<int64_t>(1, n0);
  Tensor y(x.shape());
  for (int64_t t = 0; t < n0; ++t)
    std::copy_n(x.value().data() + (n0 - 1 - t) * stride, stride, y.data() + t * stride);
  return make_result(std::move(y), {x}, [n0, stride](Node& self) {
    if (Tensor* g = pgrad(self, 0))
      for (int64_t t = 0; t < n0; ++t)
        for (int64_t j = 0; j < stride; ++j) (*g)[(n0 - 1 - t) * stride + j] += self.grad[t * stride + j];
  });
}

Var detach(const Var& x) { return constant(x.value()); }

Var space_to_depth(const Var& x, int64_t sv, int64_t sh) {
  if (x.value().rank() != 3) throw Error("space_to_depth: expected [H, W, C]");
  const int64_t H = x.dim(0), W = x.dim(1), C = x.dim(2);
  if (H % sv || W % sh) throw Error("space_to_depth: size not divisible by factors");
  const int64_t h = H / sv, w = W / sh, Co = C * sv * sh;
  Tensor y({h, w, Co});
  auto index = [=](int64_t Y, int64_t X, int64_t i, int64_t j) {
    return std::pair<int64_t, int64_t>{((Y * sv + i) * W + (X * sh + j)) * C, (Y * w + X) * Co + (i * sh + j) * C};
  };
  for (int64_t Y = 0; Y < h; ++Y)
    for (int64_t X = 0; X < w; ++X)
      for (int64_t i = 0; i < sv; ++i)
        for (int64_t j = 0; j < sh; ++j) {
          auto [src, dst] = index(Y, X, i, j);
          std::copy_n(x.value().data() + src, C, y.data() + dst);
        }
  return make_result(std::move(y), {x}, [=](Node& self) {
    Tensor* g = pgrad(self, 0);
    if (!g) return;
    for (int64_t Y = 0; Y < h; ++Y)
      for (int64_t X = 0; X < w; ++X)
        for (int64_t i = 0; i < sv; ++i)
          for (int64_t j = 0; j < sh; ++j) {
            auto [src, dst] = index(Y, X, i, j);
            for (int64_t c = 0; c < C; ++c) (*g)[src + c] += self.grad[dst + c];
          }
  });
}

Var depth_to_space(const Var& x, int64_t sv, int64_t sh) {
  if (x.value().rank() != 3) throw Error("depth_to_space: expected [h, w, C]");
  const int64_t h = x.dim(0), w = x.dim(1), Ci = x.dim(2);
  if (Ci % (sv * sh)) throw Error("depth_to_space: channels not divisible by factors");
  const int64_t C = Ci / (sv * sh), H = h * sv, W = w * sh;
  Tensor y({H, W, C});
  auto index = [=](int64_t Y, int64_t X, int64_t i, int64_t j) {
    return std::pair<int64_t, int64_t>{(Y * w + X) * Ci + (i * sh + j) * C, ((Y * sv + i) * W + (X * sh + j)) * C};
  };
  for (int64_t Y = 0; Y < h; ++Y)
    for (int64_t X = 0; X < w; ++X)
      for (int64_t i = 0; i < sv; ++i)
        for (int64_t j = 0; j < sh; ++j) {
          auto [src, dst] = index(Y, X, i, j);
          std::copy_n(x.value().data() + src, C, y.data() + dst);
        }
  return make_result(std::move(y), {x}, [=](Node& self) {
    Tensor* g = pgrad(self, 0);
    if (!g) return;
    for (int64_t Y = 0; Y < h; ++Y)
      for (int64_t X = 0; X < w; ++X)
        for (int64_t i = 0; i < sv; ++i)
          for (int64_t j = 0; j < sh; ++j) {
            auto [src, dst] = index(Y, X, i, j);
            for (int64_t c = 0; c < C; ++c) (*g)[src + c] += self.grad[dst + c];
          }
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const int64_t C = last_dim(x.value());
  const int64_t rows = x.numel() / C;
  if (gamma.numel() != C || beta.numel() != C) throw Error("layer_norm: affine size mismatch");
  Tensor yhat(x.shape());
  std::vector<double> inv(static_cast<size_t>(rows));
  const double* xd = x.value().data();
  for (int64_t r = 0; r < rows; ++r) {
    double m = 0.0, v = 0.0;
    for (int64_t c = 0; c < C; ++c) m += xd[r * C + c];
    m /= static_cast<double>(C);
    for (int64_t c = 0; c < C; ++c) v += (xd[r * C + c] - m) * (xd[r * C + c] - m);
    v /= static_cast<double>(C);
    inv[static_cast<size_t>(r)] = 1.0 / std::sqrt(v + eps);
    for (int64_t c = 0; c < C; ++c) yhat[r * C + c] = (xd[r * C + c] - m) * inv[static_cast<size_t>(r)];
  }
  Tensor y(x.shape());
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < C; ++c) y[r * C + c] = yhat[r * C + c] * gamma.value()[c] + beta.value()[c];
  return make_result(std::move(y), {x, gamma, beta}, [yhat = std::move(yhat), inv = std::move(inv), C, rows](Node& self) {
    const Tensor& gam = self.parents[1]->value;
    if (Tensor* g = pgrad(self, 1))
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < C; ++c) (*g)[c] += self.grad[r * C + c] * yhat[r * C + c];
    if (Tensor* g = pgrad(self, 2))
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < C; ++c) (*g)[c] += self.grad[r * C + c];
    if (Tensor* g = pgrad(self, 0)) {
      std::vector<double> gh(static_cast<size_t>(C));
      for (int64_t r = 0; r < rows; ++r) {
        for (int64_t c = 0; c < C; ++c) gh[static_cast<size_t>(c)] = self.grad[r * C + c] * gam[c];
        norm_backward(gh.data(), yhat.data() + r * C, inv[static_cast<size_t>(r)], C, g->data() + r * C, nullptr);
      }
    }
  });
}

Var group_norm(const Var& x, int64_t groups, double eps) {
  const int64_t C = last_dim(x.value());
  if (groups <= 0 || C % groups) {
    throw Error("group_norm: channel count " + std::to_string(C) + " not divisible by " +
                std::to_string(groups) + " groups");
  }
  const int64_t rows = x.numel() / C, cg = C / groups;
  const int64_t n = rows * cg;
  Tensor y(x.shape());
  std::vector<double> inv(static_cast<size_t>(groups));
  const double* xd = x.value().data();
  for (int64_t g = 0; g < groups; ++g) {
    double m = 0.0, v = 0.0;
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t c = g * cg; c < (g + 1) * cg; ++c) m += xd[r * C + c];
    m /= static_cast<double>(n);
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t c = g * cg; c < (g + 1) * cg; ++c) v += (xd[r * C + c] - m) * (xd[r * C + c] - m);
    v /= static_cast<double>(n);
    const double iv = 1.0 / std::sqrt(v + eps);
    inv[static_cast<size_t>(g)] = iv;
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t c = g * cg; c < (g + 1) * cg; ++c) y[r * C + c] = (xd[r * C + c] - m) * iv;
  }
  return make_result(y, {x}, [inv = std::move(inv), C, rows, cg, groups, n](Node& self) {
    Tensor* gx = pgrad(self, 0);
    if (!gx) return;
    const Tensor& yhat = self.value;
    std::vector<int64_t> offsets(static_cast<size_t>(n));
    for (int64_t g = 0; g < groups; ++g) {
      int64_t k = 0;
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = g * cg; c < (g + 1) * cg; ++c) offsets[static_cast<size_t>(k++)] = r * C + c;
      norm_backward(self.grad.data(), yhat.data(), inv[static_cast<size_t>(g)], n, gx->data(), offsets.data());
    }
  });
}

Var conv3d(const Var& x, const Var& w, const Var& b) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (xv.rank() != 4 || wv.rank() != 5) throw Error("conv3d: expected x[T,H,W,C] and w[kt,kh,kw,Ci,Co]");
  const int64_t kt = wv.dim(0), kh = wv.dim(1), kw = wv.dim(2), Ci = wv.dim(3), Co = wv.dim(4);
  if (xv.dim(3) != Ci) throw Error("conv3d: channel mismatch");
  if (kt % 2 == 0 || kh % 2 == 0 || kw % 2 == 0) throw Error("conv3d: kernel sizes must be odd");
  const int64_t P = xv.dim(0) * xv.dim(1) * xv.dim(2);
  const int64_t K = kt * kh * kw * Ci;
  Shape out_shape = xv.shape();
  out_shape[3] = Co;
  Tensor y(out_shape);
  if (kt == 1 && kh == 1 && kw == 1) {
    MapMat(y.data(), P, Co).noalias() = CMapMat(xv.data(), P, Ci) * CMapMat(wv.data(), Ci, Co);
  } else {
    std::vector<double> cols;
    im2col3d(xv, kt, kh, kw, cols);
    MapMat(y.data(), P, Co).noalias() = CMapMat(cols.data(), P, K) * CMapMat(wv.data(), K, Co);
  }
  Var out = make_result(std::move(y), {x, w}, [kt, kh, kw, P, K, Co, Ci](Node& self) {
    const Tensor& xv = self.parents[0]->value;
    const Tensor& wv = self.parents[1]->value;
    CMapMat gy(self.grad.data(), P, Co);
    const bool pointwise = kt == 1 && kh == 1 && kw == 1;
    Tensor* gx = pgrad(self, 0);
    Tensor* gw = pgrad(self, 1);
    if (pointwise) {
      if (gw) MapMat(gw->data(), Ci, Co).noalias() += CMapMat(xv.data(), P, Ci).transpose() * gy;
      if (gx) MapMat(gx->data(), P, Ci).noalias() += gy * CMapMat(wv.data(), Ci, Co).transpose();
      return;
    }
    if (gw) {
      std::vector<double> cols;
      im2col3d(xv, kt, kh, kw, cols);
      MapMat(gw->data(), K, Co).noalias() += CMapMat(cols.data(), P, K).transpose() * gy;
    }
    if (gx) {
      std::vector<double> gcols(static_cast<size_t>(P * K));
      MapMat(gcols.data(), P, K).noalias() = gy * CMapMat(wv.data(), K, Co).transpose();
      col2im3d(gcols, kt, kh, kw, *gx);
    }
  });
  return b.defined() ? add_bias(out, b) : out;
}

Var conv2d(const Var& x, const Var& w, const Var& b, int64_t stride, int64_t pad) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (xv.rank() != 3 || wv.rank() != 4) throw Error("conv2d: expected x[H,W,C] and w[kh,kw,Ci,Co]");
  if (stride < 1 || pad < 0) throw Error("conv2d: invalid stride or padding");
  Conv2dGeom g{xv.dim(0), xv.dim(1), xv.dim(2), wv.dim(0), wv.dim(1), stride, pad, 0, 0};
  if (wv.dim(2) != g.C) throw Error("conv2d: channel mismatch");
  g.Ho = (g.H + 2 * pad - g.kh) / stride + 1;
  g.Wo = (g.W + 2 * pad - g.kw) / stride + 1;
  if (g.Ho <= 0 || g.Wo <= 0) throw Error("conv2d: input smaller than kernel");
  const int64_t Co = wv.dim(3), K = g.kh * g.kw * g.C, P = g.Ho * g.Wo;
  std::vector<double> cols;
  im2col2d(xv, g, cols);
  Tensor y({g.Ho, g.Wo, Co});
  MapMat(y.data(), P, Co).noalias() = CMapMat(cols.data(), P, K) * CMapMat(wv.data(), K, Co);
  Var out = make_result(std::move(y), {x, w}, [g, Co, K, P](Node& self) {
    CMapMat gy(self.grad.data(), P, Co);
    if (Tensor* gw = pgrad(self, 1)) {
      std::vector<double> cols;
      im2col2d(self.parents[0]->value, g, cols);
      MapMat(gw->data(), K, Co).noalias() += CMapMat(cols.data(), P, K).transpose() * gy;
    }
    if (Tensor* gx = pgrad(self, 0)) {
      std::vector<double> gcols(static_cast<size_t>(P * K));
      MapMat(gcols.data(), P, K).noalias() = gy * CMapMat(self.parents[1]->value.data(), K, Co).transpose();
      col2im2d(gcols, g, *gx);
    }
  });
  return b.defined() ? add_bias(out, b) : out;
}

Var causal_conv1d(const Var& x, const Var& w, const Var& b) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || w.value().rank() != 2) throw Error("causal_conv1d: expected x[L,D], w[K,D]");
  const int64_t L = xv.dim(0), D = xv.dim(1), K = w.dim(0);
  if (w.dim(1) != D || b.numel() != D) throw Error("causal_conv1d: channel mismatch");
  Tensor y({L, D});
  const double* wd = w.value().data();
  for (int64_t t = 0; t < L; ++t) {
    double* yr = y.data() + t * D;
    for (int64_t d = 0; d < D; ++d) yr[d] = b.value()[d];
    for (int64_t k = 0; k < K; ++k) {
      const int64_t s = t - (K - 1) + k;
      if (s < 0) continue;
      const double* xr = xv.data() + s * D;
      for (int64_t d = 0; d < D; ++d) yr[d] += wd[k * D + d] * xr[d];
    }
  }
  return make_result(std::move(y), {x, w, b}, [L, D, K](Node& self) {
    const Tensor& xv = self.parents[0]->value;
    const Tensor& wv = self.parents[1]->value;
    Tensor* gx = pgrad(self, 0);
    Tensor* gw = pgrad(self, 1);
    Tensor* gb = pgrad(self, 2);
    for (int64_t t = 0; t < L; ++t) {
      const double* gy = self.grad.data() + t * D;
      if (gb)
        for (int64_t d = 0; d < D; ++d) (*gb)[d] += gy[d];
      for (int64_t k = 0; k < K; ++k) {
        const int64_t s = t - (K - 1) + k;
        if (s < 0) continue;
        for (int64_t d = 0; d < D; ++d) {
          if (gw) (*gw)[k * D + d] += gy[d] * xv[s * D + d];
          if (gx) (*gx)[s * D + d] += gy[d] * wv[k * D + d];
        }
      }
    }
  });
}

Var gather_rows(const Var& table, const std::vector<int64_t>& index) {
  if (table.value().rank() != 2) throw Error("gather_rows: table must be rank 2");
  const int64_t K = table.dim(0), C = table.dim(1);
  const int64_t n = static_cast<int64_t>(index.size());
  Tensor y({n, C});
  for (int64_t i = 0; i < n; ++i) {
    const int64_t k = index[static_cast<size_t>(i)];
    if (k < 0 || k >= K) throw Error("gather_rows: index out of range");
    std::copy_n(table.value().data() + k * C, C, y.data() + i * C);
  }
  return make_result(std::move(y), {table}, [index, C](Node& self) {
    if (Tensor* g = pgrad(self, 0))
      for (size_t i = 0; i < index.size(); ++i)
        for (int64_t c = 0; c < C; ++c) (*g)[index[i] * C + c] += self.grad[static_cast<int64_t>(i) * C + c];
  });
}

Var straight_through(const Var& x, const Tensor& replacement) {
  if (!x.value().same_shape(replacement)) throw Error("straight_through: shape mismatch");
  return make_result(replacement, {x}, [](Node& self) {
    if (Tensor* g = pgrad(self, 0))
      for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i];
  });
}

Var mse(const Var& a, const Var& b) { return mean(square(sub(a, b))); }

Var l1_masked(const Var& a, const Tensor& target, const Tensor& mask) {
  if (!a.value().same_shape(target) || !a.value().same_shape(mask)) throw Error("l1_masked: shape mismatch");
  double s = 0.0, count = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i)
    if (mask[i] != 0.0) {
      s += std::abs(a.value()[i] - target[i]);
      count += 1.0;
    }
  const double loss = count > 0 ? s / count : 0.0;
  return make_result(Tensor({1}, {loss}), {a}, [target, mask, count](Node& self) {
    Tensor* g = pgrad(self, 0);
    if (!g || count == 0) return;
    const Tensor& av = self.parents[0]->value;
    for (int64_t i = 0; i < g->numel(); ++i) {
      if (mask[i] == 0.0) continue;
      const double d = av[i] - target[i];
      (*g)[i] += self.grad[0] * (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0)) / count;
    }
  });
}

Var bce_with_logits(const Var& logits, const Tensor& target) {
  if (!logits.value().same_shape(target)) throw Error("bce_with_logits: shape mismatch");
  const int64_t n = logits.numel();
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double l = logits.value()[i];
    s += std::max(l, 0.0) - l * target[i] + std::log1p(std::exp(-std::abs(l)));
  }
  return make_result(Tensor({1}, {s / static_cast<double>(n)}), {logits}, [target, n](Node& self) {
    Tensor* g = pgrad(self, 0);
    if (!g) return;
    const Tensor& lv = self.parents[0]->value;
    for (int64_t i = 0; i < n; ++i)
      (*g)[i] += self.grad[0] * (sigmoid_scalar(lv[i]) - target[i]) / static_cast<double>(n);
  });
}

}  // namespace gem::nn
