// SPDX-License-Identifier: Apache-2.0

#include "veinatn/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace veinatn {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
ConstMatMap<T> as_matrix(const Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return ConstMatMap<T>(t.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <typename T>
ConstMatMap<T> as_matrix(const AlignedVector<T>& v, std::size_t rows, std::size_t cols) {
  return ConstMatMap<T>(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <typename T>
MatMap<T> as_matrix(AlignedVector<T>& v, std::size_t rows, std::size_t cols) {
  return MatMap<T>(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void require(bool cond, const std::string& what) {
  if (!cond) throw ShapeError(what);
}

void require_same_tape(const void* a, const void* b) {
  if (a != b) throw TapeError("operands recorded on different tapes");
}

template <typename T>
void require_rank(Var<T> v, std::size_t rank, const char* op, const char* arg) {
  if (v.shape().size() != rank) {
    throw ShapeError(std::string(op) + ": " + arg + " must have rank " + std::to_string(rank) + ", got " +
                     shape_to_string(v.shape()));
  }
}

// im2col for one sample: rows indexed by (c, ki, kj), columns by output
// position.
template <typename T>
void im2col(const T* x, std::size_t c_in, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            std::size_t oh, std::size_t ow, int stride, int pad, T* col) {
  const std::size_t cols = oh * ow;
  for (std::size_t c = 0; c < c_in; ++c) {
    const T* plane = x + c * h * w;
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        T* row = col + ((c * kh + ki) * kw + kj) * cols;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy) * stride - pad + static_cast<long>(ki);
          T* dst = row + oy * ow;
          if (iy < 0 || iy >= static_cast<long>(h)) {
            std::fill(dst, dst + ow, T{0});
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * w;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox) * stride - pad + static_cast<long>(kj);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(w)) ? T{0} : src[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, std::size_t c_in, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
                std::size_t oh, std::size_t ow, int stride, int pad, T* dx) {
  const std::size_t cols = oh * ow;
  for (std::size_t c = 0; c < c_in; ++c) {
    T* plane = dx + c * h * w;
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const T* row = col + ((c * kh + ki) * kw + kj) * cols;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy) * stride - pad + static_cast<long>(ki);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          T* dst = plane + static_cast<std::size_t>(iy) * w;
          const T* src = row + oy * ow;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox) * stride - pad + static_cast<long>(kj);
            if (ix >= 0 && ix < static_cast<long>(w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

template <typename T>
void accumulate(Tape<T>& tape, std::size_t id, const AlignedVector<T>& g) {
  if (!tape.requires_grad(id)) return;
  AlignedVector<T>& buf = tape.grad_buffer(id);
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

}  // namespace

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_tape(a.tape, b.tape);
  require(a.shape() == b.shape(), "add: shape mismatch " + shape_to_string(a.shape()) + " vs " +
                                      shape_to_string(b.shape()));
  Tensor<T> out = a.value();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record("add", std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, std::size_t self) {
    const AlignedVector<T> g = t.grad_buffer(self);
    accumulate(t, ia, g);
    accumulate(t, ib, g);
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_tape(a.tape, b.tape);
  require(a.shape() == b.shape(), "mul: shape mismatch " + shape_to_string(a.shape()) + " vs " +
                                      shape_to_string(b.shape()));
  Tensor<T> out = a.value();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record("mul", std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, std::size_t self) {
    const AlignedVector<T> g = t.grad_buffer(self);
    const auto av = t.value(ia).data();
    const auto bv = t.value(ib).data();
    if (t.requires_grad(ia)) {
      auto& ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(ib)) {
      auto& gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  Tensor<T> out = a.value();
  for (T& v : out.data()) v *= factor;
  const std::size_t ia = a.id;
  return a.tape->record("scale", std::move(out), {ia}, [ia, factor](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    auto& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
  });
}

template <typename T>
Var<T> sum(Var<T> a) {
  T total{0};
  for (T v : a.value().data()) total += v;
  const std::size_t ia = a.id;
  return a.tape->record("sum", Tensor<T>::scalar(total), {ia}, [ia](Tape<T>& t, std::size_t self) {
    const T g = t.grad_buffer(self)[0];
    auto& ga = t.grad_buffer(ia);
    for (T& v : ga) v += g;
  });
}

template <typename T>
Var<T> conv2d(Var<T> input, Var<T> kernel, Var<T> bias, int stride, int padding) {
  require_same_tape(input.tape, kernel.tape);
  require_same_tape(input.tape, bias.tape);
  require_rank(input, 4, "conv2d", "input");
  require_rank(kernel, 4, "conv2d", "kernel");
  require_rank(bias, 1, "conv2d", "bias");
  require(stride >= 1 && padding >= 0, "conv2d: stride must be >= 1 and padding >= 0");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t f = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  require(kernel.dim(1) == c, "conv2d: kernel has " + std::to_string(kernel.dim(1)) +
                                  " input channels, input has " + std::to_string(c));
  require(bias.dim(0) == f, "conv2d: bias length does not match filter count");
  const long ph = static_cast<long>(h) + 2 * padding - static_cast<long>(kh);
  const long pw = static_cast<long>(w) + 2 * padding - static_cast<long>(kw);
  require(ph >= 0 && pw >= 0, "conv2d: kernel " + shape_to_string(kernel.shape()) +
                                  " larger than padded input " + shape_to_string(input.shape()));
  const std::size_t oh = static_cast<std::size_t>(ph / stride + 1);
  const std::size_t ow = static_cast<std::size_t>(pw / stride + 1);
  const std::size_t patch = c * kh * kw, cols = oh * ow;

  Tensor<T> out(Shape{n, f, oh, ow});
  AlignedVector<T> col(patch * cols);
  const auto kmat = as_matrix(kernel.value(), f, patch);
  const auto& bv = bias.value();
  for (std::size_t s = 0; s < n; ++s) {
    im2col(input.value().data().data() + s * c * h * w, c, h, w, kh, kw, oh, ow, stride, padding, col.data());
    MatMap<T> o(out.data().data() + s * f * cols, static_cast<Eigen::Index>(f), static_cast<Eigen::Index>(cols));
    o.noalias() = kmat * as_matrix(col, patch, cols);
    for (std::size_t fi = 0; fi < f; ++fi) o.row(static_cast<Eigen::Index>(fi)).array() += bv[fi];
  }

  const std::size_t ix = input.id, ik = kernel.id, ib = bias.id;
  return input.tape->record(
      "conv2d", std::move(out), {ix, ik, ib},
      [=](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad_buffer(self);
        const bool need_x = t.requires_grad(ix), need_k = t.requires_grad(ik), need_b = t.requires_grad(ib);
        AlignedVector<T> colbuf(patch * cols);
        const auto km = as_matrix(t.value(ik), f, patch);
        for (std::size_t s = 0; s < n; ++s) {
          ConstMatMap<T> gs(g.data() + s * f * cols, static_cast<Eigen::Index>(f), static_cast<Eigen::Index>(cols));
          if (need_b) {
            auto& gb = t.grad_buffer(ib);
            for (std::size_t fi = 0; fi < f; ++fi) gb[fi] += gs.row(static_cast<Eigen::Index>(fi)).sum();
          }
          if (need_k) {
            im2col(t.value(ix).data().data() + s * c * h * w, c, h, w, kh, kw, oh, ow, stride, padding,
                   colbuf.data());
            auto gk = as_matrix(t.grad_buffer(ik), f, patch);
            gk.noalias() += gs * as_matrix(colbuf, patch, cols).transpose();
          }
          if (need_x) {
            auto dcol = as_matrix(colbuf, patch, cols);
            dcol.noalias() = km.transpose() * gs;
            col2im_add(colbuf.data(), c, h, w, kh, kw, oh, ow, stride, padding,
                       t.grad_buffer(ix).data() + s * c * h * w);
          }
        }
      });
}

template <typename T>
Var<T> group_norm(Var<T> x, int groups, Var<T> gamma, Var<T> beta, T eps) {
  require_rank(x, 4, "group_norm", "x");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  require(groups >= 1 && c % static_cast<std::size_t>(groups) == 0,
          "group_norm: " + std::to_string(c) + " channels not divisible by " + std::to_string(groups) + " groups");
  require(gamma.shape() == Shape{c} && beta.shape() == Shape{c}, "group_norm: gamma/beta must have shape [C]");
  const std::size_t g_count = static_cast<std::size_t>(groups), cpg = c / g_count, m = cpg * hw;
  AlignedVector<T> mean(n * g_count), rstd(n * g_count);
  Tensor<T> out(x.shape());
  const auto xv = x.value().data();
  const auto gv = gamma.value().data();
  const auto bv = beta.value().data();
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t g = 0; g < g_count; ++g) {
      const std::size_t base = (s * c + g * cpg) * hw;
      double acc = 0;
      for (std::size_t i = 0; i < m; ++i) acc += xv[base + i];
      const double mu = acc / static_cast<double>(m);
      double var = 0;
      for (std::size_t i = 0; i < m; ++i) {
        const double d = xv[base + i] - mu;
        var += d * d;
      }
      var /= static_cast<double>(m);
      const double r = 1.0 / std::sqrt(var + static_cast<double>(eps));
      mean[s * g_count + g] = static_cast<T>(mu);
      rstd[s * g_count + g] = static_cast<T>(r);
      for (std::size_t ci = 0; ci < cpg; ++ci) {
        const std::size_t ch = g * cpg + ci;
        for (std::size_t p = 0; p < hw; ++p) {
          const std::size_t idx = base + ci * hw + p;
          out[idx] = static_cast<T>((xv[idx] - mu) * r) * gv[ch] + bv[ch];
        }
      }
    }
  }
  const std::size_t ix = x.id, igm = gamma.id, ibt = beta.id;
  return x.tape->record(
      "group_norm", std::move(out), {ix, igm, ibt},
      [=, mean = std::move(mean), rstd = std::move(rstd)](Tape<T>& t, std::size_t self) {
        const auto& gy = t.grad_buffer(self);
        const auto xs = t.value(ix).data();
        const auto gam = t.value(igm).data();
        const bool need_x = t.requires_grad(ix), need_g = t.requires_grad(igm), need_b = t.requires_grad(ibt);
        for (std::size_t s = 0; s < n; ++s) {
          for (std::size_t g = 0; g < g_count; ++g) {
            const std::size_t base = (s * c + g * cpg) * hw;
            const T mu = mean[s * g_count + g], r = rstd[s * g_count + g];
            T sum_dxhat{0}, sum_dxhat_xhat{0};
            for (std::size_t ci = 0; ci < cpg; ++ci) {
              const std::size_t ch = g * cpg + ci;
              T dg{0}, db{0};
              for (std::size_t p = 0; p < hw; ++p) {
                const std::size_t idx = base + ci * hw + p;
                const T xhat = (xs[idx] - mu) * r;
                dg += gy[idx] * xhat;
                db += gy[idx];
                const T dxhat = gy[idx] * gam[ch];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
              }
              if (need_g) t.grad_buffer(igm)[ch] += dg;
              if (need_b) t.grad_buffer(ibt)[ch] += db;
            }
            if (!need_x) continue;
            auto& gx = t.grad_buffer(ix);
            const T inv_m = T{1} / static_cast<T>(m);
            const T mean_d = sum_dxhat * inv_m, mean_dx = sum_dxhat_xhat * inv_m;
            for (std::size_t ci = 0; ci < cpg; ++ci) {
              const std::size_t ch = g * cpg + ci;
              for (std::size_t p = 0; p < hw; ++p) {
                const std::size_t idx = base + ci * hw + p;
                const T xhat = (xs[idx] - mu) * r;
                gx[idx] += r * (gy[idx] * gam[ch] - mean_d - xhat * mean_dx);
              }
            }
          }
        }
      });
}

template <typename T>
Var<T> relu(Var<T> x) {
  Tensor<T> out = x.value();
  for (T& v : out.data()) v = v > T{0} ? v : T{0};
  const std::size_t ix = x.id;
  return x.tape->record("relu", std::move(out), {ix}, [ix](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    const auto xv = t.value(ix).data();
    auto& gx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv[i] > T{0}) gx[i] += g[i];
    }
  });
}

template <typename T>
Var<T> max_pool2d(Var<T> x, int kernel, int stride) {
  require_rank(x, 4, "max_pool2d", "x");
  require(kernel >= 1 && stride >= 1, "max_pool2d: kernel and stride must be positive");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t k = static_cast<std::size_t>(kernel), st = static_cast<std::size_t>(stride);
  require(h >= k && w >= k, "max_pool2d: window " + std::to_string(k) + " larger than input " +
                                shape_to_string(x.shape()));
  const std::size_t oh = (h - k) / st + 1, ow = (w - k) / st + 1;
  Tensor<T> out(Shape{n, c, oh, ow});
  std::vector<std::size_t> argmax(out.size());
  const auto xv = x.value().data();
  std::size_t o = 0;
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t base = plane * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox, ++o) {
        std::size_t best = base + oy * st * w + ox * st;
        for (std::size_t ki = 0; ki < k; ++ki) {
          for (std::size_t kj = 0; kj < k; ++kj) {
            const std::size_t idx = base + (oy * st + ki) * w + ox * st + kj;
            if (xv[idx] > xv[best]) best = idx;
          }
        }
        argmax[o] = best;
        out[o] = xv[best];
      }
    }
  }
  const std::size_t ix = x.id;
  return x.tape->record("max_pool2d", std::move(out), {ix},
                        [ix, argmax = std::move(argmax)](Tape<T>& t, std::size_t self) {
                          const auto& g = t.grad_buffer(self);
                          auto& gx = t.grad_buffer(ix);
                          for (std::size_t i = 0; i < g.size(); ++i) gx[argmax[i]] += g[i];
                        });
}

template <typename T>
Var<T> adaptive_avg_pool(Var<T> x, int out_h, int out_w) {
  require_rank(x, 4, "adaptive_avg_pool", "x");
  require(out_h >= 1 && out_w >= 1, "adaptive_avg_pool: target extents must be positive");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = static_cast<std::size_t>(out_h), ow = static_cast<std::size_t>(out_w);
  require(oh <= h && ow <= w, "adaptive_avg_pool: target " + std::to_string(oh) + "x" + std::to_string(ow) +
                                  " exceeds input " + shape_to_string(x.shape()));
  auto row_lo = [=](std::size_t i) { return i * h / oh; };
  auto col_lo = [=](std::size_t j) { return j * w / ow; };
  Tensor<T> out(Shape{n, c, oh, ow});
  const auto xv = x.value().data();
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        T acc{0};
        const std::size_t r0 = row_lo(i), r1 = row_lo(i + 1), c0 = col_lo(j), c1 = col_lo(j + 1);
        for (std::size_t r = r0; r < r1; ++r)
          for (std::size_t q = c0; q < c1; ++q) acc += xv[plane * h * w + r * w + q];
        out[(plane * oh + i) * ow + j] = acc / static_cast<T>((r1 - r0) * (c1 - c0));
      }
    }
  }
  const std::size_t ix = x.id;
  return x.tape->record("adaptive_avg_pool", std::move(out), {ix}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    auto& gx = t.grad_buffer(ix);
    for (std::size_t plane = 0; plane < n * c; ++plane) {
      for (std::size_t i = 0; i < oh; ++i) {
        for (std::size_t j = 0; j < ow; ++j) {
          const std::size_t r0 = row_lo(i), r1 = row_lo(i + 1), c0 = col_lo(j), c1 = col_lo(j + 1);
          const T share = g[(plane * oh + i) * ow + j] / static_cast<T>((r1 - r0) * (c1 - c0));
          for (std::size_t r = r0; r < r1; ++r)
            for (std::size_t q = c0; q < c1; ++q) gx[plane * h * w + r * w + q] += share;
        }
      }
    }
  });
}

template <typename T>
Var<T> to_tokens(Var<T> x) {
  require_rank(x, 4, "to_tokens", "x");
  require(x.dim(0) == 1, "to_tokens: expects a single sample");
  const std::size_t c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out(Shape{hw, c});
  const auto xv = x.value().data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < hw; ++p) out[p * c + ch] = xv[ch * hw + p];
  const std::size_t ix = x.id;
  return x.tape->record("to_tokens", std::move(out), {ix}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    auto& gx = t.grad_buffer(ix);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p) gx[ch * hw + p] += g[p * c + ch];
  });
}

template <typename T>
Var<T> gather_rows(Var<T> x, const std::vector<std::size_t>& order) {
  require_rank(x, 2, "gather_rows", "x");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  require(!order.empty(), "gather_rows: empty row order");
  for (std::size_t r : order) require(r < rows, "gather_rows: row index out of range");
  Tensor<T> out(Shape{order.size(), cols});
  const auto xv = x.value().data();
  for (std::size_t i = 0; i < order.size(); ++i)
    std::copy_n(xv.data() + order[i] * cols, cols, out.data().data() + i * cols);
  const std::size_t ix = x.id;
  return x.tape->record("gather_rows", std::move(out), {ix}, [ix, order, cols](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    auto& gx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < order.size(); ++i)
      for (std::size_t j = 0; j < cols; ++j) gx[order[i] * cols + j] += g[i * cols + j];
  });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias) {
  require_same_tape(x.tape, weight.tape);
  require_same_tape(x.tape, bias.tape);
  require(x.shape().size() >= 1, "linear: input must have rank >= 1");
  require_rank(weight, 2, "linear", "weight");
  require_rank(bias, 1, "linear", "bias");
  const std::size_t din = x.shape().back(), dout = weight.dim(1);
  require(weight.dim(0) == din, "linear: input width " + std::to_string(din) + " does not match weight " +
                                    shape_to_string(weight.shape()));
  require(bias.dim(0) == dout, "linear: bias length does not match weight output width");
  const std::size_t m = x.value().size() / din;
  Shape out_shape = x.shape();
  out_shape.back() = dout;
  Tensor<T> out(out_shape);
  AlignedVector<T>& ov = out.storage();
  auto o = as_matrix(ov, m, dout);
  o.noalias() = as_matrix(x.value(), m, din) * as_matrix(weight.value(), din, dout);
  const auto bv = bias.value().data();
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t j = 0; j < dout; ++j) ov[r * dout + j] += bv[j];
  const std::size_t ix = x.id, iw = weight.id, ib = bias.id;
  return x.tape->record("linear", std::move(out), {ix, iw, ib}, [=](Tape<T>& t, std::size_t self) {
    const auto gy = as_matrix(t.grad_buffer(self), m, dout);
    if (t.requires_grad(iw)) {
      as_matrix(t.grad_buffer(iw), din, dout).noalias() += as_matrix(t.value(ix), m, din).transpose() * gy;
    }
    if (t.requires_grad(ib)) {
      auto& gb = t.grad_buffer(ib);
      for (std::size_t j = 0; j < dout; ++j) gb[j] += gy.col(static_cast<Eigen::Index>(j)).sum();
    }
    if (t.requires_grad(ix)) {
      as_matrix(t.grad_buffer(ix), m, din).noalias() += gy * as_matrix(t.value(iw), din, dout).transpose();
    }
  });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  require(x.shape().size() >= 1, "layer_norm: input must have rank >= 1");
  const std::size_t d = x.shape().back(), m = x.value().size() / d;
  require(gamma.shape() == Shape{d} && beta.shape() == Shape{d}, "layer_norm: gamma/beta must have shape [D]");
  AlignedVector<T> mean(m), rstd(m);
  Tensor<T> out(x.shape());
  const auto xv = x.value().data();
  const auto gv = gamma.value().data();
  const auto bv = beta.value().data();
  for (std::size_t r = 0; r < m; ++r) {
    const T* row = xv.data() + r * d;
    double acc = 0;
    for (std::size_t j = 0; j < d; ++j) acc += row[j];
    const double mu = acc / static_cast<double>(d);
    double var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + static_cast<double>(eps));
    mean[r] = static_cast<T>(mu);
    rstd[r] = static_cast<T>(rs);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = static_cast<T>((row[j] - mu) * rs) * gv[j] + bv[j];
  }
  const std::size_t ix = x.id, igm = gamma.id, ibt = beta.id;
  return x.tape->record(
      "layer_norm", std::move(out), {ix, igm, ibt},
      [=, mean = std::move(mean), rstd = std::move(rstd)](Tape<T>& t, std::size_t self) {
        const auto& gy = t.grad_buffer(self);
        const auto xs = t.value(ix).data();
        const auto gam = t.value(igm).data();
        const bool need_x = t.requires_grad(ix), need_g = t.requires_grad(igm), need_b = t.requires_grad(ibt);
        for (std::size_t r = 0; r < m; ++r) {
          T sum_d{0}, sum_dx{0};
          for (std::size_t j = 0; j < d; ++j) {
            const std::size_t idx = r * d + j;
            const T xhat = (xs[idx] - mean[r]) * rstd[r];
            if (need_g) t.grad_buffer(igm)[j] += gy[idx] * xhat;
            if (need_b) t.grad_buffer(ibt)[j] += gy[idx];
            sum_d += gy[idx] * gam[j];
            sum_dx += gy[idx] * gam[j] * xhat;
          }
          if (!need_x) continue;
          auto& gx = t.grad_buffer(ix);
          const T inv_d = T{1} / static_cast<T>(d);
          for (std::size_t j = 0; j < d; ++j) {
            const std::size_t idx = r * d + j;
            const T xhat = (xs[idx] - mean[r]) * rstd[r];
            gx[idx] += rstd[r] * (gy[idx] * gam[j] - sum_d * inv_d - xhat * sum_dx * inv_d);
          }
        }
      });
}

namespace {

template <typename T>
void softmax_rows(const T* in, T* out, std::size_t rows, std::size_t d) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = in + r * d;
    T* y = out + r * d;
    const T mx = *std::max_element(x, x + d);
    T total{0};
    for (std::size_t j = 0; j < d; ++j) {
      y[j] = std::exp(x[j] - mx);
      total += y[j];
    }
    for (std::size_t j = 0; j < d; ++j) y[j] /= total;
  }
}

// dx = y * (dy - sum(dy * y)) per row, accumulated into dx.
template <typename T>
void softmax_rows_backward(const T* y, const T* dy, T* dx, std::size_t rows, std::size_t d) {
  for (std::size_t r = 0; r < rows; ++r) {
    T dot{0};
    for (std::size_t j = 0; j < d; ++j) dot += dy[r * d + j] * y[r * d + j];
    for (std::size_t j = 0; j < d; ++j) dx[r * d + j] += y[r * d + j] * (dy[r * d + j] - dot);
  }
}

}  // namespace

template <typename T>
Var<T> softmax(Var<T> x) {
  const std::size_t d = x.shape().empty() ? 1 : x.shape().back();
  const std::size_t rows = x.value().size() / d;
  Tensor<T> out(x.shape());
  softmax_rows(x.value().data().data(), out.data().data(), rows, d);
  const std::size_t ix = x.id;
  return x.tape->record("softmax", std::move(out), {ix}, [=](Tape<T>& t, std::size_t self) {
    softmax_rows_backward(t.value(self).data().data(), t.grad_buffer(self).data(), t.grad_buffer(ix).data(), rows,
                          d);
  });
}

template <typename T>
Var<T> scaled_dot_attention(Var<T> q, Var<T> k, Var<T> v) {
  require_same_tape(q.tape, k.tape);
  require_same_tape(q.tape, v.tape);
  require_rank(q, 2, "scaled_dot_attention", "Q");
  require_rank(k, 2, "scaled_dot_attention", "K");
  require_rank(v, 2, "scaled_dot_attention", "V");
  const std::size_t lq = q.dim(0), dk = q.dim(1), lk = k.dim(0), dv = v.dim(1);
  require(k.dim(1) == dk, "scaled_dot_attention: Q and K key widths differ");
  require(v.dim(0) == lk, "scaled_dot_attention: K and V sequence lengths differ");
  const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(dk));
  AlignedVector<T> attn(lq * lk);
  {
    AlignedVector<T> logits(lq * lk);
    auto s = as_matrix(logits, lq, lk);
    s.noalias() = as_matrix(q.value(), lq, dk) * as_matrix(k.value(), lk, dk).transpose();
    s *= inv_sqrt;
    softmax_rows(logits.data(), attn.data(), lq, lk);
  }
  Tensor<T> out(Shape{lq, dv});
  as_matrix(out.storage(), lq, dv).noalias() = as_matrix(attn, lq, lk) * as_matrix(v.value(), lk, dv);
  const std::size_t iq = q.id, ik = k.id, iv = v.id;
  return q.tape->record(
      "scaled_dot_attention", std::move(out), {iq, ik, iv},
      [=, attn = std::move(attn)](Tape<T>& t, std::size_t self) {
        const auto go = as_matrix(t.grad_buffer(self), lq, dv);
        const auto a = as_matrix(attn, lq, lk);
        if (t.requires_grad(iv)) as_matrix(t.grad_buffer(iv), lk, dv).noalias() += a.transpose() * go;
        if (!t.requires_grad(iq) && !t.requires_grad(ik)) return;
        AlignedVector<T> da(lq * lk), ds(lq * lk, T{0});
        as_matrix(da, lq, lk).noalias() = go * as_matrix(t.value(iv), lk, dv).transpose();
        softmax_rows_backward(attn.data(), da.data(), ds.data(), lq, lk);
        auto dsm = as_matrix(ds, lq, lk);
        dsm *= inv_sqrt;
        if (t.requires_grad(iq)) as_matrix(t.grad_buffer(iq), lq, dk).noalias() += dsm * as_matrix(t.value(ik), lk, dk);
        if (t.requires_grad(ik))
          as_matrix(t.grad_buffer(ik), lk, dk).noalias() += dsm.transpose() * as_matrix(t.value(iq), lq, dk);
      });
}

template <typename T>
Var<T> slice_cols(Var<T> x, std::size_t begin, std::size_t end) {
  require_rank(x, 2, "slice_cols", "x");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  require(begin < end && end <= cols, "slice_cols: invalid column range");
  const std::size_t w = end - begin;
  Tensor<T> out(Shape{rows, w});
  const auto xv = x.value().data();
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(xv.data() + r * cols + begin, w, out.data().data() + r * w);
  const std::size_t ix = x.id;
  return x.tape->record("slice_cols", std::move(out), {ix}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    auto& gx = t.grad_buffer(ix);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < w; ++j) gx[r * cols + begin + j] += g[r * w + j];
  });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const std::size_t rows = parts.front().dim(0);
  std::size_t total = 0;
  std::vector<std::size_t> ids, widths;
  for (const auto& p : parts) {
    require_same_tape(parts.front().tape, p.tape);
    require_rank(p, 2, "concat_cols", "part");
    require(p.dim(0) == rows, "concat_cols: row counts differ");
    ids.push_back(p.id);
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  Tensor<T> out(Shape{rows, total});
  std::size_t off = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto pv = parts[i].value().data();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(pv.data() + r * widths[i], widths[i], out.data().data() + r * total + off);
    off += widths[i];
  }
  return parts.front().tape->record("concat_cols", std::move(out), ids, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    std::size_t o = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (t.requires_grad(ids[i])) {
        auto& gp = t.grad_buffer(ids[i]);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < widths[i]; ++j) gp[r * widths[i] + j] += g[r * total + o + j];
      }
      o += widths[i];
    }
  });
}

template <typename T>
Var<T> mean_rows(Var<T> x) {
  require_rank(x, 2, "mean_rows", "x");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  Tensor<T> out(Shape{1, cols});
  const auto xv = x.value().data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < cols; ++j) out[j] += xv[r * cols + j];
  for (T& v : out.data()) v /= static_cast<T>(rows);
  const std::size_t ix = x.id;
  return x.tape->record("mean_rows", std::move(out), {ix}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    auto& gx = t.grad_buffer(ix);
    const T inv = T{1} / static_cast<T>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < cols; ++j) gx[r * cols + j] += g[j] * inv;
  });
}

template <typename T>
Var<T> cross_entropy_loss(Var<T> probs, const Tensor<T>& targets, LossMode mode, bool strict) {
  require_rank(probs, 2, "cross_entropy_loss", "Y");
  require(probs.shape() == targets.shape(), "cross_entropy_loss: Y " + shape_to_string(probs.shape()) +
                                                " and T " + shape_to_string(targets.shape()) + " differ");
  const std::size_t n = probs.dim(0), k = probs.dim(1);
  if (strict) {
    for (std::size_t r = 0; r < n; ++r) {
      std::size_t ones = 0;
      for (std::size_t j = 0; j < k; ++j) {
        const T v = targets[r * k + j];
        if (v == T{1}) {
          ++ones;
        } else if (v != T{0}) {
          ones = 2;
          break;
        }
      }
      if (ones != 1) throw ShapeError("cross_entropy_loss: target row " + std::to_string(r) + " is not one-hot");
    }
  }
  const T lo = static_cast<T>(kLossClampEps), hi = T{1} - static_cast<T>(kLossClampEps);
  const auto yv = probs.value().data();
  double loss = 0;
  for (std::size_t i = 0; i < n * k; ++i) {
    const double y = std::clamp(yv[i], lo, hi);
    const double tv = targets[i];
    loss += tv * std::log(y);
    if (mode == LossMode::kBinaryPerClass) loss += (1.0 - tv) * std::log(1.0 - y);
  }
  loss = -loss / static_cast<double>(n);
  const std::size_t iy = probs.id;
  return probs.tape->record(
      "cross_entropy_loss", Tensor<T>::scalar(static_cast<T>(loss)), {iy},
      [=](Tape<T>& t, std::size_t self) {
        const T g = t.grad_buffer(self)[0];
        const auto ys = t.value(iy).data();
        auto& gy = t.grad_buffer(iy);
        const T inv_n = T{1} / static_cast<T>(n);
        for (std::size_t i = 0; i < n * k; ++i) {
          if (ys[i] < lo || ys[i] > hi) continue;
          const T tv = targets[i];
          T d = -tv / ys[i];
          if (mode == LossMode::kBinaryPerClass) d += (T{1} - tv) / (T{1} - ys[i]);
          gy[i] += g * d * inv_n;
        }
      });
}

template <typename T>
Var<T> multi_head_attention(Var<T> x, const AttentionWeights<T>& w, int num_heads) {
  require_rank(x, 2, "multi_head_attention", "x");
  require(num_heads >= 1, "multi_head_attention: head count must be positive");
  const std::size_t heads = static_cast<std::size_t>(num_heads);
  const std::size_t qk = w.wq.dim(1), vd = w.wv.dim(1);
  require(w.wk.dim(1) == qk, "multi_head_attention: query and key projection widths differ");
  require(qk % heads == 0 && vd % heads == 0, "multi_head_attention: projection widths " + std::to_string(qk) +
                                                  "/" + std::to_string(vd) + " not divisible by " +
                                                  std::to_string(heads) + " heads");
  require(w.wo.dim(0) == vd, "multi_head_attention: output weight rows must equal the value width");
  const Var<T> q = linear(x, w.wq, w.bq);
  const Var<T> k = linear(x, w.wk, w.bk);
  const Var<T> v = linear(x, w.wv, w.bv);
  const std::size_t qh = qk / heads, vh = vd / heads;
  std::vector<Var<T>> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    outs.push_back(scaled_dot_attention(slice_cols(q, h * qh, (h + 1) * qh), slice_cols(k, h * qh, (h + 1) * qh),
                                        slice_cols(v, h * vh, (h + 1) * vh)));
  }
  const Var<T> merged = heads == 1 ? outs.front() : concat_cols(outs);
  return linear(merged, w.wo, w.bo);
}

#define VEINATN_INSTANTIATE_OPS(T)                                                              \
  template Var<T> add(Var<T>, Var<T>);                                                          \
  template Var<T> mul(Var<T>, Var<T>);                                                          \
  template Var<T> scale(Var<T>, T);                                                             \
  template Var<T> sum(Var<T>);                                                                  \
  template Var<T> conv2d(Var<T>, Var<T>, Var<T>, int, int);                                     \
  template Var<T> group_norm(Var<T>, int, Var<T>, Var<T>, T);                                   \
  template Var<T> relu(Var<T>);                                                                 \
  template Var<T> max_pool2d(Var<T>, int, int);                                                 \
  template Var<T> adaptive_avg_pool(Var<T>, int, int);                                          \
  template Var<T> to_tokens(Var<T>);                                                            \
  template Var<T> gather_rows(Var<T>, const std::vector<std::size_t>&);                         \
  template Var<T> linear(Var<T>, Var<T>, Var<T>);                                               \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, T);                                        \
  template Var<T> softmax(Var<T>);                                                              \
  template Var<T> scaled_dot_attention(Var<T>, Var<T>, Var<T>);                                 \
  template Var<T> slice_cols(Var<T>, std::size_t, std::size_t);                                 \
  template Var<T> concat_cols(const std::vector<Var<T>>&);                                      \
  template Var<T> mean_rows(Var<T>);                                                            \
  template Var<T> cross_entropy_loss(Var<T>, const Tensor<T>&, LossMode, bool);                 \
  template Var<T> multi_head_attention(Var<T>, const AttentionWeights<T>&, int);

VEINATN_INSTANTIATE_OPS(float)
VEINATN_INSTANTIATE_OPS(double)

#undef VEINATN_INSTANTIATE_OPS

}  // namespace veinatn
