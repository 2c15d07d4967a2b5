// SPDX-License-Identifier: Apache-2.0
// Independent reference implementations used by the unit and acceptance
// tests. None of them call into the code they check.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <functional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "veinatn/autodiff.hpp"
#include "veinatn/image.hpp"
#include "veinatn/rng.hpp"
#include "veinatn/tensor.hpp"

namespace veinatn::testing {

inline Tensor<double> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  Rng rng(seed);
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

inline GrayImage random_image(int w, int h, std::uint64_t seed, int lo = 0, int hi = 255) {
  GrayImage img(w, h);
  Rng rng(seed);
  for (auto& p : img.pixels()) p = static_cast<std::uint8_t>(lo + static_cast<int>(rng.below(hi - lo + 1)));
  return img;
}

// ---------------------------------------------------------------------------
// Finite differences

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // elements whose step crosses a kink
};

// Per-element error |a - n| / max(|a|, |n|, floor * scale), where scale is
// the largest numeric gradient magnitude over all checked inputs.
inline double grad_rel_error(double a, double n, double scale, double floor) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor * scale, 1e-300});
}

using ScalarGraph = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

// Compares reverse-mode gradients with central differences. `elements`
// optionally restricts the check to (input, index) pairs.
inline GradCheckResult gradcheck(const ScalarGraph& graph, const std::vector<Tensor<double>>& inputs,
                                 double step = 1e-4, double floor = 1e-3,
                                 const std::vector<std::pair<std::size_t, std::size_t>>* elements = nullptr) {
  std::vector<Tensor<double>> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& t : inputs) vars.push_back(tape.leaf(t, true));
    tape.backward(graph(tape, vars));
    for (const auto& v : vars) analytic.push_back(tape.grad(v));
  }
  auto eval = [&](const std::vector<Tensor<double>>& in) {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& t : in) vars.push_back(tape.leaf(t, false));
    return graph(tape, vars).value().item();
  };
  std::vector<std::pair<std::size_t, std::size_t>> all;
  if (!elements) {
    for (std::size_t i = 0; i < inputs.size(); ++i)
      for (std::size_t j = 0; j < inputs[i].size(); ++j) all.emplace_back(i, j);
    elements = &all;
  }
  std::vector<double> numeric(elements->size());
  std::vector<Tensor<double>> work = inputs;
  for (std::size_t e = 0; e < elements->size(); ++e) {
    const auto [i, j] = (*elements)[e];
    const double x0 = work[i][j];
    work[i][j] = x0 + step;
    const double fp = eval(work);
    work[i][j] = x0 - step;
    const double fm = eval(work);
    work[i][j] = x0;
    numeric[e] = (fp - fm) / (2.0 * step);
  }
  double scale = 0.0;
  for (double n : numeric) scale = std::max(scale, std::abs(n));
  GradCheckResult r;
  for (std::size_t e = 0; e < elements->size(); ++e) {
    const auto [i, j] = (*elements)[e];
    r.max_rel_error = std::max(r.max_rel_error, grad_rel_error(analytic[i][j], numeric[e], scale, floor));
    ++r.checked;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Convolution: direct six-loop cross-correlation with zero padding.

template <typename T>
Tensor<T> naive_conv2d(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& b, int stride, int pad) {
  const long n = static_cast<long>(x.dim(0)), c = static_cast<long>(x.dim(1)), h = static_cast<long>(x.dim(2)),
             w = static_cast<long>(x.dim(3));
  const long f = static_cast<long>(k.dim(0)), kh = static_cast<long>(k.dim(2)), kw = static_cast<long>(k.dim(3));
  const long oh = (h + 2 * pad - kh) / stride + 1, ow = (w + 2 * pad - kw) / stride + 1;
  Tensor<T> out(Shape{static_cast<std::size_t>(n), static_cast<std::size_t>(f), static_cast<std::size_t>(oh),
                      static_cast<std::size_t>(ow)});
  for (long s = 0; s < n; ++s)
    for (long fo = 0; fo < f; ++fo)
      for (long i = 0; i < oh; ++i)
        for (long j = 0; j < ow; ++j) {
          double acc = static_cast<double>(b[static_cast<std::size_t>(fo)]);
          for (long ci = 0; ci < c; ++ci)
            for (long u = 0; u < kh; ++u)
              for (long v = 0; v < kw; ++v) {
                const long y = i * stride - pad + u, xx = j * stride - pad + v;
                if (y < 0 || y >= h || xx < 0 || xx >= w) continue;
                acc += static_cast<double>(x[static_cast<std::size_t>(((s * c + ci) * h + y) * w + xx)]) *
                       static_cast<double>(k[static_cast<std::size_t>(((fo * c + ci) * kh + u) * kw + v)]);
              }
          out[static_cast<std::size_t>(((s * f + fo) * oh + i) * ow + j)] = static_cast<T>(acc);
        }
  return out;
}

// ---------------------------------------------------------------------------
// Global histogram equalization by direct CDF mapping.

inline GrayImage global_he(const GrayImage& img) {
  std::array<std::uint64_t, 256> hist{};
  for (auto p : img.pixels()) ++hist[p];
  std::array<std::uint64_t, 256> cdf{};
  std::uint64_t run = 0;
  for (int v = 0; v < 256; ++v) cdf[v] = run += hist[v];
  std::uint64_t cdf_min = 0;
  for (int v = 0; v < 256; ++v) {
    if (cdf[v] > 0) {
      cdf_min = cdf[v];
      break;
    }
  }
  const std::uint64_t total = img.pixels().size();
  GrayImage out = img;
  for (auto& p : out.pixels()) {
    if (total == cdf_min) continue;  // single grey level stays put
    const double mapped = 255.0 * static_cast<double>(cdf[p] - cdf_min) / static_cast<double>(total - cdf_min);
    p = static_cast<std::uint8_t>(std::lround(mapped));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Verification metrics by exhaustive threshold sweep.

struct BruteRates {
  double fmr, fnmr;
};

inline BruteRates brute_rates(const std::vector<double>& gen, const std::vector<double>& imp, double t) {
  std::size_t fa = 0, fr = 0;
  for (double s : imp)
    if (s >= t) ++fa;
  for (double s : gen)
    if (s < t) ++fr;
  return {static_cast<double>(fa) / static_cast<double>(imp.size()),
          static_cast<double>(fr) / static_cast<double>(gen.size())};
}

inline std::vector<double> brute_thresholds(const std::vector<double>& gen, const std::vector<double>& imp) {
  std::set<double> s(gen.begin(), gen.end());
  s.insert(imp.begin(), imp.end());
  return {s.begin(), s.end()};
}

struct BruteEer {
  double eer, threshold;
};

// Minimizes |FMR - FNMR| exactly by comparing fa*ng with fr*ni.
inline BruteEer brute_eer(const std::vector<double>& gen, const std::vector<double>& imp) {
  BruteEer best{0, 0};
  long double best_gap = -1;
  for (double t : brute_thresholds(gen, imp)) {
    long fa = 0, fr = 0;
    for (double s : imp) fa += s >= t;
    for (double s : gen) fr += s < t;
    const long double gap = std::abs(static_cast<long double>(fa) * static_cast<long double>(gen.size()) -
                                     static_cast<long double>(fr) * static_cast<long double>(imp.size()));
    if (best_gap < 0 || gap < best_gap) {
      best_gap = gap;
      best.threshold = t;
      best.eer = (static_cast<double>(fa) / static_cast<double>(imp.size()) +
                  static_cast<double>(fr) / static_cast<double>(gen.size())) /
                 2.0;
    }
  }
  return best;
}

struct BruteTar {
  double tar, threshold;
};

inline BruteTar brute_tar(const std::vector<double>& gen, const std::vector<double>& imp, double target) {
  auto th = brute_thresholds(gen, imp);
  th.push_back(std::nextafter(th.back(), INFINITY));
  for (double t : th) {
    const auto r = brute_rates(gen, imp, t);
    if (r.fmr <= target) return {1.0 - r.fnmr, t};
  }
  return {0.0, th.back()};
}

// Same definition as brute_tar for large sets: candidate thresholds are
// sorted once and the smallest passing one is found by binary search.
inline BruteTar sorted_tar(std::vector<double> gen, std::vector<double> imp, double target) {
  std::sort(gen.begin(), gen.end());
  std::sort(imp.begin(), imp.end());
  auto th = brute_thresholds(gen, imp);
  th.push_back(std::nextafter(th.back(), INFINITY));
  auto fmr = [&](double t) {
    const auto above = imp.end() - std::lower_bound(imp.begin(), imp.end(), t);
    return static_cast<double>(above) / static_cast<double>(imp.size());
  };
  std::size_t lo = 0, hi = th.size() - 1;  // fmr(th[hi]) == 0
  while (lo < hi) {
    const std::size_t mid = (lo + hi) / 2;
    if (fmr(th[mid]) <= target) hi = mid; else lo = mid + 1;
  }
  const auto rejected = std::lower_bound(gen.begin(), gen.end(), th[lo]) - gen.begin();
  return {1.0 - static_cast<double>(rejected) / static_cast<double>(gen.size()), th[lo]};
}

// ---------------------------------------------------------------------------
// Weighted ridge by explicit Gauss-Jordan inversion.

inline std::vector<std::vector<double>> invert(std::vector<std::vector<double>> a) {
  const std::size_t n = a.size();
  std::vector<std::vector<double>> inv(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) inv[i][i] = 1.0;
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(a[r][c]) > std::abs(a[piv][c])) piv = r;
    std::swap(a[c], a[piv]);
    std::swap(inv[c], inv[piv]);
    const double d = a[c][c];
    for (std::size_t j = 0; j < n; ++j) {
      a[c][j] /= d;
      inv[c][j] /= d;
    }
    for (std::size_t r = 0; r < n; ++r) {
      if (r == c) continue;
      const double m = a[r][c];
      if (m == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) {
        a[r][j] -= m * a[c][j];
        inv[r][j] -= m * inv[c][j];
      }
    }
  }
  return inv;
}

// Coefficients of the weighted, centred ridge problem.
inline std::vector<double> ridge_oracle(const std::vector<std::vector<double>>& x, const std::vector<double>& y,
                                        const std::vector<double>& w, double lambda) {
  const std::size_t n = x.size(), d = x[0].size();
  double wsum = 0;
  for (double v : w) wsum += v;
  std::vector<double> xbar(d, 0.0);
  double ybar = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) xbar[j] += w[i] * x[i][j] / wsum;
    ybar += w[i] * y[i] / wsum;
  }
  std::vector<std::vector<double>> a(d, std::vector<double>(d, 0.0));
  std::vector<double> b(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const double xj = x[i][j] - xbar[j];
      b[j] += w[i] * xj * (y[i] - ybar);
      for (std::size_t k = 0; k < d; ++k) a[j][k] += w[i] * xj * (x[i][k] - xbar[k]);
    }
  for (std::size_t j = 0; j < d; ++j) a[j][j] += lambda;
  const auto inv = invert(a);
  std::vector<double> coef(d, 0.0);
  for (std::size_t j = 0; j < d; ++j)
    for (std::size_t k = 0; k < d; ++k) coef[j] += inv[j][k] * b[k];
  return coef;
}

// ---------------------------------------------------------------------------
// Files

inline std::filesystem::path fresh_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("veinatn_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace veinatn::testing
