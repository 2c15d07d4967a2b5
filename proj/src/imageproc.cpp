// SPDX-License-Identifier: Apache-2.0

#include "veinatn/imageproc.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include "veinatn/rng.hpp"

namespace veinatn {
namespace {

std::uint8_t clamp_u8(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

using Lut = std::array<std::uint8_t, 256>;

Lut identity_lut() {
  Lut lut{};
  for (int v = 0; v < 256; ++v) lut[v] = static_cast<std::uint8_t>(v);
  return lut;
}

Lut tile_mapping(std::array<std::uint32_t, 256> hist, std::uint64_t pixels, double clip_limit) {
  if (std::count_if(hist.begin(), hist.end(), [](std::uint32_t h) { return h > 0; }) <= 1) return identity_lut();
  if (std::isfinite(clip_limit)) {
    const auto limit = std::max<std::uint64_t>(
        1, static_cast<std::uint64_t>(std::floor(clip_limit * static_cast<double>(pixels) / 256.0)));
    std::uint64_t excess = 0;
    for (auto& h : hist) {
      if (h > limit) {
        excess += h - limit;
        h = static_cast<std::uint32_t>(limit);
      }
    }
    const std::uint64_t each = excess / 256;
    std::uint64_t rem = excess % 256;
    for (auto& h : hist) h += static_cast<std::uint32_t>(each);
    if (rem > 0) {
      const std::uint64_t step = std::max<std::uint64_t>(1, 256 / rem);
      for (std::uint64_t i = 0; i < 256 && rem > 0; i += step, --rem) ++hist[i];
    }
  }
  Lut lut{};
  std::uint64_t cdf = 0, cdf_min = 0;
  std::array<std::uint64_t, 256> cum{};
  for (int v = 0; v < 256; ++v) {
    cdf += hist[v];
    cum[v] = cdf;
    if (cdf_min == 0 && cdf > 0) cdf_min = cdf;
  }
  if (cdf == cdf_min) return identity_lut();
  const double denom = static_cast<double>(cdf - cdf_min);
  for (int v = 0; v < 256; ++v) {
    const double num = cum[v] > cdf_min ? static_cast<double>(cum[v] - cdf_min) : 0.0;
    lut[v] = clamp_u8(255.0 * num / denom);
  }
  return lut;
}

struct Blend {
  int lo, hi;
  double w;  // weight of hi
};

// Interpolation coordinates along one axis for tile partitions of `extent`
// pixels into `tiles` parts.
std::vector<Blend> axis_blend(int extent, int tiles) {
  std::vector<double> centers(static_cast<std::size_t>(tiles));
  for (int i = 0; i < tiles; ++i) {
    const long a = static_cast<long>(i) * extent / tiles, b = static_cast<long>(i + 1) * extent / tiles;
    centers[static_cast<std::size_t>(i)] = 0.5 * static_cast<double>(a + b);
  }
  std::vector<Blend> out(static_cast<std::size_t>(extent));
  for (int p = 0; p < extent; ++p) {
    const double pos = p + 0.5;
    if (pos <= centers.front()) {
      out[static_cast<std::size_t>(p)] = {0, 0, 0.0};
    } else if (pos >= centers.back()) {
      out[static_cast<std::size_t>(p)] = {tiles - 1, tiles - 1, 0.0};
    } else {
      int i = 0;
      while (centers[static_cast<std::size_t>(i + 1)] <= pos) ++i;
      const double c0 = centers[static_cast<std::size_t>(i)], c1 = centers[static_cast<std::size_t>(i + 1)];
      out[static_cast<std::size_t>(p)] = {i, i + 1, (pos - c0) / (c1 - c0)};
    }
  }
  return out;
}

double sample_bilinear(const GrayImage& img, double x, double y) {
  x = std::clamp(x, 0.0, static_cast<double>(img.width() - 1));
  y = std::clamp(y, 0.0, static_cast<double>(img.height() - 1));
  const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
  const int x1 = std::min(x0 + 1, img.width() - 1), y1 = std::min(y0 + 1, img.height() - 1);
  const double fx = x - x0, fy = y - y0;
  const double top = img.at(x0, y0) * (1 - fx) + img.at(x1, y0) * fx;
  const double bot = img.at(x0, y1) * (1 - fx) + img.at(x1, y1) * fx;
  return top * (1 - fy) + bot * fy;
}

// Inverse-maps each output pixel through `src_of(x, y)`.
template <typename F>
GrayImage remap(const GrayImage& img, F src_of) {
  GrayImage out(img.width(), img.height());
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      const auto [sx, sy] = src_of(static_cast<double>(x), static_cast<double>(y));
      out.at(x, y) = clamp_u8(sample_bilinear(img, sx, sy));
    }
  }
  return out;
}

}  // namespace

GrayImage clahe(const GrayImage& img, const ClaheParams& params) {
  if (params.tiles_x < 1 || params.tiles_y < 1) throw ConfigError("clahe: tile counts must be >= 1");
  if (!(params.clip_limit > 0)) throw ConfigError("clahe: clip limit must be positive");
  if (img.empty() || img.width() < params.tiles_x || img.height() < params.tiles_y) {
    throw ShapeError("clahe: image " + std::to_string(img.width()) + "x" + std::to_string(img.height()) +
                     " has fewer pixels than tiles per axis");
  }
  const int tx = params.tiles_x, ty = params.tiles_y, w = img.width(), h = img.height();
  std::vector<Lut> luts(static_cast<std::size_t>(tx * ty));
  for (int j = 0; j < ty; ++j) {
    const int y0 = static_cast<int>(static_cast<long>(j) * h / ty), y1 = static_cast<int>(static_cast<long>(j + 1) * h / ty);
    for (int i = 0; i < tx; ++i) {
      const int x0 = static_cast<int>(static_cast<long>(i) * w / tx), x1 = static_cast<int>(static_cast<long>(i + 1) * w / tx);
      std::array<std::uint32_t, 256> hist{};
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) ++hist[img.at(x, y)];
      luts[static_cast<std::size_t>(j * tx + i)] =
          tile_mapping(hist, static_cast<std::uint64_t>(x1 - x0) * (y1 - y0), params.clip_limit);
    }
  }
  const auto bx = axis_blend(w, tx), by = axis_blend(h, ty);
  GrayImage out(w, h);
  for (int y = 0; y < h; ++y) {
    const Blend& vy = by[static_cast<std::size_t>(y)];
    for (int x = 0; x < w; ++x) {
      const Blend& vx = bx[static_cast<std::size_t>(x)];
      const std::uint8_t v = img.at(x, y);
      auto lut = [&](int ti, int tj) { return static_cast<double>(luts[static_cast<std::size_t>(tj * tx + ti)][v]); };
      const double top = lut(vx.lo, vy.lo) * (1 - vx.w) + lut(vx.hi, vy.lo) * vx.w;
      const double bot = lut(vx.lo, vy.hi) * (1 - vx.w) + lut(vx.hi, vy.hi) * vx.w;
      out.at(x, y) = clamp_u8(top * (1 - vy.w) + bot * vy.w);
    }
  }
  return out;
}

GrayImage resize_bilinear(const GrayImage& img, int out_w, int out_h) {
  if (out_w <= 0 || out_h <= 0) throw ShapeError("resize: target extents must be positive");
  if (img.empty()) throw ShapeError("resize: empty image");
  if (out_w == img.width() && out_h == img.height()) return img;
  const double sx = static_cast<double>(img.width()) / out_w, sy = static_cast<double>(img.height()) / out_h;
  GrayImage out(out_w, out_h);
  for (int y = 0; y < out_h; ++y) {
    const double src_y = (y + 0.5) * sy - 0.5;
    for (int x = 0; x < out_w; ++x) {
      out.at(x, y) = clamp_u8(sample_bilinear(img, (x + 0.5) * sx - 0.5, src_y));
    }
  }
  return out;
}

template <typename T>
Tensor<T> to_network_input(const GrayImage& img, int size) {
  const GrayImage r = resize_bilinear(img, size, size);
  const std::size_t plane = static_cast<std::size_t>(size) * size;
  Tensor<T> out(Shape{1, 3, static_cast<std::size_t>(size), static_cast<std::size_t>(size)});
  for (std::size_t i = 0; i < plane; ++i) {
    const T v = static_cast<T>(r.pixels()[i]) / T{255};
    out[i] = v;
    out[plane + i] = v;
    out[2 * plane + i] = v;
  }
  return out;
}

template Tensor<float> to_network_input<float>(const GrayImage&, int);
template Tensor<double> to_network_input<double>(const GrayImage&, int);

GrayImage flip_horizontal(const GrayImage& img) {
  GrayImage out(img.width(), img.height());
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) out.at(x, y) = img.at(img.width() - 1 - x, y);
  return out;
}

GrayImage flip_vertical(const GrayImage& img) {
  GrayImage out(img.width(), img.height());
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) out.at(x, y) = img.at(x, img.height() - 1 - y);
  return out;
}

GrayImage translate(const GrayImage& img, int dx, int dy) {
  GrayImage out(img.width(), img.height());
  for (int y = 0; y < img.height(); ++y) {
    const int sy = std::clamp(y - dy, 0, img.height() - 1);
    for (int x = 0; x < img.width(); ++x) out.at(x, y) = img.at(std::clamp(x - dx, 0, img.width() - 1), sy);
  }
  return out;
}

GrayImage rotate(const GrayImage& img, double degrees) {
  const double rad = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(rad), s = std::sin(rad);
  const double cx = (img.width() - 1) / 2.0, cy = (img.height() - 1) / 2.0;
  return remap(img, [&](double x, double y) {
    const double ux = x - cx, uy = y - cy;
    return std::pair{c * ux + s * uy + cx, -s * ux + c * uy + cy};
  });
}

GrayImage scale_about_center(const GrayImage& img, double factor) {
  if (!(factor > 0)) throw ConfigError("scale factor must be positive");
  const double cx = (img.width() - 1) / 2.0, cy = (img.height() - 1) / 2.0;
  return remap(img, [&](double x, double y) { return std::pair{(x - cx) / factor + cx, (y - cy) / factor + cy}; });
}

GrayImage add_gaussian_noise(const GrayImage& img, double sigma, std::uint64_t seed) {
  Rng rng(seed);
  GrayImage out = img;
  for (auto& p : out.pixels()) p = clamp_u8(p + rng.normal(0.0, sigma));
  return out;
}

std::string_view augmentation_name(Augmentation a) {
  switch (a) {
    case Augmentation::kFlipHorizontal: return "flip_h";
    case Augmentation::kFlipVertical: return "flip_v";
    case Augmentation::kTranslate: return "translate";
    case Augmentation::kRotatePositive: return "rotate_pos";
    case Augmentation::kRotateNegative: return "rotate_neg";
    case Augmentation::kScale: return "scale";
    case Augmentation::kNoiseSigma2: return "noise_s2";
    case Augmentation::kNoiseSigma5: return "noise_s5";
    case Augmentation::kNoiseSigma10: return "noise_s10";
  }
  return "unknown";
}

GrayImage augment_variant(const GrayImage& img, std::uint64_t seed, Augmentation which) {
  const auto index = static_cast<std::uint64_t>(which);
  Rng rng(derive_seed(seed, {0xa06u, index}));
  switch (which) {
    case Augmentation::kFlipHorizontal: return flip_horizontal(img);
    case Augmentation::kFlipVertical: return flip_vertical(img);
    case Augmentation::kTranslate: {
      const int dx = static_cast<int>(std::lround(rng.uniform(-0.1, 0.1) * img.width()));
      const int dy = static_cast<int>(std::lround(rng.uniform(-0.1, 0.1) * img.height()));
      return translate(img, dx, dy);
    }
    case Augmentation::kRotatePositive: return rotate(img, rng.uniform(1.0, 10.0));
    case Augmentation::kRotateNegative: return rotate(img, -rng.uniform(1.0, 10.0));
    case Augmentation::kScale: return scale_about_center(img, rng.uniform(0.9, 1.1));
    case Augmentation::kNoiseSigma2: return add_gaussian_noise(img, 2.0, rng.next());
    case Augmentation::kNoiseSigma5: return add_gaussian_noise(img, 5.0, rng.next());
    case Augmentation::kNoiseSigma10: return add_gaussian_noise(img, 10.0, rng.next());
  }
  throw ConfigError("unknown augmentation");
}

std::vector<GrayImage> augment(const GrayImage& img, std::uint64_t seed) {
  std::vector<GrayImage> out;
  out.reserve(kAugmentCount);
  for (int i = 0; i < kAugmentCount; ++i) out.push_back(augment_variant(img, seed, static_cast<Augmentation>(i)));
  return out;
}

}  // namespace veinatn
