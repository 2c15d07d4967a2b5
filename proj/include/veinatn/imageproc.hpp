// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <string_view>
#include <vector>

#include "veinatn/image.hpp"
#include "veinatn/tensor.hpp"

namespace veinatn {

struct ClaheParams {
  int tiles_x = 8;
  int tiles_y = 8;
  // Histogram bins are clipped at clip_limit * tile_pixels / 256. Infinity
  // disables clipping.
  double clip_limit = 2.0;
};

// Contrast limited adaptive histogram equalization.
//
// Each tile of an integer partition of the image gets a 256-bin histogram.
// Bins above the clip limit are cut; the excess is added evenly to all bins
// and the remainder spread round-robin with stride max(1, 256 / remainder).
// The tile mapping is
//   lut[v] = round(255 * (cdf[v] - cdf_min) / (pixels - cdf_min)),
// with cdf_min the first non-zero cdf value, and the identity mapping when a
// tile holds a single grey level. Output pixels interpolate the mappings of
// the four nearest tile centres bilinearly; tiles at the border clamp.
GrayImage clahe(const GrayImage& img, const ClaheParams& params = {});

// Bilinear resampling with half-pixel centre alignment:
//   src = (dst + 0.5) * in / out - 0.5, clamped to the valid range,
// rounded to the nearest integer.
GrayImage resize_bilinear(const GrayImage& img, int out_w, int out_h);

inline constexpr int kNetworkInputSize = 224;

// Resize to size x size, scale to [0,1] and replicate the grey channel
// three times: [1,3,size,size].
template <typename T = float>
Tensor<T> to_network_input(const GrayImage& img, int size = kNetworkInputSize);

inline constexpr int kAugmentCount = 9;

// Variant order returned by augment().
enum class Augmentation : int {
  kFlipHorizontal = 0,
  kFlipVertical,
  kTranslate,
  kRotatePositive,
  kRotateNegative,
  kScale,
  kNoiseSigma2,
  kNoiseSigma5,
  kNoiseSigma10,
};

std::string_view augmentation_name(Augmentation a);

// One augmentation variant. Randomness derives from (seed, variant) only.
GrayImage augment_variant(const GrayImage& img, std::uint64_t seed, Augmentation which);

// All nine variants, in enum order.
std::vector<GrayImage> augment(const GrayImage& img, std::uint64_t seed);

// Geometric helpers used by the augmentations; all keep the image size and
// replicate the border.
GrayImage flip_horizontal(const GrayImage& img);
GrayImage flip_vertical(const GrayImage& img);
GrayImage translate(const GrayImage& img, int dx, int dy);
GrayImage rotate(const GrayImage& img, double degrees);
GrayImage scale_about_center(const GrayImage& img, double factor);
GrayImage add_gaussian_noise(const GrayImage& img, double sigma, std::uint64_t seed);

}  // namespace veinatn
