// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "veinatn/image.hpp"
#include "veinatn/imageproc.hpp"
#include "veinatn/model.hpp"

namespace veinatn {

// Rectangular grid partition of an image. Cell (cx, cy) covers columns
// floor(cx*W/gx) .. floor((cx+1)*W/gx)-1 and the analogous rows; its index
// is cy*gx + cx.
struct Segmentation {
  int width = 0, height = 0, gx = 0, gy = 0;
  std::vector<int> cell;  // per pixel, row-major

  int cells() const noexcept { return gx * gy; }
};

Segmentation grid_segments(const GrayImage& img, int gx, int gy);

// Scores one image; the explained quantity.
using ImageScorer = std::function<double(const GrayImage&)>;

// Claimed-class probability of `model` for an image of the model's stream
// (resized to the model input size).
ImageScorer model_scorer(const Model& model, int claimed_id);

struct Perturbations {
  int cells = 0;
  std::vector<std::vector<std::uint8_t>> masks;  // samples x cells, 1 = kept
  std::vector<double> scores;
};

// Sample 0 keeps every cell and sample 1 none; every other sample keeps each
// cell with probability 0.5. Removed cells take the rounded image mean.
Perturbations perturb_and_score(const ImageScorer& scorer, const GrayImage& img, const Segmentation& seg,
                                int samples, std::uint64_t seed, int threads = 1);

// Image with the cells where mask == 0 replaced by `fill`.
GrayImage apply_mask(const GrayImage& img, const Segmentation& seg, const std::vector<std::uint8_t>& mask,
                     std::uint8_t fill);

struct SaliencyMap {
  int gx = 0, gy = 0;
  std::vector<double> weights;  // per cell, index cy*gx + cx
  double intercept = 0.0;
};

inline constexpr int kDefaultGrid = 8;
inline constexpr int kDefaultSamples = 256;
inline constexpr double kDefaultKernelWidth = 0.25;
inline constexpr double kDefaultRidgeLambda = 1e-3;

// Sample weight of a mask: exp(-(1 - cos(mask, ones))^2 / kernel_width^2),
// with cos = 0 for the empty mask.
double proximity_weight(const std::vector<std::uint8_t>& mask, double kernel_width);

// Weighted ridge regression of scores on mask features. With weighted
// means xbar and ybar, solves
//   (Xc^T P Xc + lambda I) w = Xc^T P yc,   Xc = X - xbar, yc = y - ybar,
// and sets intercept = ybar - xbar . w.
SaliencyMap fit_local_linear(const Perturbations& data, int gx, int gy, double kernel_width = kDefaultKernelWidth,
                             double ridge_lambda = kDefaultRidgeLambda);

// Indices of the cells brightened in the overlay: the top ceil(fraction *
// cells) by weight (ties to the lower index), keeping only positive weights.
std::vector<int> top_cells(const SaliencyMap& map, double fraction);

// Writes the overlay (top cells brightened half way to white) next to a
// `cell_x,cell_y,weight` CSV.
void export_saliency(const SaliencyMap& map, const GrayImage& img, const std::filesystem::path& overlay_path,
                     const std::filesystem::path& csv_path, double top_fraction = 0.25);

GrayImage saliency_overlay(const SaliencyMap& map, const GrayImage& img, double top_fraction = 0.25);

}  // namespace veinatn
