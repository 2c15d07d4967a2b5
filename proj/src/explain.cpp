// SPDX-License-Identifier: Apache-2.0

#include "veinatn/explain.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "veinatn/error.hpp"
#include "veinatn/keyvalue.hpp"
#include "veinatn/rng.hpp"
#include "veinatn/trainer.hpp"

namespace veinatn {

Segmentation grid_segments(const GrayImage& img, int gx, int gy) {
  if (gx < 1 || gy < 1) throw ConfigError("grid dimensions must be >= 1");
  if (gx > img.width() || gy > img.height()) {
    throw ConfigError("grid " + std::to_string(gx) + "x" + std::to_string(gy) + " exceeds image " +
                      std::to_string(img.width()) + "x" + std::to_string(img.height()));
  }
  Segmentation seg{img.width(), img.height(), gx, gy, {}};
  seg.cell.resize(static_cast<std::size_t>(img.width()) * img.height());
  for (int y = 0; y < img.height(); ++y) {
    const int cy = static_cast<int>(static_cast<long>(y) * gy / img.height());
    for (int x = 0; x < img.width(); ++x) {
      const int cx = static_cast<int>(static_cast<long>(x) * gx / img.width());
      seg.cell[static_cast<std::size_t>(y) * img.width() + x] = cy * gx + cx;
    }
  }
  return seg;
}

ImageScorer model_scorer(const Model& model, int claimed_id) {
  if (claimed_id < 0 || claimed_id >= model.config.num_classes) {
    throw ConfigError("claimed id " + std::to_string(claimed_id) + " out of range [0, " +
                      std::to_string(model.config.num_classes - 1) + "]");
  }
  return [&model, claimed_id](const GrayImage& img) {
    const int s = model.config.input_size;
    const GrayImage sized = img.width() == s && img.height() == s ? img : resize_bilinear(img, s, s);
    const auto p = predict(model.config, model.params, to_network_input<float>(sized, s));
    return static_cast<double>(p[static_cast<std::size_t>(claimed_id)]);
  };
}

GrayImage apply_mask(const GrayImage& img, const Segmentation& seg, const std::vector<std::uint8_t>& mask,
                     std::uint8_t fill) {
  if (seg.width != img.width() || seg.height != img.height()) throw ShapeError("segmentation does not match image");
  if (mask.size() != static_cast<std::size_t>(seg.cells())) throw ShapeError("mask length does not match grid");
  GrayImage out = img;
  auto& px = out.pixels();
  for (std::size_t i = 0; i < px.size(); ++i) {
    if (!mask[static_cast<std::size_t>(seg.cell[i])]) px[i] = fill;
  }
  return out;
}

Perturbations perturb_and_score(const ImageScorer& scorer, const GrayImage& img, const Segmentation& seg,
                                int samples, std::uint64_t seed, int threads) {
  const int cells = seg.cells();
  if (samples < cells || samples < 2) {
    throw ConfigError("perturbation samples (" + std::to_string(samples) + ") must be at least the cell count (" +
                      std::to_string(cells) + ") and 2");
  }
  double total = 0.0;
  for (auto p : img.pixels()) total += p;
  const auto fill = static_cast<std::uint8_t>(std::lround(total / static_cast<double>(img.pixels().size())));

  Perturbations out;
  out.cells = cells;
  out.masks.assign(static_cast<std::size_t>(samples), std::vector<std::uint8_t>(static_cast<std::size_t>(cells), 0));
  std::fill(out.masks[0].begin(), out.masks[0].end(), 1);
  for (int i = 2; i < samples; ++i) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(i)}));
    for (auto& m : out.masks[static_cast<std::size_t>(i)]) m = rng.coin() ? 1 : 0;
  }
  out.scores.assign(static_cast<std::size_t>(samples), 0.0);
  parallel_for(static_cast<std::size_t>(samples), threads, [&](std::size_t i) {
    out.scores[i] = scorer(i == 0 ? img : apply_mask(img, seg, out.masks[i], fill));
  });
  return out;
}

double proximity_weight(const std::vector<std::uint8_t>& mask, double kernel_width) {
  const double kept = static_cast<double>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
  const double cosine = kept == 0.0 ? 0.0 : std::sqrt(kept / static_cast<double>(mask.size()));
  const double d = 1.0 - cosine;
  return std::exp(-(d * d) / (kernel_width * kernel_width));
}

SaliencyMap fit_local_linear(const Perturbations& data, int gx, int gy, double kernel_width, double ridge_lambda) {
  if (!(ridge_lambda > 0.0)) throw ConfigError("ridge lambda must be positive");
  if (!(kernel_width > 0.0)) throw ConfigError("kernel width must be positive");
  const auto n = static_cast<Eigen::Index>(data.masks.size());
  const Eigen::Index d = gx * gy;
  if (n == 0 || static_cast<std::size_t>(n) != data.scores.size()) throw ShapeError("masks and scores disagree");
  Eigen::MatrixXd x(n, d);
  Eigen::VectorXd y(n), w(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& m = data.masks[static_cast<std::size_t>(i)];
    if (static_cast<Eigen::Index>(m.size()) != d) throw ShapeError("mask length does not match grid");
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = m[static_cast<std::size_t>(j)];
    y(i) = data.scores[static_cast<std::size_t>(i)];
    w(i) = proximity_weight(m, kernel_width);
  }
  const double wsum = w.sum();
  const Eigen::RowVectorXd xbar = (w.transpose() * x) / wsum;
  const double ybar = w.dot(y) / wsum;
  const Eigen::MatrixXd xc = x.rowwise() - xbar;
  const Eigen::VectorXd yc = y.array() - ybar;
  const Eigen::MatrixXd xtw = xc.transpose() * w.asDiagonal();
  Eigen::MatrixXd a = xtw * xc;
  a.diagonal().array() += ridge_lambda;
  const Eigen::VectorXd coef = a.ldlt().solve(xtw * yc);

  SaliencyMap map;
  map.gx = gx;
  map.gy = gy;
  map.weights.assign(coef.data(), coef.data() + d);
  map.intercept = ybar - xbar.dot(coef);
  for (double v : map.weights) {
    if (!std::isfinite(v)) throw NumericError("local linear fit produced a non-finite weight");
  }
  return map;
}

std::vector<int> top_cells(const SaliencyMap& map, double fraction) {
  const int cells = map.gx * map.gy;
  std::vector<int> order(static_cast<std::size_t>(cells));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return map.weights[static_cast<std::size_t>(a)] > map.weights[static_cast<std::size_t>(b)];
  });
  const auto keep = static_cast<std::size_t>(std::ceil(std::clamp(fraction, 0.0, 1.0) * cells));
  std::vector<int> out;
  for (std::size_t i = 0; i < keep; ++i) {
    if (map.weights[static_cast<std::size_t>(order[i])] > 0.0) out.push_back(order[i]);
  }
  return out;
}

GrayImage saliency_overlay(const SaliencyMap& map, const GrayImage& img, double top_fraction) {
  const Segmentation seg = grid_segments(img, map.gx, map.gy);
  std::vector<std::uint8_t> bright(static_cast<std::size_t>(seg.cells()), 0);
  for (int c : top_cells(map, top_fraction)) bright[static_cast<std::size_t>(c)] = 1;
  GrayImage out = img;
  auto& px = out.pixels();
  for (std::size_t i = 0; i < px.size(); ++i) {
    if (bright[static_cast<std::size_t>(seg.cell[i])]) px[i] = static_cast<std::uint8_t>(px[i] + (255 - px[i] + 1) / 2);
  }
  return out;
}

void export_saliency(const SaliencyMap& map, const GrayImage& img, const std::filesystem::path& overlay_path,
                     const std::filesystem::path& csv_path, double top_fraction) {
  save_image(saliency_overlay(map, img, top_fraction), overlay_path);
  std::ofstream out(csv_path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + csv_path.string());
  out << "cell_x,cell_y,weight\n";
  for (int cy = 0; cy < map.gy; ++cy) {
    for (int cx = 0; cx < map.gx; ++cx) {
      out << cx << ',' << cy << ',' << format_double(map.weights[static_cast<std::size_t>(cy * map.gx + cx)]) << '\n';
    }
  }
  if (!out) throw IoError("write failed: " + csv_path.string());
}

}  // namespace veinatn
