// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "veinatn/tensor.hpp"

namespace veinatn {

// Single-channel 8-bit image, row-major.
class GrayImage {
 public:
  GrayImage() = default;
  GrayImage(int width, int height, std::uint8_t fill = 0);
  GrayImage(int width, int height, std::vector<std::uint8_t> pixels);

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  bool empty() const noexcept { return pixels_.empty(); }

  std::uint8_t at(int x, int y) const { return pixels_[static_cast<std::size_t>(y) * width_ + x]; }
  std::uint8_t& at(int x, int y) { return pixels_[static_cast<std::size_t>(y) * width_ + x]; }

  const std::vector<std::uint8_t>& pixels() const noexcept { return pixels_; }
  std::vector<std::uint8_t>& pixels() noexcept { return pixels_; }

  friend bool operator==(const GrayImage&, const GrayImage&) = default;

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<std::uint8_t> pixels_;
};

// Reads binary PGM (P5, maxval <= 255) or PNG. PNG inputs with colour or
// alpha are converted to luma; 16-bit PNG is rejected.
GrayImage load_image(const std::filesystem::path& path);

// Decodes an in-memory P5 PGM.
GrayImage decode_pgm(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> encode_pgm(const GrayImage& img);

void save_pgm(const GrayImage& img, const std::filesystem::path& path);
void save_png(const GrayImage& img, const std::filesystem::path& path);

// Picks PGM or PNG from the extension.
void save_image(const GrayImage& img, const std::filesystem::path& path);

}  // namespace veinatn
