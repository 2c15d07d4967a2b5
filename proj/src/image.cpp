// SPDX-License-Identifier: Apache-2.0

#include "veinatn/image.hpp"

#include <png.h>

#include <cctype>
#include <fstream>
#include <algorithm>
#include <iterator>
#include <string>

namespace veinatn {

GrayImage::GrayImage(int width, int height, std::uint8_t fill) {
  if (width <= 0 || height <= 0) throw ShapeError("image extents must be positive");
  width_ = width;
  height_ = height;
  pixels_.assign(static_cast<std::size_t>(width) * height, fill);
}

GrayImage::GrayImage(int width, int height, std::vector<std::uint8_t> pixels) {
  if (width <= 0 || height <= 0) throw ShapeError("image extents must be positive");
  if (pixels.size() != static_cast<std::size_t>(width) * height) {
    throw ShapeError("image pixel count " + std::to_string(pixels.size()) + " does not match " +
                     std::to_string(width) + "x" + std::to_string(height));
  }
  width_ = width;
  height_ = height;
  pixels_ = std::move(pixels);
}

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Reads one whitespace-delimited header token, skipping '#' comments.
std::string pgm_token(const std::vector<std::uint8_t>& b, std::size_t& pos) {
  while (pos < b.size()) {
    if (b[pos] == '#') {
      while (pos < b.size() && b[pos] != '\n') ++pos;
    } else if (std::isspace(b[pos])) {
      ++pos;
    } else {
      break;
    }
  }
  std::string tok;
  while (pos < b.size() && !std::isspace(b[pos]) && b[pos] != '#') tok.push_back(static_cast<char>(b[pos++]));
  if (tok.empty()) throw FormatError("pgm: truncated header");
  return tok;
}

int pgm_int(const std::vector<std::uint8_t>& b, std::size_t& pos, const char* field) {
  const std::string tok = pgm_token(b, pos);
  try {
    std::size_t used = 0;
    const long v = std::stol(tok, &used);
    if (used != tok.size() || v <= 0 || v > 1 << 20) throw FormatError("");
    return static_cast<int>(v);
  } catch (const std::exception&) {
    throw FormatError(std::string("pgm: invalid ") + field + " '" + tok + "'");
  }
}

GrayImage load_png(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw FormatError("png: " + path.string() + ": " + image.message);
  }
  if (image.format & PNG_FORMAT_FLAG_LINEAR) {
    png_image_free(&image);
    throw FormatError("png: " + path.string() + ": unsupported bit depth 16");
  }
  image.format = PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> pixels(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, pixels.data(), 0, nullptr)) {
    throw FormatError("png: " + path.string() + ": " + image.message);
  }
  return GrayImage(static_cast<int>(image.width), static_cast<int>(image.height), std::move(pixels));
}

}  // namespace

GrayImage decode_pgm(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw FormatError("pgm: missing P5 magic");
  std::size_t pos = 2;
  const int width = pgm_int(bytes, pos, "width");
  const int height = pgm_int(bytes, pos, "height");
  const int maxval = pgm_int(bytes, pos, "maxval");
  if (maxval > 255) throw FormatError("pgm: unsupported bit depth (maxval " + std::to_string(maxval) + ")");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw FormatError("pgm: truncated header");
  ++pos;
  const std::size_t expected = static_cast<std::size_t>(width) * height;
  const std::size_t actual = bytes.size() - pos;
  if (actual < expected) {
    throw FormatError("pgm: truncated payload, expected " + std::to_string(expected) + " bytes, got " +
                      std::to_string(actual));
  }
  std::vector<std::uint8_t> pixels(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                   bytes.begin() + static_cast<std::ptrdiff_t>(pos + expected));
  if (maxval != 255) {
    for (auto& p : pixels) {
      if (p > maxval) throw FormatError("pgm: sample exceeds maxval");
      p = static_cast<std::uint8_t>((p * 255 + maxval / 2) / maxval);
    }
  }
  return GrayImage(width, height, std::move(pixels));
}

std::vector<std::uint8_t> encode_pgm(const GrayImage& img) {
  const std::string header = "P5\n" + std::to_string(img.width()) + " " + std::to_string(img.height()) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.pixels().begin(), img.pixels().end());
  return out;
}

GrayImage load_image(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("no such file: " + path.string());
  const std::vector<std::uint8_t> bytes = read_file(path);
  static constexpr std::uint8_t kPngMagic[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (bytes.size() >= 8 && std::equal(std::begin(kPngMagic), std::end(kPngMagic), bytes.begin())) {
    return load_png(path);
  }
  try {
    return decode_pgm(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void save_pgm(const GrayImage& img, const std::filesystem::path& path) {
  const auto bytes = encode_pgm(img);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

void save_png(const GrayImage& img, const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width());
  image.height = static_cast<png_uint_32>(img.height());
  image.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&image, path.c_str(), 0, img.pixels().data(), 0, nullptr)) {
    throw IoError("png: cannot write " + path.string() + ": " + image.message);
  }
}

void save_image(const GrayImage& img, const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  for (char& ch : ext) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  if (ext == ".png") {
    save_png(img, path);
  } else {
    save_pgm(img, path);
  }
}

}  // namespace veinatn
