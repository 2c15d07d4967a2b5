// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <limits>

#include "support.hpp"
#include "veinatn/image.hpp"
#include "veinatn/imageproc.hpp"

using namespace veinatn;
using namespace veinatn::testing;

namespace {

std::vector<std::uint8_t> pgm_bytes(const std::string& header, std::vector<std::uint8_t> payload) {
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

constexpr double kNoClip = std::numeric_limits<double>::infinity();

}  // namespace

TEST_SUITE("imageproc") {
  TEST_CASE("pgm decode") {
    const auto img = decode_pgm(pgm_bytes("P5\n2 2\n255\n", {0, 128, 255, 64}));
    CHECK(img == GrayImage(2, 2, {0, 128, 255, 64}));
    const auto commented = decode_pgm(pgm_bytes("P5\n# comment\n2 1\n255\n", {7, 9}));
    CHECK(commented == GrayImage(2, 1, {7, 9}));
  }

  TEST_CASE("pgm errors") {
    try {
      decode_pgm(pgm_bytes("P5\n2 2\n255\n", {0, 128, 255}));
      FAIL("expected an error");
    } catch (const FormatError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("expected 4") != std::string::npos);
      CHECK(msg.find("got 3") != std::string::npos);
    }
    CHECK_THROWS_AS(decode_pgm(pgm_bytes("P2\n1 1\n255\n", {0})), FormatError);
    CHECK_THROWS_AS(decode_pgm(pgm_bytes("P5\n1 1\n65535\n", {0, 0})), FormatError);
    CHECK_THROWS_AS(decode_pgm(pgm_bytes("P5\nx 1\n255\n", {0})), FormatError);
    CHECK_THROWS_AS(load_image("/nonexistent/file.pgm"), IoError);
  }

  TEST_CASE("pgm and png round trips") {
    const auto dir = fresh_dir("imageio");
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const auto img = random_image(1 + static_cast<int>(seed % 7) * 5, 1 + static_cast<int>(seed % 5) * 3, seed);
      CHECK(decode_pgm(encode_pgm(img)) == img);
      save_image(img, dir / "a.pgm");
      CHECK(load_image(dir / "a.pgm") == img);
      save_image(img, dir / "a.png");
      CHECK(load_image(dir / "a.png") == img);
    }
  }

  TEST_CASE("clahe constant images stay constant") {
    for (int v : {0, 1, 77, 128, 254, 255}) {
      for (const ClaheParams p : {ClaheParams{}, ClaheParams{1, 1, kNoClip}, ClaheParams{3, 2, 0.5}}) {
        const auto out = clahe(GrayImage(41, 33, static_cast<std::uint8_t>(v)), p);
        for (auto px : out.pixels()) CHECK(px == out.pixels()[0]);
      }
    }
  }

  TEST_CASE("clahe with one tile and no clip is global equalization") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const int lo = static_cast<int>(seed * 7 % 100), hi = 150 + static_cast<int>(seed * 13 % 106);
      const auto img = random_image(31 + static_cast<int>(seed), 23 + static_cast<int>(seed % 4), seed, lo, hi);
      CHECK(clahe(img, {1, 1, kNoClip}) == global_he(img));
    }
  }

  TEST_CASE("clahe two-level image") {
    GrayImage img(10, 10);
    for (std::size_t i = 0; i < 100; ++i) img.pixels()[i] = i % 2 ? 200 : 50;
    const auto out = clahe(img, {1, 1, 1e6});
    CHECK(out == global_he(img));
    for (std::size_t i = 0; i < 100; ++i) CHECK(out.pixels()[i] == (i % 2 ? 255 : 0));
  }

  TEST_CASE("clahe keeps size and bounds") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto img = random_image(64, 48, seed);
      const auto out = clahe(img, {8, 8, 2.0});
      CHECK(out.width() == 64);
      CHECK(out.height() == 48);
    }
    GrayImage binary(16, 16);
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) binary.at(x, y) = (x + y) % 3 ? 0 : 255;
    CHECK(clahe(binary, {4, 4, 2.0}).width() == 16);
    CHECK_THROWS_AS(clahe(GrayImage(4, 4), {8, 1, 2.0}), ShapeError);
    CHECK_THROWS_AS(clahe(GrayImage(4, 4), {0, 1, 2.0}), ConfigError);
    CHECK_THROWS_AS(clahe(GrayImage(4, 4), {1, 1, 0.0}), ConfigError);
  }

  TEST_CASE("resize examples") {
    const auto img = random_image(13, 9, 3);
    CHECK(resize_bilinear(img, 13, 9) == img);
    const auto c = resize_bilinear(GrayImage(5, 7, 91), 17, 3);
    for (auto p : c.pixels()) CHECK(p == 91);
    const auto ramp = resize_bilinear(GrayImage(2, 1, {0, 255}), 4, 1);
    CHECK(ramp.pixels().front() == 0);
    CHECK(ramp.pixels().back() == 255);
    for (std::size_t i = 1; i < 4; ++i) CHECK(ramp.pixels()[i] >= ramp.pixels()[i - 1]);
    // Closed form: src = (dst + 0.5) / 2 - 0.5 -> -0.25, 0.25, 0.75, 1.25.
    CHECK(ramp.pixels() == std::vector<std::uint8_t>{0, 64, 191, 255});
    CHECK_THROWS_AS(resize_bilinear(img, 0, 4), ShapeError);
  }

  TEST_CASE("resize does not overshoot") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto img = random_image(11, 7, seed, 40, 200);
      const auto out = resize_bilinear(img, 29, 4 + static_cast<int>(seed));
      const auto [mn, mx] = std::minmax_element(img.pixels().begin(), img.pixels().end());
      for (auto p : out.pixels()) {
        CHECK(p >= *mn);
        CHECK(p <= *mx);
      }
    }
  }

  TEST_CASE("network input") {
    const auto t = to_network_input<float>(GrayImage(30, 20, 128));
    CHECK(t.shape() == Shape{1, 3, 224, 224});
    for (float v : t.data()) CHECK(v == 128.0f / 255.0f);
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      const auto r = to_network_input<double>(random_image(50 + static_cast<int>(seed), 40, seed));
      CHECK(r.shape() == Shape{1, 3, 224, 224});
      const std::size_t plane = 224 * 224;
      for (std::size_t i = 0; i < plane; ++i) {
        CHECK(r[i] == r[plane + i]);
        CHECK(r[i] == r[2 * plane + i]);
      }
    }
    CHECK(to_network_input<float>(GrayImage(8, 8), 64).shape() == Shape{1, 3, 64, 64});
  }

  TEST_CASE("augmentation") {
    const auto img = random_image(48, 40, 9);
    const auto a = augment(img, 42), b = augment(img, 42);
    REQUIRE(a.size() == 9);
    CHECK(a == b);
    for (const auto& v : a) {
      CHECK(v.width() == 48);
      CHECK(v.height() == 40);
    }
    CHECK(a[0] == flip_horizontal(img));
    CHECK(flip_horizontal(flip_horizontal(img)) == img);
    CHECK(flip_vertical(flip_vertical(img)) == img);
    CHECK(augment(img, 43) != a);
    for (int i = 0; i < kAugmentCount; ++i) {
      CHECK(augment_variant(img, 42, static_cast<Augmentation>(i)) == a[static_cast<std::size_t>(i)]);
    }
  }

  TEST_CASE("noise variant statistics") {
    const GrayImage flat(224, 224, 128);
    const auto noisy = augment_variant(flat, 7, Augmentation::kNoiseSigma5);
    double s = 0, ss = 0;
    for (auto p : noisy.pixels()) {
      const double d = static_cast<double>(p) - 128.0;
      s += d;
      ss += d * d;
    }
    const double n = static_cast<double>(noisy.pixels().size());
    const double sd = std::sqrt(ss / n - (s / n) * (s / n));
    CHECK(sd >= 4.0);
    CHECK(sd <= 6.0);
  }

  TEST_CASE("geometric helpers") {
    const auto img = random_image(20, 16, 4);
    CHECK(translate(img, 0, 0) == img);
    CHECK(rotate(img, 0.0) == img);
    CHECK(scale_about_center(img, 1.0) == img);
    const auto shifted = translate(img, 3, 0);
    CHECK(shifted.at(10, 5) == img.at(7, 5));
    CHECK(shifted.at(0, 5) == img.at(0, 5));  // replicated border
  }
}
