#include <cmath>
#include <random>

#include "dart/metrics.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace dart;
using namespace oracle;

TEST_SUITE("metrics") {

TEST_CASE("luma conversion") {
  ImageBuffer px(3, 1, 3);
  px.data = {255, 255, 255, 0, 0, 0, 255, 0, 0};
  const Plane y = rgb_to_y(px);
  CHECK(y.data[0] == doctest::Approx(235.0).epsilon(1e-12));
  CHECK(y.data[1] == 16.0);
  CHECK(y.data[2] == doctest::Approx(81.481).epsilon(1e-12));
  CHECK_THROWS_AS(rgb_to_y(ImageBuffer(2, 2, 1)), ShapeError);
}

TEST_CASE("PSNR analytic cases") {
  std::mt19937_64 g(1);
  ImageBuffer a(20, 12, 3);
  for (auto& v : a.data) v = static_cast<std::uint8_t>(g() % 255);
  CHECK(std::isinf(psnr(a, a)));
  CHECK(psnr(a, a) == kPsnrIdentical);

  ImageBuffer b = a;
  for (auto& v : b.data) v += 1;
  CHECK(std::abs(psnr(a, b) - 20.0 * std::log10(255.0)) <= 1e-6);
  CHECK(std::abs(psnr(a, b) - 48.1308) <= 1e-4);

  ImageBuffer c(8, 8, 1), d(8, 8, 1);
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x) {
      c.at(y, x) = (x + y) % 2 ? 255 : 0;
      d.at(y, x) = 255 - c.at(y, x);
    }
  CHECK(std::abs(psnr(c, d)) <= 1e-6);
  CHECK_THROWS_AS(psnr(c, ImageBuffer(8, 7, 1)), ShapeError);
  CHECK_THROWS_AS(psnr(c, d, 4), SizeError);
}

TEST_CASE("PSNR symmetry and border composability") {
  std::mt19937_64 g(2);
  for (int t = 0; t < 10; ++t) {
    ImageBuffer a(15, 11, 1), b(15, 11, 1);
    for (auto& v : a.data) v = static_cast<std::uint8_t>(g());
    for (auto& v : b.data) v = static_cast<std::uint8_t>(g());
    CHECK(psnr(a, b) == psnr(b, a));
    const std::size_t k = 1 + t % 4;
    const auto ca = crop(a, {k, k}, 15 - 2 * k, 11 - 2 * k), cb = crop(b, {k, k}, 15 - 2 * k, 11 - 2 * k);
    CHECK(psnr(a, b, k) == doctest::Approx(psnr(ca, cb)).epsilon(1e-14));
    // Identical inside the crop gives the sentinel even if the border differs.
    ImageBuffer e = a;
    e.at(0, 0) ^= 0x55;
    CHECK(std::isinf(psnr(a, e, 1)));
  }
}

TEST_CASE("SSIM closed forms") {
  std::mt19937_64 g(3);
  for (int t = 0; t < 5; ++t) {
    Plane a = random_plane(11 + t * 3, 13 + t, g);
    CHECK(ssim(a, a) == 1.0);
  }
  Plane z{16, 16, std::vector<double>(256, 0.0)}, f{16, 16, std::vector<double>(256, 255.0)};
  const double C1 = 6.5025;
  CHECK(std::abs(ssim(z, f) - C1 / (255.0 * 255.0 + C1)) <= 1e-10);
  // The exact value is 9.99900e-5; the commonly quoted figure is 1.0001e-4.
  CHECK(ssim(z, f) == doctest::Approx(1.0001e-4).epsilon(1e-3));
  CHECK_THROWS_AS(ssim(Plane{10, 20, std::vector<double>(200)}, Plane{10, 20, std::vector<double>(200)}), SizeError);
}

TEST_CASE("SSIM matches the direct-summation oracle") {
  std::mt19937_64 g(4);
  for (int t = 0; t < 20; ++t) {
    const std::size_t w = 11 + g() % 20, h = 11 + g() % 20;
    Plane a = random_plane(w, h, g);
    Plane b = a;
    std::normal_distribution<double> n(0.0, 5.0 + 10.0 * t);
    for (auto& v : b.data) v = std::clamp(v + n(g), 0.0, 255.0);
    const double got = ssim(a, b);
    CHECK(std::abs(got - ssim_ref(a, b)) <= 1e-6);
    CHECK(got >= -1.0);
    CHECK(got <= 1.0);
  }
}

TEST_CASE("evaluation report and CSV") {
  ImageBuffer a(16, 16, 3, 100), b(16, 16, 3, 101);
  const auto r = evaluate_pair(b, a, true, 2);
  CHECK(r.y_channel);
  CHECK(r.border == 2);
  // Luma offset of a unit RGB step is 219/255.
  CHECK(r.psnr_db == doctest::Approx(20 * std::log10(255.0 / (219.0 / 255.0))).epsilon(1e-9));
  CHECK(metric_csv_row("x.ppm", "denoise-color", evaluate_pair(a, a, false, 0)) == "x.ppm,denoise-color,inf,1.000000");
  const auto row = metric_csv_row("img", "sr2", {48.13080360867909, 0.5, true, 2});
  CHECK(row == "img,sr2,48.130804,0.500000");
}

}  // TEST_SUITE
