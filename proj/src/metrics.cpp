#include "dart/metrics.hpp"

#include <cmath>
#include <cstdio>

namespace dart {

Plane rgb_to_y(const ImageBuffer& img) {
  if (img.channels != 3) throw ShapeError("rgb_to_y needs a 3-channel image");
  Plane p{img.width, img.height, std::vector<double>(img.width * img.height)};
  for (std::size_t i = 0; i < p.data.size(); ++i) {
    const double r = img.data[3 * i], g = img.data[3 * i + 1], b = img.data[3 * i + 2];
    p.data[i] = 16.0 + (65.481 * r + 128.553 * g + 24.966 * b) / 255.0;
  }
  return p;
}

Plane gray_plane(const ImageBuffer& img) {
  if (img.channels != 1) throw ShapeError("gray_plane needs a 1-channel image");
  return {img.width, img.height, std::vector<double>(img.data.begin(), img.data.end())};
}

namespace {

void check_border(std::size_t w, std::size_t h, std::size_t border) {
  if (2 * border >= w || 2 * border >= h) {
    throw SizeError("border " + std::to_string(border) + " leaves nothing of a " + std::to_string(w) + "x" +
                    std::to_string(h) + " image");
  }
}

double psnr_from_sse(double sse, std::size_t count) {
  if (sse == 0.0) return kPsnrIdentical;
  return 10.0 * std::log10(255.0 * 255.0 / (sse / static_cast<double>(count)));
}

Plane crop_plane(const Plane& p, std::size_t border) {
  if (border == 0) return p;
  check_border(p.width, p.height, border);
  Plane out{p.width - 2 * border, p.height - 2 * border, {}};
  out.data.reserve(out.width * out.height);
  for (std::size_t y = 0; y < out.height; ++y)
    for (std::size_t x = 0; x < out.width; ++x) out.data.push_back(p.at(y + border, x + border));
  return out;
}

}  // namespace

double psnr(const ImageBuffer& a, const ImageBuffer& b, std::size_t border) {
  if (a.width != b.width || a.height != b.height || a.channels != b.channels) {
    throw ShapeError("psnr: image shapes differ");
  }
  check_border(a.width, a.height, border);
  double sse = 0.0;
  std::size_t n = 0;
  for (std::size_t y = border; y + border < a.height; ++y)
    for (std::size_t x = border; x + border < a.width; ++x)
      for (std::size_t c = 0; c < a.channels; ++c) {
        const double d = static_cast<double>(a.at(y, x, c)) - static_cast<double>(b.at(y, x, c));
        sse += d * d;
        ++n;
      }
  return psnr_from_sse(sse, n);
}

double psnr(const Plane& a, const Plane& b, std::size_t border) {
  if (a.width != b.width || a.height != b.height) throw ShapeError("psnr: plane shapes differ");
  check_border(a.width, a.height, border);
  double sse = 0.0;
  std::size_t n = 0;
  for (std::size_t y = border; y + border < a.height; ++y)
    for (std::size_t x = border; x + border < a.width; ++x) {
      const double d = a.at(y, x) - b.at(y, x);
      sse += d * d;
      ++n;
    }
  return psnr_from_sse(sse, n);
}

double ssim(const Plane& a, const Plane& b) {
  constexpr std::size_t K = 11;
  constexpr double sigma = 1.5, C1 = (0.01 * 255) * (0.01 * 255), C2 = (0.03 * 255) * (0.03 * 255);
  if (a.width != b.width || a.height != b.height) throw ShapeError("ssim: plane shapes differ");
  if (a.width < K || a.height < K) throw SizeError("ssim needs images of at least 11x11");

  double g[K], total = 0.0;
  for (std::size_t i = 0; i < K; ++i) {
    const double d = static_cast<double>(i) - 5.0;
    g[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    total += g[i];
  }
  for (double& v : g) v /= total;

  // Separable filtering of a, b, a*a, b*b, a*b: horizontal pass then vertical.
  const std::size_t W = a.width, H = a.height, OW = W - K + 1, OH = H - K + 1;
  std::vector<double> sq_a(W * H), sq_b(W * H), ab(W * H);
  for (std::size_t i = 0; i < W * H; ++i) {
    sq_a[i] = a.data[i] * a.data[i];
    sq_b[i] = b.data[i] * b.data[i];
    ab[i] = a.data[i] * b.data[i];
  }
  auto filter = [&](const std::vector<double>& src) {
    std::vector<double> rows(OW * H, 0.0), out(OW * OH, 0.0);
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < OW; ++x)
        for (std::size_t k = 0; k < K; ++k) rows[y * OW + x] += g[k] * src[y * W + x + k];
    for (std::size_t y = 0; y < OH; ++y)
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t x = 0; x < OW; ++x) out[y * OW + x] += g[k] * rows[(y + k) * OW + x];
    return out;
  };
  const auto mu_a = filter(a.data), mu_b = filter(b.data);
  const auto e_aa = filter(sq_a), e_bb = filter(sq_b), e_ab = filter(ab);

  double sum = 0.0;
  for (std::size_t i = 0; i < OW * OH; ++i) {
    const double va = e_aa[i] - mu_a[i] * mu_a[i];
    const double vb = e_bb[i] - mu_b[i] * mu_b[i];
    const double cov = e_ab[i] - mu_a[i] * mu_b[i];
    sum += ((2.0 * mu_a[i] * mu_b[i] + C1) * (2.0 * cov + C2)) /
           ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + C1) * (va + vb + C2));
  }
  return sum / static_cast<double>(OW * OH);
}

namespace {

void check_pair(const ImageBuffer& restored, const ImageBuffer& reference) {
  if (restored.width != reference.width || restored.height != reference.height ||
      restored.channels != reference.channels) {
    throw ShapeError("evaluate: restored and reference images differ in shape");
  }
}

Plane channel_plane(const ImageBuffer& img, std::size_t c) {
  Plane p{img.width, img.height, {}};
  p.data.reserve(img.width * img.height);
  for (std::size_t i = 0; i < img.width * img.height; ++i) p.data.push_back(img.data[img.channels * i + c]);
  return p;
}

}  // namespace

double psnr_pair(const ImageBuffer& restored, const ImageBuffer& reference, bool y_channel, std::size_t border) {
  check_pair(restored, reference);
  if (restored.channels == 3 && y_channel) return psnr(rgb_to_y(restored), rgb_to_y(reference), border);
  return psnr(restored, reference, border);
}

double ssim_pair(const ImageBuffer& restored, const ImageBuffer& reference, bool y_channel, std::size_t border) {
  check_pair(restored, reference);
  if (restored.channels == 1 || y_channel) {
    const Plane a = restored.channels == 1 ? gray_plane(restored) : rgb_to_y(restored);
    const Plane b = reference.channels == 1 ? gray_plane(reference) : rgb_to_y(reference);
    return ssim(crop_plane(a, border), crop_plane(b, border));
  }
  double s = 0.0;
  for (std::size_t c = 0; c < 3; ++c)
    s += ssim(crop_plane(channel_plane(restored, c), border), crop_plane(channel_plane(reference, c), border));
  return s / 3.0;
}

MetricReport evaluate_pair(const ImageBuffer& restored, const ImageBuffer& reference, bool y_channel,
                           std::size_t border) {
  MetricReport r;
  r.y_channel = y_channel;
  r.border = border;
  r.psnr_db = psnr_pair(restored, reference, y_channel, border);
  r.ssim = ssim_pair(restored, reference, y_channel, border);
  return r;
}

std::string metric_csv_row(const std::string& image, const std::string& task, const MetricReport& r) {
  char buf[64];
  std::string out = image + "," + task + ",";
  if (std::isinf(r.psnr_db)) {
    out += "inf";
  } else {
    std::snprintf(buf, sizeof buf, "%.6f", r.psnr_db);
    out += buf;
  }
  std::snprintf(buf, sizeof buf, ",%.6f", r.ssim);
  return out + buf;
}

}  // namespace dart
