#include "dart/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

namespace dart {

ImageBuffer::ImageBuffer(std::size_t w, std::size_t h, std::size_t c, std::uint8_t fill)
    : width(w), height(h), channels(c), data(w * h * c, fill) {
  if (c != 1 && c != 3) throw ShapeError("image channels must be 1 or 3, got " + std::to_string(c));
}

namespace {

std::uint8_t to_byte(double v) {
  const double r = std::round(v);  // half away from zero
  return static_cast<std::uint8_t>(std::clamp(r, 0.0, 255.0));
}

}  // namespace

FloatImage to_float(const ImageBuffer& img) {
  FloatImage f{img.width, img.height, img.channels, {}};
  f.data.assign(img.data.begin(), img.data.end());
  return f;
}

ImageBuffer quantize(const FloatImage& img) {
  ImageBuffer out(img.width, img.height, img.channels);
  for (std::size_t i = 0; i < img.data.size(); ++i) out.data[i] = to_byte(img.data[i]);
  return out;
}

Tensor to_tensor(const ImageBuffer& img) {
  const std::size_t C = img.channels, H = img.height, W = img.width;
  Tensor t(Shape{C, H, W});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) t[(c * H + y) * W + x] = img.at(y, x, c) / 255.0;
  return t;
}

ImageBuffer from_tensor(const Tensor& t) {
  if (t.rank() != 3) throw ShapeError("image tensor must be [C,H,W], got " + shape_str(t.shape()));
  const std::size_t C = t.dim(0), H = t.dim(1), W = t.dim(2);
  ImageBuffer img(W, H, C);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) img.at(y, x, c) = to_byte(t[(c * H + y) * W + x] * 255.0);
  return img;
}

ImageBuffer add_awgn(const ImageBuffer& img, double sigma, Rng& rng) {
  if (!(sigma >= 0.0)) throw ConfigError("noise sigma must be >= 0");
  ImageBuffer out = img;
  if (sigma == 0.0) return out;
  for (auto& v : out.data) v = to_byte(v + sigma * rng.normal());
  return out;
}

// ---------------------------------------------------------------------------
// bicubic

double keys_cubic(double x) {
  const double a = -0.5, t = std::abs(x);
  if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
  if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
  return 0.0;
}

ResampleAxis bicubic_axis(std::size_t in_len, std::size_t out_len, double scale) {
  if (in_len == 0 || out_len == 0) throw SizeError("resize dimensions must be >= 1");
  const bool shrink = scale < 1.0;
  const double width = shrink ? 4.0 / scale : 4.0;
  const auto taps = static_cast<std::size_t>(std::ceil(width)) + 2;
  ResampleAxis axis;
  axis.indices.resize(out_len);
  axis.weights.resize(out_len);
  for (std::size_t i = 0; i < out_len; ++i) {
    // 1-based output coordinate mapped to 1-based input coordinate.
    const double u = static_cast<double>(i + 1) / scale + 0.5 * (1.0 - 1.0 / scale);
    const double left = std::floor(u - width / 2.0);
    double total = 0.0;
    auto& idx = axis.indices[i];
    auto& w = axis.weights[i];
    for (std::size_t k = 0; k < taps; ++k) {
      const double pos = left + static_cast<double>(k);
      const double wk = shrink ? scale * keys_cubic(scale * (u - pos)) : keys_cubic(u - pos);
      if (wk == 0.0) continue;
      const double clamped = std::clamp(pos, 1.0, static_cast<double>(in_len));
      idx.push_back(static_cast<std::size_t>(clamped) - 1);
      w.push_back(wk);
      total += wk;
    }
    for (auto& wk : w) wk /= total;
  }
  return axis;
}

namespace {

FloatImage resize_impl(const FloatImage& img, std::size_t out_w, std::size_t out_h, double sx, double sy) {
  const std::size_t C = img.channels;
  const ResampleAxis ay = bicubic_axis(img.height, out_h, sy);
  const ResampleAxis ax = bicubic_axis(img.width, out_w, sx);
  // Rows first, then columns.
  FloatImage mid{img.width, out_h, C, std::vector<double>(img.width * out_h * C, 0.0)};
  for (std::size_t y = 0; y < out_h; ++y)
    for (std::size_t k = 0; k < ay.indices[y].size(); ++k) {
      const double w = ay.weights[y][k];
      const double* src = &img.data[ay.indices[y][k] * img.width * C];
      double* dst = &mid.data[y * img.width * C];
      for (std::size_t i = 0; i < img.width * C; ++i) dst[i] += w * src[i];
    }
  FloatImage out{out_w, out_h, C, std::vector<double>(out_w * out_h * C, 0.0)};
  for (std::size_t y = 0; y < out_h; ++y)
    for (std::size_t x = 0; x < out_w; ++x)
      for (std::size_t k = 0; k < ax.indices[x].size(); ++k) {
        const double w = ax.weights[x][k];
        for (std::size_t c = 0; c < C; ++c)
          out.data[(y * out_w + x) * C + c] += w * mid.data[(y * img.width + ax.indices[x][k]) * C + c];
      }
  return out;
}

}  // namespace

FloatImage bicubic_resize(const FloatImage& img, std::size_t out_width, std::size_t out_height) {
  if (img.width == 0 || img.height == 0 || out_width == 0 || out_height == 0)
    throw SizeError("resize dimensions must be >= 1");
  return resize_impl(img, out_width, out_height, static_cast<double>(out_width) / static_cast<double>(img.width),
                     static_cast<double>(out_height) / static_cast<double>(img.height));
}

FloatImage bicubic_resize(const FloatImage& img, double scale) {
  if (!(scale > 0.0)) throw ConfigError("resize scale must be positive");
  const auto out_w = static_cast<std::size_t>(std::ceil(static_cast<double>(img.width) * scale));
  const auto out_h = static_cast<std::size_t>(std::ceil(static_cast<double>(img.height) * scale));
  if (out_w == 0 || out_h == 0) throw SizeError("resize dimensions must be >= 1");
  return resize_impl(img, out_w, out_h, scale, scale);
}

ImageBuffer bicubic_resize(const ImageBuffer& img, std::size_t factor, bool up) {
  if (factor == 0) throw ConfigError("resize factor must be >= 1");
  const double scale = up ? static_cast<double>(factor) : 1.0 / static_cast<double>(factor);
  return quantize(bicubic_resize(to_float(img), scale));
}

// ---------------------------------------------------------------------------
// patches

std::vector<PatchAnchor> extract_patches(std::size_t width, std::size_t height, std::size_t size, std::size_t stride,
                                         Rng* rng) {
  if (size == 0 || stride == 0) throw ConfigError("patch size and stride must be positive");
  if (size > width || size > height) {
    throw SizeError("patch size " + std::to_string(size) + " exceeds image " + std::to_string(width) + "x" +
                    std::to_string(height));
  }
  std::vector<PatchAnchor> out;
  for (std::size_t y = 0; y + size <= height; y += stride)
    for (std::size_t x = 0; x + size <= width; x += stride) out.push_back({y, x});
  if (rng != nullptr) {
    for (std::size_t i = out.size(); i > 1; --i) std::swap(out[i - 1], out[rng->below(i)]);
  }
  return out;
}

ImageBuffer crop(const ImageBuffer& img, PatchAnchor at, std::size_t width, std::size_t height) {
  if (at.x + width > img.width || at.y + height > img.height) throw SizeError("crop window leaves the image");
  ImageBuffer out(width, height, img.channels);
  const std::size_t row = width * img.channels;
  for (std::size_t y = 0; y < height; ++y)
    std::copy_n(&img.data[((at.y + y) * img.width + at.x) * img.channels], row, &out.data[y * row]);
  return out;
}

// ---------------------------------------------------------------------------
// PNM

namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

// Reads one decimal header token, skipping whitespace and '#' comments.
std::size_t header_number(const std::string& s, std::size_t& pos, const char* what) {
  while (pos < s.size()) {
    if (is_space(s[pos])) {
      ++pos;
    } else if (s[pos] == '#') {
      while (pos < s.size() && s[pos] != '\n') ++pos;
    } else {
      break;
    }
  }
  if (pos >= s.size()) throw PnmTruncatedError(std::string("PNM header ends before ") + what);
  if (!std::isdigit(static_cast<unsigned char>(s[pos]))) throw PnmError(std::string("PNM header: bad ") + what);
  std::size_t v = 0;
  while (pos < s.size() && std::isdigit(static_cast<unsigned char>(s[pos]))) {
    v = v * 10 + static_cast<std::size_t>(s[pos] - '0');
    if (v > (1u << 30)) throw PnmError(std::string("PNM header: ") + what + " too large");
    ++pos;
  }
  return v;
}

}  // namespace

ImageBuffer parse_pnm(const std::string& bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P') throw PnmFormatError("not a PNM file (bad magic)");
  std::size_t channels = 0;
  if (bytes[1] == '5') channels = 1;
  else if (bytes[1] == '6') channels = 3;
  else throw PnmFormatError(std::string("unsupported PNM format P") + bytes[1] + " (only binary P5/P6)");

  std::size_t pos = 2;
  const std::size_t w = header_number(bytes, pos, "width");
  const std::size_t h = header_number(bytes, pos, "height");
  const std::size_t maxval = header_number(bytes, pos, "maxval");
  if (w == 0 || h == 0) throw PnmError("PNM image has zero size");
  if (maxval != 255) throw PnmMaxvalError("PNM maxval must be 255, got " + std::to_string(maxval));
  if (pos >= bytes.size() || !is_space(bytes[pos])) throw PnmTruncatedError("PNM header not terminated");
  ++pos;

  ImageBuffer img(w, h, channels);
  if (bytes.size() - pos < img.data.size()) {
    throw PnmTruncatedError("PNM payload truncated: expected " + std::to_string(img.data.size()) + " bytes, found " +
                            std::to_string(bytes.size() - pos));
  }
  std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(pos), img.data.size(), img.data.begin());
  return img;
}

std::string encode_pnm(const ImageBuffer& img) {
  std::string out = (img.channels == 1 ? "P5\n" : "P6\n") + std::to_string(img.width) + " " +
                    std::to_string(img.height) + "\n255\n";
  out.append(img.data.begin(), img.data.end());
  return out;
}

ImageBuffer read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_pnm(ss.str());
}

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out.flush()) throw Error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_pnm(const std::filesystem::path& path, const ImageBuffer& img) { write_file_atomic(path, encode_pnm(img)); }

// ---------------------------------------------------------------------------
// synthetic scenes

ImageBuffer synthetic_scene(std::size_t width, std::size_t height, std::size_t channels, Rng& rng) {
  const std::size_t C = channels;
  std::vector<double> px(width * height * C);
  auto colour = [&](std::vector<double>& c) {
    const double base = 20.0 + 215.0 * rng.uniform();
    for (std::size_t k = 0; k < C; ++k) c[k] = std::clamp(base + (C > 1 ? 60.0 * (rng.uniform() - 0.5) : 0.0), 0.0, 255.0);
  };

  // Background: linear ramp in a random direction.
  std::vector<double> c0(C), c1(C);
  colour(c0);
  colour(c1);
  const double angle = 2.0 * std::numbers::pi * rng.uniform();
  const double dx = std::cos(angle), dy = std::sin(angle);
  const double span = std::abs(dx) * width + std::abs(dy) * height;
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      const double t = (dx * (x - (dx < 0 ? width : 0.0)) + dy * (y - (dy < 0 ? height : 0.0))) / span;
      for (std::size_t k = 0; k < C; ++k) px[(y * width + x) * C + k] = c0[k] + (c1[k] - c0[k]) * t;
    }

  const std::size_t shapes = 3 + rng.below(5);
  std::vector<double> col(C);
  for (std::size_t s = 0; s < shapes; ++s) {
    colour(col);
    const std::size_t kind = rng.below(3);
    const double cx = rng.uniform() * width, cy = rng.uniform() * height;
    const double rx = 2.0 + rng.uniform() * width * 0.4, ry = 2.0 + rng.uniform() * height * 0.4;
    const double rot = std::numbers::pi * rng.uniform();
    const double cr = std::cos(rot), sr = std::sin(rot);
    const double period = 3.0 + 6.0 * rng.uniform();
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) {
        const double px_ = x + 0.5 - cx, py_ = y + 0.5 - cy;
        const double u = cr * px_ + sr * py_, v = -sr * px_ + cr * py_;
        bool inside = false;
        if (kind == 0) inside = (u * u) / (rx * rx) + (v * v) / (ry * ry) <= 1.0;
        else if (kind == 1) inside = std::abs(u) <= rx && std::abs(v) <= ry;
        else inside = std::abs(u) <= rx && std::fmod(std::abs(v), period) < period / 2.0;
        if (!inside) continue;
        for (std::size_t k = 0; k < C; ++k) px[(y * width + x) * C + k] = col[k];
      }
  }

  ImageBuffer img(width, height, C);
  for (std::size_t i = 0; i < px.size(); ++i) img.data[i] = to_byte(px[i]);
  return img;
}

}  // namespace dart
