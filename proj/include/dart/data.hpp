#pragma once

// 8-bit images, synthetic degradation (AWGN, bicubic), patch anchors, PNM I/O
// and a procedural scene generator for training data.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dart/autograd.hpp"
#include "dart/rng.hpp"

namespace dart {

struct ImageBuffer {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;      // 1 or 3, interleaved
  std::vector<std::uint8_t> data;  // row-major, length width*height*channels

  ImageBuffer() = default;
  ImageBuffer(std::size_t w, std::size_t h, std::size_t c, std::uint8_t fill = 0);

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c = 0) { return data[(y * width + x) * channels + c]; }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c = 0) const { return data[(y * width + x) * channels + c]; }
  bool operator==(const ImageBuffer&) const = default;
};

/// Same layout as ImageBuffer but with real-valued samples on the 0-255
/// scale. Resampling works in this domain; quantize() brings it back.
struct FloatImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;
  std::vector<double> data;

  double at(std::size_t y, std::size_t x, std::size_t c = 0) const { return data[(y * width + x) * channels + c]; }
};

FloatImage to_float(const ImageBuffer& img);
/// Round half away from zero, then clamp to [0, 255].
ImageBuffer quantize(const FloatImage& img);

/// [C,H,W] tensor in [0,1]; and back with rounding and clamping.
Tensor to_tensor(const ImageBuffer& img);
ImageBuffer from_tensor(const Tensor& t);

/// out = clamp(round(img + n)), n ~ N(0, sigma^2) drawn in row-major sample order.
ImageBuffer add_awgn(const ImageBuffer& img, double sigma, Rng& rng);

/// Cubic convolution kernel with a = -0.5.
double keys_cubic(double x);

/// Resampling weights for one axis: for each output index, the clamped input
/// indices it reads and their normalized weights.
struct ResampleAxis {
  std::vector<std::vector<std::size_t>> indices;
  std::vector<std::vector<double>> weights;
};

/// Matlab imresize convention: half-pixel centres, kernel widened by 1/scale
/// when shrinking, replicated edges, weights normalized to sum to 1.
ResampleAxis bicubic_axis(std::size_t in_len, std::size_t out_len, double scale);

/// Real-valued bicubic resize to an explicit size; scale per axis = out/in.
FloatImage bicubic_resize(const FloatImage& img, std::size_t out_width, std::size_t out_height);
/// Real-valued resize by one factor on both axes; output size ceil(in * scale).
FloatImage bicubic_resize(const FloatImage& img, double scale);
/// Integer-factor convenience: up multiplies the size by factor, down divides
/// it (rounding up, as imresize does). The result is quantized to 8 bits.
ImageBuffer bicubic_resize(const ImageBuffer& img, std::size_t factor, bool up);

struct PatchAnchor {
  std::size_t y = 0;
  std::size_t x = 0;
  bool operator==(const PatchAnchor&) const = default;
};

/// Top-left anchors of every size x size patch on the stride grid, shuffled
/// when rng is given. Throws SizeError if the patch does not fit.
std::vector<PatchAnchor> extract_patches(std::size_t width, std::size_t height, std::size_t size, std::size_t stride,
                                         Rng* rng = nullptr);
/// HR anchor that matches an LR anchor at upscale factor s.
inline PatchAnchor hr_anchor(PatchAnchor lr, std::size_t s) { return {lr.y * s, lr.x * s}; }
ImageBuffer crop(const ImageBuffer& img, PatchAnchor at, std::size_t width, std::size_t height);

struct PnmError : Error {
  using Error::Error;
};
struct PnmFormatError : PnmError {  // magic other than P5/P6
  using PnmError::PnmError;
};
struct PnmMaxvalError : PnmError {
  using PnmError::PnmError;
};
struct PnmTruncatedError : PnmError {
  using PnmError::PnmError;
};

ImageBuffer parse_pnm(const std::string& bytes);
std::string encode_pnm(const ImageBuffer& img);
ImageBuffer read_pnm(const std::filesystem::path& path);
/// Atomic: writes a sibling temp file, then renames it over path.
void write_pnm(const std::filesystem::path& path, const ImageBuffer& img);
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);

/// Procedural piecewise-smooth scene: a shaded background with overlapping
/// ellipses, rectangles and stripes of random intensity.
ImageBuffer synthetic_scene(std::size_t width, std::size_t height, std::size_t channels, Rng& rng);

}  // namespace dart
