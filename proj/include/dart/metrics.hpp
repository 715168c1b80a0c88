#pragma once

// Fidelity metrics on the 0-255 scale: PSNR with border cropping, SSIM, and
// the studio-swing luma conversion used for SR evaluation.

#include <limits>
#include <string>

#include "dart/data.hpp"

namespace dart {

/// Grayscale plane on the 0-255 scale.
struct Plane {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> data;

  double at(std::size_t y, std::size_t x) const { return data[y * width + x]; }
};

/// Returned by psnr() when the compared regions are identical.
inline constexpr double kPsnrIdentical = std::numeric_limits<double>::infinity();

/// Y = 16 + (65.481 R + 128.553 G + 24.966 B) / 255. Throws ShapeError on
/// grayscale input.
Plane rgb_to_y(const ImageBuffer& img);
/// Single-channel image as a plane; throws ShapeError on colour input.
Plane gray_plane(const ImageBuffer& img);

/// PSNR over all channels after cropping `border` pixels from every side.
double psnr(const ImageBuffer& a, const ImageBuffer& b, std::size_t border = 0);
double psnr(const Plane& a, const Plane& b, std::size_t border = 0);

/// Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), valid positions only.
double ssim(const Plane& a, const Plane& b);

struct MetricReport {
  double psnr_db = 0.0;
  double ssim = 0.0;
  bool y_channel = false;
  std::size_t border = 0;
};

/// y_channel converts colour images to luma first; grayscale images are used
/// as they are. SSIM of colour images without conversion averages channels.
double psnr_pair(const ImageBuffer& restored, const ImageBuffer& reference, bool y_channel, std::size_t border);
double ssim_pair(const ImageBuffer& restored, const ImageBuffer& reference, bool y_channel, std::size_t border);
/// Both of the above.
MetricReport evaluate_pair(const ImageBuffer& restored, const ImageBuffer& reference, bool y_channel, std::size_t border);

/// "image,task,psnr_db,ssim" row with 6 decimals; +inf prints as "inf".
std::string metric_csv_row(const std::string& image, const std::string& task, const MetricReport& r);

}  // namespace dart
