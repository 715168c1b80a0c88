#pragma once

// Dense 64-bit tensors and the error types shared by every dart module.

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dart {

using Shape = std::vector<std::size_t>;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct SizeError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::initializer_list<std::size_t> index);
  double at(std::initializer_list<std::size_t> index) const;
  double item() const;

  /// Same data, new shape. Element count must match.
  Tensor reshaped(Shape shape) const;

  void fill(double v);
  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::size_t offset(std::initializer_list<std::size_t> index) const;

  Shape shape_;
  std::vector<double> data_;
};

/// Row-major boolean array, used for attention admissibility.
struct BoolTensor {
  Shape shape;
  std::vector<std::uint8_t> data;

  BoolTensor() = default;
  BoolTensor(Shape s, bool fill) : shape(std::move(s)), data(shape_numel(shape), fill ? 1 : 0) {}
  std::size_t count() const;
};

double max_abs_diff(const Tensor& a, const Tensor& b);

/// Multiply-add counter for forward kernels. Thread-local so concurrent
/// callers do not interfere.
std::uint64_t& mac_counter();
inline void reset_mac_counter() { mac_counter() = 0; }

/// Keeps freed tensor buffers in the process heap instead of returning them
/// to the OS after every op. Executables call this once at startup; a no-op
/// off glibc.
void tune_allocator();

}  // namespace dart
