// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace vptta {

/// Thrown for invalid shapes, out-of-range hyperparameters and similar
/// caller mistakes.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Thrown when an operation is used outside its contract (for example
/// backward on a non-scalar, or reading stale statistics).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array of doubles. Images use (H, W, C), batches
/// (N, H, W, C), and complex spectra carry a trailing dimension of 2.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
  static Tensor scalar(double v) { return Tensor(Shape{1}, v); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // (H, W, C) accessors.
  double& at(std::size_t y, std::size_t x, std::size_t c) {
    return data_[(y * shape_[1] + x) * shape_[2] + c];
  }
  double at(std::size_t y, std::size_t x, std::size_t c) const {
    return data_[(y * shape_[1] + x) * shape_[2] + c];
  }

  Tensor reshaped(Shape shape) const;
  void fill(double v);

  bool all_finite() const;
  double sum() const;
  double max_abs() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Throws ConfigError unless both tensors have the same shape.
void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

double frobenius_norm(const Tensor& t);
/// ||a - b||_F / max(||b||_F, tiny).
double relative_error(const Tensor& a, const Tensor& b);
double max_abs_diff(const Tensor& a, const Tensor& b);

/// FNV-1a over the raw bytes of the payload.
std::uint64_t checksum(std::span<const double> values, std::uint64_t seed = 1469598103934665603ULL);

// ".vpt" files: "VPT1", u32 rank, rank x u32 dims, little-endian f64 payload.
void write_vpt(const std::filesystem::path& path, const Tensor& t);
Tensor read_vpt(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_vpt(const Tensor& t);
Tensor decode_vpt(std::span<const std::uint8_t> bytes);

}  // namespace vptta
