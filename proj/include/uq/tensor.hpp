#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace uq {

/// Dense row-major tensor of 64-bit floats. Copies share the underlying
/// buffer; treat a tensor as immutable once it has been handed to anyone
/// else (ops return fresh buffers, they never write through a parent).
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape)
      : shape_(std::move(shape)),
        size_(count_(shape_)),
        data_(new double[size_]()) {}

  Tensor(std::vector<std::size_t> shape, const std::vector<double>& values)
      : shape_(std::move(shape)),
        size_(count_(shape_)),
        data_(new double[size_]) {
    if (values.size() != size_) {
      throw std::invalid_argument("Tensor: data length " +
                                  std::to_string(values.size()) +
                                  " does not match shape " + shape_string());
    }
    std::copy(values.begin(), values.end(), data_.get());
  }

  static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

  /// Allocation without the zero fill, for outputs a kernel fully
  /// overwrites. Reading an entry before writing it is undefined.
  static Tensor uninitialized(std::vector<std::size_t> shape) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.size_ = count_(t.shape_);
    t.data_.reset(new double[t.size_]);
    return t;
  }

  static Tensor full(std::vector<std::size_t> shape, double value) {
    Tensor t = uninitialized(std::move(shape));
    std::fill(t.begin(), t.end(), value);
    return t;
  }

  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return size_; }
  bool empty() const { return size_ == 0; }

  const double* data() const { return data_.get(); }
  double* data() { return data_.get(); }
  double* begin() { return data_.get(); }
  double* end() { return data_.get() + size_; }
  const double* begin() const { return data_.get(); }
  const double* end() const { return data_.get() + size_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  /// 2-D element access, row major.
  double at(std::size_t r, std::size_t c) const {
    return data_[r * shape_[1] + c];
  }
  double& at(std::size_t r, std::size_t c) {
    return data_[r * shape_[1] + c];
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  /// Bitwise equality of shape and every element.
  bool equals(const Tensor& other) const {
    if (shape_ != other.shape_) return false;
    for (std::size_t i = 0; i < size_; ++i) {
      if (data_[i] != other.data_[i]) return false;
    }
    return true;
  }

  bool all_finite() const {
    for (std::size_t i = 0; i < size_; ++i) {
      if (!std::isfinite(data_[i])) return false;
    }
    return true;
  }

  /// Deep copy with its own buffer.
  Tensor clone() const {
    if (!data_) return Tensor();
    Tensor t = uninitialized(shape_);
    std::copy(begin(), end(), t.begin());
    return t;
  }

  std::string shape_string() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (i) os << 'x';
      os << shape_[i];
    }
    os << ']';
    return os.str();
  }

 private:
  static std::size_t count_(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
      if (d == 0) throw std::invalid_argument("Tensor: zero dimension");
      n *= d;
    }
    return shape.empty() ? 1 : n;
  }

  std::vector<std::size_t> shape_;
  std::size_t size_ = 0;
  std::shared_ptr<double[]> data_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument("max_abs_diff: shape mismatch " +
                                a.shape_string() + " vs " + b.shape_string());
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(a[i] - b[i]));
  }
  return m;
}

}  // namespace uq
