#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace scsc {

/// Raised when tensor shapes do not satisfy an operation's contract.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for invalid hyperparameters (kernel sets, gate groups, specs).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Shape {
  std::size_t n = 1;
  std::size_t c = 1;
  std::size_t h = 1;
  std::size_t w = 1;

  [[nodiscard]] constexpr std::size_t size() const noexcept { return n * c * h * w; }
  [[nodiscard]] constexpr std::size_t plane() const noexcept { return h * w; }
  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  [[nodiscard]] std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
  }
};

/// Dense rank-4 array of doubles in row-major NCHW order.
///
/// A default-constructed tensor is "unset" (no storage, all-zero shape); every
/// other tensor has all four extents >= 1 and data().size() == shape().size().
class Tensor4 {
 public:
  Tensor4() = default;

  explicit Tensor4(Shape shape, double fill = 0.0) : shape_(checked(shape)), data_(shape.size(), fill) {}

  Tensor4(Shape shape, std::vector<double> data) : shape_(checked(shape)), data_(std::move(data)) {
    if (data_.size() != shape_.size()) {
      throw DimensionError("Tensor4: data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_.str());
    }
  }

  static Tensor4 zeros_like(const Tensor4& t) { return Tensor4(t.shape()); }

  [[nodiscard]] const Shape& shape() const noexcept { return shape_; }
  [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
  [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

  [[nodiscard]] std::span<double> data() noexcept { return data_; }
  [[nodiscard]] std::span<const double> data() const noexcept { return data_; }
  [[nodiscard]] double* raw() noexcept { return data_.data(); }
  [[nodiscard]] const double* raw() const noexcept { return data_.data(); }

  [[nodiscard]] std::size_t index(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }

  double& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) noexcept {
    return data_[index(n, c, h, w)];
  }
  double operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
    return data_[index(n, c, h, w)];
  }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  /// Same data, new shape of equal element count.
  [[nodiscard]] Tensor4 reshaped(Shape s) const {
    if (s.size() != size()) {
      throw DimensionError("reshape: cannot view " + shape_.str() + " as " + s.str());
    }
    return Tensor4(s, data_);
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor4& operator+=(const Tensor4& o) {
    require_same(o, "operator+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  Tensor4& operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
  }

  void require_same(const Tensor4& o, const char* what) const {
    if (o.shape_ != shape_) {
      throw DimensionError(std::string(what) + ": shape " + shape_.str() + " vs " + o.shape_.str());
    }
  }

 private:
  static Shape checked(Shape s) {
    if (s.n == 0 || s.c == 0 || s.h == 0 || s.w == 0) {
      throw DimensionError("Tensor4: every extent must be >= 1, got " + s.str());
    }
    return s;
  }

  Shape shape_{0, 0, 0, 0};
  std::vector<double> data_;
};

/// A parameter or checkpoint entry.
struct NamedTensor {
  std::string name;
  Tensor4 value;
};

inline double max_abs_diff(const Tensor4& a, const Tensor4& b) {
  a.require_same(b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace scsc
