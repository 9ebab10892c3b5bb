#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "advdecomp/error.hpp"

namespace advdecomp {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// Dense row-major float32 array. The element count always equals the product
// of the extents.
class Tensor {
public:
  Tensor() = default;

  explicit Tensor(Shape shape, float fill = 0.0f)
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

  Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size()) {
      throw ShapeError("tensor", detail::concat("shape ", shape_str(shape_), " needs ",
                                                shape_numel(shape_), " elements, got ", data_.size()));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  float* raw() noexcept { return data_.data(); }
  const float* raw() const noexcept { return data_.data(); }
  std::vector<float>& storage() noexcept { return data_; }
  const std::vector<float>& storage() const noexcept { return data_; }

  float& operator[](std::size_t i) noexcept { return data_[i]; }
  float operator[](std::size_t i) const noexcept { return data_[i]; }

  // Element count of one slice along the leading axis (e.g. one example).
  std::size_t row_size() const noexcept { return shape_.empty() || shape_[0] == 0 ? 0 : data_.size() / shape_[0]; }

  std::span<float> row(std::size_t i) noexcept { return data().subspan(i * row_size(), row_size()); }
  std::span<const float> row(std::size_t i) const noexcept { return data().subspan(i * row_size(), row_size()); }

  Tensor reshaped(Shape shape) const {
    return Tensor(std::move(shape), data_);
  }

  void fill(float v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

private:
  Shape shape_;
  std::vector<float> data_;
};

// Rows [begin, end) along the leading axis.
inline Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t end) {
  Shape shape = t.shape();
  shape[0] = end - begin;
  const std::size_t rs = t.row_size();
  std::vector<float> data(t.storage().begin() + static_cast<std::ptrdiff_t>(begin * rs),
                          t.storage().begin() + static_cast<std::ptrdiff_t>(end * rs));
  return Tensor(std::move(shape), std::move(data));
}

inline void write_rows(Tensor& dst, std::size_t begin, const Tensor& src) {
  std::copy(src.storage().begin(), src.storage().end(),
            dst.storage().begin() + static_cast<std::ptrdiff_t>(begin * dst.row_size()));
}

inline float max_abs(std::span<const float> v) {
  float m = 0.0f;
  for (float x : v) m = std::max(m, std::abs(x));
  return m;
}

inline double dot(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

inline double l2_norm(std::span<const float> a) { return std::sqrt(dot(a, a)); }

// sign with sign(0) == 0
inline float sign0(float v) noexcept { return v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f); }

}  // namespace advdecomp
