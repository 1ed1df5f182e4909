// SPDX-License-Identifier: Apache-2.0
#include "renofeat/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace renofeat {

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t element_count(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

namespace {
void check_dims(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimension must be positive: " + to_string(shape));
  }
}
}  // namespace

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)) {
  check_dims(shape_);
  data_.assign(element_count(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  check_dims(shape_);
  if (data_.size() != element_count(shape_)) {
    throw ShapeError("tensor payload of " + std::to_string(data_.size()) +
                     " values does not match shape " + to_string(shape_));
  }
}

float Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on non-scalar tensor " + to_string(shape_));
  return data_[0];
}

void Tensor::fill(float value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

Tensor Tensor::slice_rows(std::size_t first, std::size_t count) const {
  if (rank() == 0 || first + count > shape_[0] || count == 0) {
    throw ShapeError("row slice out of range for " + to_string(shape_));
  }
  const std::size_t stride = data_.size() / shape_[0];
  Shape s = shape_;
  s[0] = count;
  return Tensor(std::move(s), std::vector<float>(data_.begin() + first * stride,
                                                 data_.begin() + (first + count) * stride));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

double squared_distance(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw ShapeError("squared_distance: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return acc;
}

}  // namespace renofeat
