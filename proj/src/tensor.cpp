// SPDX-License-Identifier: Apache-2.0
#include "mlkd/tensor.hpp"

#include <cmath>
#include <cstring>
#include <numeric>

#include "mlkd/error.hpp"

namespace mlkd {

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, std::size_t b) { return a * b; });
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_size(shape_), 0.0) {
  for (auto d : shape_) {
    if (d == 0) fail(ErrorKind::shape, "tensor shape " + shape_string(shape_) + " has a zero dimension");
  }
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto d : shape_) {
    if (d == 0) fail(ErrorKind::shape, "tensor shape " + shape_string(shape_) + " has a zero dimension");
  }
  if (shape_size(shape_) != data_.size()) {
    fail(ErrorKind::shape, "shape " + shape_string(shape_) + " does not match " +
                               std::to_string(data_.size()) + " elements");
  }
}

Tensor Tensor::filled(Shape shape, double value) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor({rows, cols}, std::move(values));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    fail(ErrorKind::shape, "axis " + std::to_string(axis) + " out of range for " + shape_string(shape_));
  }
  return shape_[axis];
}

double Tensor::item() const {
  if (data_.size() != 1) {
    fail(ErrorKind::contract, "item() on non-scalar tensor " + shape_string(shape_));
  }
  return data_[0];
}

bool Tensor::all_finite() const noexcept {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size()) {
    fail(ErrorKind::shape, "cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

Tensor gather_rows(const Tensor& t, std::span<const std::size_t> indices) {
  if (indices.empty()) fail(ErrorKind::shape, "gather_rows with no indices");
  Shape shape = t.shape();
  shape[0] = indices.size();
  const std::size_t width = t.cols();
  std::vector<double> out(indices.size() * width);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= t.rows()) fail(ErrorKind::shape, "gather_rows index out of range");
    std::memcpy(out.data() + i * width, t.values().data() + indices[i] * width, width * sizeof(double));
  }
  return Tensor(std::move(shape), std::move(out));
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) {
    fail(ErrorKind::shape, "concat_rows width mismatch " + shape_string(a.shape()) + " vs " +
                               shape_string(b.shape()));
  }
  Shape shape = a.shape();
  shape[0] = a.rows() + b.rows();
  std::vector<double> out(a.storage());
  out.insert(out.end(), b.storage().begin(), b.storage().end());
  return Tensor(std::move(shape), std::move(out));
}

void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    fail(ErrorKind::shape, std::string(what) + " expects a matrix, got " + shape_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    fail(ErrorKind::shape, std::string(what) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                               shape_string(b.shape()));
  }
}

}  // namespace mlkd
