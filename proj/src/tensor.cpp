#include "gem/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace gem {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d < 0) throw Error("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(static_cast<size_t>(shape_numel(shape_)), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (static_cast<int64_t>(data_.size()) != shape_numel(shape_)) {
    throw Error("tensor data size " + std::to_string(data_.size()) +
                " does not match shape " + shape_str(shape_));
  }
}

int64_t Tensor::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw Error("axis out of range for shape " + shape_str(shape_));
  return shape_[static_cast<size_t>(axis)];
}

int64_t Tensor::offset(std::initializer_list<int64_t> index) const {
  if (static_cast<int>(index.size()) != rank()) {
    throw Error("index rank mismatch for shape " + shape_str(shape_));
  }
  int64_t off = 0;
  size_t k = 0;
  for (int64_t i : index) {
    const int64_t d = shape_[k++];
    if (i < 0 || i >= d) throw Error("index out of bounds for shape " + shape_str(shape_));
    off = off * d + i;
  }
  return off;
}

double& Tensor::at(std::initializer_list<int64_t> index) { return data_[static_cast<size_t>(offset(index))]; }

double Tensor::at(std::initializer_list<int64_t> index) const {
  return data_[static_cast<size_t>(offset(index))];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw Error("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

void require_shape(const Tensor& t, const Shape& expected, const char* what) {
  if (t.shape() != expected) {
    throw Error(std::string(what) + ": expected shape " + shape_str(expected) + ", got " +
                shape_str(t.shape()));
  }
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw Error("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace gem
