#include "vprda/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace vprda {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_size(shape_) != data_.size())
    throw DimensionError("tensor: shape " + shape_str(shape_) + " does not match " +
                         std::to_string(data_.size()) + " values");
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("tensor: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size())
    throw DimensionError("reshape: " + shape_str(shape_) + " -> " + shape_str(shape));
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double Tensor::item() const {
  if (data_.size() != 1) throw DimensionError("item: tensor has " + std::to_string(data_.size()) + " values");
  return data_[0];
}

std::size_t rows_of(const Tensor& t) {
  if (t.rank() != 2) throw DimensionError("expected rank-2 tensor, got " + shape_str(t.shape()));
  return t.dim(0);
}

std::size_t cols_of(const Tensor& t) {
  if (t.rank() != 2) throw DimensionError("expected rank-2 tensor, got " + shape_str(t.shape()));
  return t.dim(1);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw DimensionError("max_abs_diff: size mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace vprda
