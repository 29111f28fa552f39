#include "trinity/tensor.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace trinity {

namespace {
int64_t product(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d <= 0) throw std::invalid_argument("Tensor: extents must be positive, got " + std::to_string(d));
    n *= d;
  }
  return n;
}
}  // namespace

Tensor Tensor::zeros(std::vector<int64_t> shape) {
  return full(std::move(shape), 0.0);
}

Tensor Tensor::full(std::vector<int64_t> shape, double value) {
  Tensor t;
  int64_t n = product(shape);
  t.shape_ = std::move(shape);
  t.data_ = std::make_shared<const std::vector<double>>(static_cast<size_t>(n), value);
  return t;
}

Tensor Tensor::from_data(std::vector<int64_t> shape, std::vector<double> data) {
  int64_t n = product(shape);
  if (n != static_cast<int64_t>(data.size())) {
    throw std::invalid_argument("Tensor: shape/data size mismatch: shape holds " + std::to_string(n) +
                                " elements, data holds " + std::to_string(data.size()));
  }
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::make_shared<const std::vector<double>>(std::move(data));
  return t;
}

Tensor Tensor::scalar(double value) {
  return from_data({1}, {value});
}

int64_t Tensor::numel() const {
  return data_ ? static_cast<int64_t>(data_->size()) : 0;
}

std::span<const double> Tensor::data() const {
  if (!data_) return {};
  return std::span<const double>(data_->data(), data_->size());
}

double Tensor::at(int64_t r, int64_t c) const {
  return (*data_)[static_cast<size_t>(r * cols() + c)];
}

double Tensor::scalar_value() const {
  if (numel() != 1) throw std::invalid_argument("Tensor: scalar_value on tensor of shape " + shape_str());
  return (*data_)[0];
}

int64_t Tensor::rows() const {
  if (rank() == 1) return 1;
  if (rank() == 2) return shape_[0];
  throw std::invalid_argument("Tensor: rows() needs rank <= 2, got " + shape_str());
}

int64_t Tensor::cols() const {
  if (rank() == 1) return shape_[0];
  if (rank() == 2) return shape_[1];
  throw std::invalid_argument("Tensor: cols() needs rank <= 2, got " + shape_str());
}

Tensor Tensor::reshaped(std::vector<int64_t> shape) const {
  if (product(shape) != numel()) {
    throw std::invalid_argument("Tensor: reshape from " + shape_str() + " changes element count");
  }
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = data_;
  return t;
}

bool Tensor::all_finite() const {
  if (!data_) return true;
  for (double v : *data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

bool Tensor::same_bits(const Tensor& other) const {
  if (shape_ != other.shape_) return false;
  if (!data_ || !other.data_) return data_ == other.data_;
  return std::memcmp(data_->data(), other.data_->data(), data_->size() * sizeof(double)) == 0;
}

std::string Tensor::shape_str() const {
  std::string s = "[";
  for (size_t i = 0; i < shape_.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape_[i]);
  }
  return s + "]";
}

}  // namespace trinity
