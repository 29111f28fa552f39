#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace trinity {

/// Dense row-major f64 tensor with immutable, shareable storage.
/// Copies are cheap (shared buffer); there is no in-place mutation.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int64_t> shape);
  static Tensor full(std::vector<int64_t> shape, double value);
  static Tensor from_data(std::vector<int64_t> shape, std::vector<double> data);
  static Tensor scalar(double value);

  const std::vector<int64_t>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t numel() const;
  bool empty() const { return !data_; }

  std::span<const double> data() const;
  double at(int64_t flat) const { return (*data_)[static_cast<size_t>(flat)]; }
  double at(int64_t r, int64_t c) const;
  double scalar_value() const;

  /// Rank-2 helpers. rows()/cols() treat a vector [n] as [1 x n].
  int64_t rows() const;
  int64_t cols() const;

  Tensor reshaped(std::vector<int64_t> shape) const;  // shares storage
  bool all_finite() const;
  bool same_bits(const Tensor& other) const;
  std::string shape_str() const;  // e.g. "[2x3]"

 private:
  std::vector<int64_t> shape_;
  std::shared_ptr<const std::vector<double>> data_;
};

}  // namespace trinity
