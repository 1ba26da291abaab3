#pragma once

#include <memory>
#include <utility>
#include <vector>

#include "demtg/common.hpp"
#include "demtg/prng.hpp"

namespace demtg {

// Dense row-major tensor of 64-bit reals, rank 1..4. Immutable after creation;
// copies share the data buffer. node() is the handle onto the tape that
// produced the tensor, or -1 when gradients are not tracked.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from_data(std::vector<int> shape, std::vector<double> data) {
    check_shape(shape);
    if (shape_size(shape) != static_cast<long long>(data.size())) {
      throw DimError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<std::vector<double>>(std::move(data));
    return t;
  }

  static Tensor zeros(std::vector<int> shape) {
    check_shape(shape);
    Tensor t;
    t.data_ = std::make_shared<std::vector<double>>(static_cast<std::size_t>(shape_size(shape)), 0.0);
    t.shape_ = std::move(shape);
    return t;
  }

  static Tensor full(std::vector<int> shape, double v) {
    Tensor t = zeros(std::move(shape));
    for (double& x : *t.data_) x = v;
    return t;
  }

  static Tensor scalar(double v) { return from_data({1}, {v}); }

  static Tensor random_normal(std::vector<int> shape, Prng& rng, double mean = 0.0,
                              double stddev = 1.0) {
    Tensor t = zeros(std::move(shape));
    for (double& x : *t.data_) x = rng.normal(mean, stddev);
    return t;
  }

  static Tensor random_uniform(std::vector<int> shape, Prng& rng, double lo = 0.0,
                               double hi = 1.0) {
    Tensor t = zeros(std::move(shape));
    for (double& x : *t.data_) x = rng.uniform(lo, hi);
    return t;
  }

  bool defined() const { return static_cast<bool>(data_); }
  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  long long size() const { return data_ ? static_cast<long long>(data_->size()) : 0; }
  const std::vector<double>& data() const { return *data_; }
  double operator[](long long i) const { return (*data_)[static_cast<std::size_t>(i)]; }

  double at(int i, int j) const { return (*data_)[static_cast<std::size_t>(i) * dim(1) + j]; }
  double at(int i, int j, int k) const {
    return (*data_)[(static_cast<std::size_t>(i) * dim(1) + j) * dim(2) + k];
  }

  // Scalar tensors only.
  double value() const {
    if (size() != 1) throw ContractError("value() requires a scalar tensor, got " + shape_str(shape_));
    return (*data_)[0];
  }

  bool tracked() const { return node_ >= 0; }
  int node() const { return node_; }

  Tensor detached() const {
    Tensor t = *this;
    t.node_ = -1;
    return t;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

 private:
  static void check_shape(const std::vector<int>& shape) {
    if (shape.empty() || shape.size() > 4) {
      throw DimError("tensor rank must be 1..4, got " + shape_str(shape));
    }
    for (int d : shape) {
      if (d <= 0) throw DimError("tensor dims must be positive, got " + shape_str(shape));
    }
  }

  std::vector<int> shape_;
  std::shared_ptr<std::vector<double>> data_;
  int node_ = -1;

  friend class Tape;
};

}  // namespace demtg
