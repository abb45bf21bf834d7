#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <cstring>
#include <numeric>
#include <string>
#include <vector>

#include "cellcnn/common.hpp"

namespace cellcnn {

using ArrayXf = Eigen::ArrayXf;
using RowMatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMapF = Eigen::Map<RowMatrixF>;
using ConstMatMapF = Eigen::Map<const RowMatrixF>;

// Dense float32 tensor in C order (last axis fastest). Image-like tensors are
// (rows, cols, channels); batches are (batch, rows, cols, channels).
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.setZero(count(shape_));
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor constant(std::vector<int> shape, float value) {
    Tensor t(std::move(shape));
    t.data_.setConstant(t.data_.size(), value);
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  Eigen::Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }

  Eigen::Map<ArrayXf> flat() { return {data_.data(), data_.size()}; }
  Eigen::Map<const ArrayXf> flat() const { return {data_.data(), data_.size()}; }

  // Row-major matrix view over the flat buffer; rows*cols must equal size().
  MatMapF matrix(Eigen::Index rows, Eigen::Index cols) {
    require(rows * cols == data_.size(), "matrix view size mismatch");
    return {data_.data(), rows, cols};
  }
  ConstMatMapF matrix(Eigen::Index rows, Eigen::Index cols) const {
    require(rows * cols == data_.size(), "matrix view size mismatch");
    return {data_.data(), rows, cols};
  }

  void reshape(std::vector<int> shape) {
    require(count(shape) == data_.size(), "reshape changes element count");
    shape_ = std::move(shape);
  }

  void fill(float v) { data_.setConstant(v); }
  void set_zero() { data_.setZero(); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  std::string shape_str() const {
    std::string s = "(";
    for (std::size_t i = 0; i < shape_.size(); ++i)
      s += (i ? "," : "") + std::to_string(shape_[i]);
    return s + ")";
  }

  static Eigen::Index count(const std::vector<int>& shape) {
    Eigen::Index n = 1;
    for (int d : shape) {
      if (d <= 0) throw ConfigError("BadShape", "non-positive tensor dimension");
      n *= d;
    }
    return n;
  }

 private:
  static void require(bool ok, const char* what) {
    if (!ok) throw ConfigError("BadShape", what);
  }

  std::vector<int> shape_;
  ArrayXf data_;
};

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return false;
  return std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<std::size_t>(a.size())) == 0;
}

// Finite-value guard. Active in builds without NDEBUG (the project default);
// violations raise NumericError so the CLI can exit with its numeric-failure
// code and tests can observe the failure.
#ifndef NDEBUG
#define CELLCNN_FINITE_CHECKS 1
#endif

inline void check_finite(const Tensor& t, const char* where) {
#ifdef CELLCNN_FINITE_CHECKS
  if (!t.flat().isFinite().all())
    throw NumericError("NonFinite", std::string("non-finite value after ") + where);
#else
  (void)t;
  (void)where;
#endif
}

}  // namespace cellcnn
