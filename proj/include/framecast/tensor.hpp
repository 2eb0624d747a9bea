#pragma once

#include <Eigen/Dense>

#include <cassert>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace framecast {

using Index = std::int64_t;
using Shape = std::vector<Index>;

inline Index shape_size(const Shape& s) {
  Index n = 1;
  for (Index d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

/// Dense row-major n-d tensor backed by a contiguous Eigen array.
/// The last dimension varies fastest; matrix views interpret the flat
/// buffer as (rows, cols) row-major, which is what every matmul in the
/// model expects.
template <typename S>
class Tensor {
 public:
  using Scalar = S;
  using Storage = Eigen::Array<S, Eigen::Dynamic, 1>;
  using MatrixMap =
      Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using ConstMatrixMap = Eigen::Map<
      const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using ArrayMap = Eigen::Map<Storage>;
  using ConstArrayMap = Eigen::Map<const Storage>;

  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    data_.setZero(shape_size(shape_));
  }
  Tensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
    assert(data_.size() == shape_size(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, S v) {
    Tensor t(std::move(shape));
    t.data_.setConstant(v);
    return t;
  }
  static Tensor scalar(S v) { return full({1}, v); }
  /// Allocation without the zero fill, for op outputs that write every
  /// element.
  static Tensor uninit(Shape shape) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_.resize(shape_size(t.shape_));
    return t;
  }

  const Shape& shape() const { return shape_; }
  Index dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(shape_.size()); }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  S& operator[](Index i) { return data_[i]; }
  S operator[](Index i) const { return data_[i]; }

  Storage& array() { return data_; }
  const Storage& array() const { return data_; }

  /// Flat element access with multi-index (rank checked by assert only).
  template <typename... Ix>
  S& at(Ix... ix) {
    return data_[flat_index({static_cast<Index>(ix)...})];
  }
  template <typename... Ix>
  S at(Ix... ix) const {
    return data_[flat_index({static_cast<Index>(ix)...})];
  }

  Index flat_index(std::initializer_list<Index> ix) const {
    assert(ix.size() == shape_.size());
    Index flat = 0;
    size_t k = 0;
    for (Index i : ix) {
      assert(i >= 0 && i < shape_[k]);
      flat = flat * shape_[k] + i;
      ++k;
    }
    return flat;
  }

  /// Reinterpret the buffer with a new shape of equal size (no copy).
  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != size())
      throw std::invalid_argument("reshape " + shape_str(shape_) + " -> " +
                                  shape_str(shape) + ": size mismatch");
    return Tensor(std::move(shape), data_);
  }

  MatrixMap mat(Index rows, Index cols) {
    assert(rows * cols == size());
    return MatrixMap(data_.data(), rows, cols);
  }
  ConstMatrixMap mat(Index rows, Index cols) const {
    assert(rows * cols == size());
    return ConstMatrixMap(data_.data(), rows, cols);
  }
  /// 2-d view using the trailing dimension as columns.
  MatrixMap mat2d() { return mat(size() / last_dim(), last_dim()); }
  ConstMatrixMap mat2d() const { return mat(size() / last_dim(), last_dim()); }

  Index last_dim() const { return shape_.empty() ? 1 : shape_.back(); }

  void set_zero() { data_.setZero(); }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> out(shape_);
    out.array() = data_.template cast<T>();
    return out;
  }

 private:
  Shape shape_;
  Storage data_;
};

template <typename S>
bool same_shape(const Tensor<S>& a, const Tensor<S>& b) {
  return a.shape() == b.shape();
}

template <typename S>
S max_abs(const Tensor<S>& t) {
  return t.size() == 0 ? S(0) : t.array().abs().maxCoeff();
}

template <typename S>
S max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
  assert(a.size() == b.size());
  return a.size() == 0 ? S(0) : (a.array() - b.array()).abs().maxCoeff();
}

template <typename S>
double l2_norm(const Tensor<S>& t) {
  return std::sqrt(static_cast<double>((t.array() * t.array()).sum()));
}

template <typename S>
double rel_l2_diff(const Tensor<S>& a, const Tensor<S>& b) {
  assert(a.size() == b.size());
  double num = 0, den = 0;
  for (Index i = 0; i < a.size(); ++i) {
    double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    num += d * d;
    den += static_cast<double>(b[i]) * static_cast<double>(b[i]);
  }
  return std::sqrt(num) / (std::sqrt(den) + 1e-300);
}

}  // namespace framecast
