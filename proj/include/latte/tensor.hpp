#pragma once

// Dense row-major N-d arrays over a selectable scalar (float or double),
// with Eigen map views for the linear-algebra heavy paths. Storage is a
// single contiguous buffer; product(shape) == size at all times.

#include <Eigen/Dense>

#include <cassert>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace latte {

using Index = Eigen::Index;

template <typename S>
using MatrixX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using VectorX = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <typename S>
using MatMap = Eigen::Map<MatrixX<S>>;
template <typename S>
using ConstMatMap = Eigen::Map<const MatrixX<S>>;
template <typename S>
using VecMap = Eigen::Map<VectorX<S>>;
template <typename S>
using ConstVecMap = Eigen::Map<const VectorX<S>>;

using Shape = std::vector<Index>;

inline std::string shape_to_string(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

/// Axis selector; must name a dimension of the tensor it accompanies.
struct Axis {
  int index = 0;
};

template <typename S>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    Index n = 1;
    for (Index e : shape_) {
      if (e <= 0) throw std::invalid_argument("Tensor: extents must be positive, got " + shape_to_string(shape_));
      n *= e;
    }
    data_.assign(static_cast<size_t>(n), S(0));
  }

  Tensor(Shape shape, std::initializer_list<S> vals) : Tensor(std::move(shape)) {
    if (static_cast<Index>(vals.size()) != size())
      throw std::invalid_argument("Tensor: initializer length does not match shape");
    std::copy(vals.begin(), vals.end(), data_.begin());
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, S v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  Index extent(int axis) const {
    assert(axis >= 0 && axis < rank());
    return shape_[static_cast<size_t>(axis)];
  }
  Index size() const { return static_cast<Index>(data_.size()); }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }

  S& operator[](Index flat) {
    assert(flat >= 0 && flat < size());
    return data_[static_cast<size_t>(flat)];
  }
  S operator[](Index flat) const {
    assert(flat >= 0 && flat < size());
    return data_[static_cast<size_t>(flat)];
  }

  template <typename... Ix>
  S& operator()(Ix... ix) {
    return data_[static_cast<size_t>(flat_index(ix...))];
  }
  template <typename... Ix>
  S operator()(Ix... ix) const {
    return data_[static_cast<size_t>(flat_index(ix...))];
  }

  /// View the flat buffer as a rows-by-cols row-major matrix.
  MatMap<S> matrix(Index rows, Index cols) {
    assert(rows * cols == size());
    return MatMap<S>(data(), rows, cols);
  }
  ConstMatMap<S> matrix(Index rows, Index cols) const {
    assert(rows * cols == size());
    return ConstMatMap<S>(data(), rows, cols);
  }

  /// (size / last-extent) x last-extent view; the usual tokens-by-features layout.
  MatMap<S> rows_by_last() {
    Index c = shape_.empty() ? 1 : shape_.back();
    return matrix(size() / c, c);
  }
  ConstMatMap<S> rows_by_last() const {
    Index c = shape_.empty() ? 1 : shape_.back();
    return matrix(size() / c, c);
  }

  VecMap<S> vector() { return VecMap<S>(data(), size()); }
  ConstVecMap<S> vector() const { return ConstVecMap<S>(data(), size()); }

  Tensor reshaped(Shape shape) const {
    Tensor t(std::move(shape));
    if (t.size() != size()) throw std::invalid_argument("Tensor::reshaped: element count mismatch");
    std::copy(data_.begin(), data_.end(), t.data_.begin());
    return t;
  }

  void set_zero() { std::fill(data_.begin(), data_.end(), S(0)); }

  bool all_finite() const {
    for (S v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> t(shape_);
    for (Index i = 0; i < size(); ++i) t[i] = static_cast<T>(data_[static_cast<size_t>(i)]);
    return t;
  }

 private:
  template <typename... Ix>
  Index flat_index(Ix... ix) const {
    static_assert((std::is_integral_v<Ix> && ...));
    assert(sizeof...(ix) == shape_.size());
    Index idx[] = {static_cast<Index>(ix)...};
    Index flat = 0;
    for (size_t d = 0; d < sizeof...(ix); ++d) {
      assert(idx[d] >= 0 && idx[d] < shape_[d]);
      flat = flat * shape_[d] + idx[d];
    }
    return flat;
  }

  Shape shape_;
  std::vector<S> data_;
};

template <typename S>
S max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff: shape mismatch");
  S m = 0;
  for (Index i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <typename S>
bool bit_identical(const Tensor<S>& a, const Tensor<S>& b) {
  if (!a.same_shape(b)) return false;
  return std::memcmp(a.data(), b.data(), sizeof(S) * static_cast<size_t>(a.size())) == 0;
}

}  // namespace latte
