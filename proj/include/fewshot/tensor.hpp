#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "fewshot/error.hpp"

namespace fewshot {

// All numeric buffers are 64-byte aligned. SIMD code paths (Eigen's and the
// compiler's) peel loops based on runtime pointer alignment; a fixed
// alignment makes every run take identical paths, which bit-exact
// reproducibility depends on.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t kAlign = 64;

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) {
    if (n == 0) return nullptr;
    void* p = ::operator new(n * sizeof(T), std::align_val_t(kAlign));
    return static_cast<T*>(p);
  }
  void deallocate(T* p, std::size_t n) {
    ::operator delete(p, n * sizeof(T), std::align_val_t(kAlign));
  }
  bool operator==(const AlignedAllocator&) const { return true; }
  bool operator!=(const AlignedAllocator&) const { return false; }
};

template <typename T>
using AlignedVec = std::vector<T, AlignedAllocator<T>>;

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// Dense row-major n-d array of real scalars. The scalar type is the template
// parameter: float for training, double for gradient-check builds.
template <typename S>
class Tensor {
 public:
  using Scalar = S;
  using MatrixMap =
      Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using ConstMatrixMap = Eigen::Map<
      const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using VectorMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>;
  using ConstVectorMap = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    for (auto e : shape_)
      if (e <= 0) throw ShapeError("tensor extent must be positive, got shape " + shape_str(shape_));
    data_.assign(std::size_t(shape_numel(shape_)), S(0));
  }

  Tensor(Shape shape, AlignedVec<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (std::int64_t(data_.size()) != shape_numel(shape_))
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
  }

  Tensor(Shape shape, const std::vector<S>& data)
      : Tensor(std::move(shape), AlignedVec<S>(data.begin(), data.end())) {}

  Tensor(Shape shape, std::initializer_list<S> data)
      : Tensor(std::move(shape), AlignedVec<S>(data.begin(), data.end())) {}

  static Tensor full(Shape shape, S v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  static Tensor scalar(S v) { return Tensor({1}, {v}); }

  const Shape& shape() const { return shape_; }
  std::int64_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }
  std::int64_t numel() const { return std::int64_t(data_.size()); }
  bool empty() const { return data_.empty(); }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  AlignedVec<S>& raw() { return data_; }
  const AlignedVec<S>& raw() const { return data_; }

  S& operator[](std::int64_t i) { return data_[std::size_t(i)]; }
  S operator[](std::int64_t i) const { return data_[std::size_t(i)]; }

  // Views for the matmul-shaped parts. Rows*cols must cover the buffer.
  MatrixMap mat(std::int64_t rows, std::int64_t cols) {
    return MatrixMap(data_.data(), rows, cols);
  }
  ConstMatrixMap mat(std::int64_t rows, std::int64_t cols) const {
    return ConstMatrixMap(data_.data(), rows, cols);
  }
  VectorMap vec() { return VectorMap(data_.data(), std::int64_t(data_.size())); }
  ConstVectorMap vec() const {
    return ConstVectorMap(data_.data(), std::int64_t(data_.size()));
  }

  void fill(S v) { std::fill(data_.begin(), data_.end(), v); }
  void set_zero() { fill(S(0)); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (S v : data_)
      if (!std::isfinite(double(v))) return false;
    return true;
  }

  template <typename T>
  Tensor<T> cast() const {
    std::vector<T> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = T(data_[i]);
    return Tensor<T>(shape_, std::move(out));
  }

 private:
  Shape shape_;
  std::vector<S> data_;
};

}  // namespace fewshot
