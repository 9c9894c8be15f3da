#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <type_traits>
#include <cmath>
#include <cstddef>
#include <functional>
#include <new>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nsbert/errors.hpp"

namespace nsbert {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace detail {

// 64-byte aligned storage whose elements are default-initialized (no zero
// fill) on sized construction. Fixed alignment keeps vectorized reductions
// in the same order from run to run, independent of heap layout.
template <class T>
struct DefaultInitAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  template <class U>
  struct rebind {
    using other = DefaultInitAllocator<U>;
  };
  DefaultInitAllocator() = default;
  template <class U>
  DefaultInitAllocator(const DefaultInitAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }
  template <class U>
  bool operator==(const DefaultInitAllocator<U>&) const noexcept {
    return true;
  }
  template <class U>
  void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(p)) U;
  }
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

}  // namespace detail

/// Dense row-major n-dimensional array. A rank-0 array holds one scalar.
template <class T>
class Array {
 public:
  using value_type = T;

  Array() = default;

  explicit Array(Shape shape, T fill = T{0}) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    check_dims();
  }

  Array(Shape shape, const std::vector<T>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    check_dims();
    if (data_.size() != shape_size(shape_)) {
      throw ShapeError("array of shape " + to_string(shape_) + " given " + std::to_string(data_.size()) +
                       " elements");
    }
  }

  static Array scalar(T v) { return Array(Shape{}, std::vector<T>{v}); }

  /// Contents unspecified; for kernels that overwrite every element.
  static Array uninitialized(Shape shape) {
    Array out;
    out.shape_ = std::move(shape);
    out.check_dims();
    out.data_ = Storage(shape_size(out.shape_));
    return out;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  bool empty() const { return data_.empty() && shape_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const T& at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  T& at(std::size_t i, std::size_t j, std::size_t k) { return data_[(i * shape_[1] + j) * shape_[2] + k]; }
  const T& at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  T item() const {
    if (data_.size() != 1) throw ShapeError("item() on array of shape " + to_string(shape_));
    return data_[0];
  }

  Array reshaped(Shape shape) const& {
    if (shape_size(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    Array out;
    out.shape_ = std::move(shape);
    out.data_ = data_;
    return out;
  }

  /// Same data under a new shape, without copying.
  Array reshaped(Shape shape) && {
    if (shape_size(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    Array out;
    out.shape_ = std::move(shape);
    out.data_ = std::move(data_);
    return out;
  }

  template <class U>
  Array<U> cast() const {
    auto out = Array<U>::uninitialized(shape_);
    std::copy(data_.begin(), data_.end(), out.ptr());
    return out;
  }

  bool all_finite() const {
    if constexpr (std::is_same_v<T, float> || std::is_same_v<T, double>) {
      // Exponent bits all set means inf or NaN; the integer form vectorizes.
      using Bits = std::conditional_t<std::is_same_v<T, float>, std::uint32_t, std::uint64_t>;
      constexpr Bits exponent = static_cast<Bits>(std::is_same_v<T, float> ? 0x7f800000ull : 0x7ff0000000000000ull);
      Bits bad = 0;
      for (T v : data_) {
        const Bits bits = std::bit_cast<Bits>(v);
        bad |= static_cast<Bits>((bits & exponent) == exponent);
      }
      return bad == 0;
    } else {
      return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Array& a, const Array& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  void check_dims() const {
    for (auto d : shape_) {
      if (d == 0) throw ShapeError("array dimensions must be positive, got " + to_string(shape_));
    }
  }

  using Storage = std::vector<T, detail::DefaultInitAllocator<T>>;

  Shape shape_;
  Storage data_;
};

/// Largest absolute elementwise difference; shapes must match.
template <class T>
T max_abs_diff(const Array<T>& a, const Array<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  T worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

}  // namespace nsbert
