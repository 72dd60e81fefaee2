#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dseg/errors.hpp"
#include "dseg/rng.hpp"

namespace dseg {

using Shape = std::vector<int>;

inline long long shape_numel(const Shape& s) {
  long long n = 1;
  for (int d : s) {
    if (d < 0) throw DimensionError("negative extent in shape");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

// Dense row-major n-dimensional array. `grad` stays empty except on
// trainable leaves, where backward() deposits the parameter gradient.
template <class T>
struct TensorT {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;

  TensorT() : shape{}, data(1, T(0)) {}
  explicit TensorT(Shape s) : shape(std::move(s)), data(size_t(shape_numel(shape)), T(0)) {}
  TensorT(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (shape_numel(shape) != (long long)data.size())
      throw DimensionError("tensor data length does not match shape " + shape_str(shape));
  }

  static TensorT scalar(T v) {
    TensorT t;
    t.data[0] = v;
    return t;
  }
  static TensorT full(Shape s, T v) {
    TensorT t(std::move(s));
    t.fill(v);
    return t;
  }

  long long numel() const { return (long long)data.size(); }
  int rank() const { return int(shape.size()); }
  bool is_scalar() const { return shape.empty(); }
  int dim(int i) const { return shape[size_t(i)]; }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }

  // Flat index for a rank-4 tensor.
  size_t at4(int b, int c, int y, int x) const {
    return ((size_t(b) * size_t(shape[1]) + size_t(c)) * size_t(shape[2]) + size_t(y)) *
               size_t(shape[3]) +
           size_t(x);
  }
  size_t at3(int c, int y, int x) const {
    return (size_t(c) * size_t(shape[1]) + size_t(y)) * size_t(shape[2]) + size_t(x);
  }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(double(v))) return false;
    return true;
  }
};

using Tensor = TensorT<float>;

template <class U, class T>
TensorT<U> cast_tensor(const TensorT<T>& t) {
  TensorT<U> out(t.shape);
  for (size_t i = 0; i < t.data.size(); ++i) out.data[i] = U(t.data[i]);
  return out;
}

template <class T>
TensorT<T> uniform_tensor(Shape s, Rng& rng, T lo, T hi) {
  TensorT<T> t(std::move(s));
  for (auto& v : t.data) v = T(rng.uniform(double(lo), double(hi)));
  return t;
}

template <class T>
TensorT<T> normal_tensor(Shape s, Rng& rng, T mean, T stddev) {
  TensorT<T> t(std::move(s));
  for (auto& v : t.data) v = T(rng.normal(double(mean), double(stddev)));
  return t;
}

// Integer class-id grid over a batch of images, stored row-major [B,H,W].
struct ClassMask {
  int batch = 0, h = 0, w = 0;
  std::vector<uint8_t> v;

  ClassMask() = default;
  ClassMask(int b_, int h_, int w_) : batch(b_), h(h_), w(w_), v(size_t(b_) * h_ * w_, 0) {}

  size_t size() const { return v.size(); }
  uint8_t& at(int b, int y, int x) { return v[(size_t(b) * h + y) * w + x]; }
  uint8_t at(int b, int y, int x) const { return v[(size_t(b) * h + y) * w + x]; }
};

}  // namespace dseg
