#pragma once

#include <cstdint>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dgsan {

// Allocator whose default construction leaves values uninitialized, so
// vector::resize on hot paths does not memset buffers that are about to be
// fully overwritten. Explicit fills (assign, fill-construction) still work.
template <class T>
struct NoInitAlloc : std::allocator<T> {
  template <class U>
  struct rebind {
    using other = NoInitAlloc<U>;
  };
  template <class U>
  void construct(U* p) noexcept(noexcept(::new (static_cast<void*>(p)) U)) {
    ::new (static_cast<void*>(p)) U;
  }
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

using DataVec = std::vector<double, NoInitAlloc<double>>;

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Dense row-major N-d array of doubles. All model math runs in 64-bit;
// the float32 on-disk formats are converted at the I/O boundary.
struct Tensor {
  Shape shape;
  DataVec data;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0)
      : shape(std::move(s)), data(static_cast<size_t>(shape_numel(shape)), fill) {}

  // Allocates without zero-filling; every element must be written before use.
  static Tensor uninit(Shape s) {
    Tensor t;
    t.shape = std::move(s);
    t.data.resize(static_cast<size_t>(shape_numel(t.shape)));
    return t;
  }

  static Tensor from(Shape s, std::initializer_list<double> d) {
    return from<std::initializer_list<double>>(std::move(s), d);
  }

  template <class Vec>
  static Tensor from(Shape s, const Vec& d) {
    if (shape_numel(s) != static_cast<int64_t>(d.size()))
      throw std::invalid_argument("Tensor::from: data size does not match shape " + shape_str(s));
    Tensor t;
    t.shape = std::move(s);
    t.data.assign(d.begin(), d.end());
    return t;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(shape.size()); }

  double& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

inline void check_shape(const Tensor& t, const Shape& want, const char* what) {
  if (t.shape != want)
    throw std::invalid_argument(std::string(what) + ": expected shape " + shape_str(want) +
                                ", got " + shape_str(t.shape));
}

}  // namespace dgsan
