#pragma once

#include <cstdint>
#include <vector>

#include "bifp/common.hpp"

namespace bifp {

// Dense row-major double tensor, rank <= 5. All model math runs in double so
// finite-difference gradient checks and bit-exact checkpoint comparisons hold.
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> s, double fill = 0.0)
      : shape(std::move(s)), data(static_cast<size_t>(count(shape)), fill) {}

  static int64_t count(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  double& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  template <typename... Ix>
  int64_t offset(Ix... ix) const {
    const int64_t idx[] = {static_cast<int64_t>(ix)...};
    const int n = sizeof...(Ix);
    int64_t off = 0;
    for (int i = 0; i < n; ++i) off = off * shape[static_cast<size_t>(i)] + idx[i];
    return off;
  }

  template <typename... Ix>
  double& at(Ix... ix) {
    return data[static_cast<size_t>(offset(ix...))];
  }
  template <typename... Ix>
  double at(Ix... ix) const {
    return data[static_cast<size_t>(offset(ix...))];
  }

  void zero() { std::fill(data.begin(), data.end(), 0.0); }

  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape); }

  static Tensor full(std::vector<int64_t> s, double v) { return Tensor(std::move(s), v); }

  static Tensor randu(std::vector<int64_t> s, Rng& rng, double lo, double hi) {
    Tensor t(std::move(s));
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
  }

  static Tensor randn(std::vector<int64_t> s, Rng& rng, double sigma = 1.0) {
    Tensor t(std::move(s));
    for (auto& v : t.data) v = sigma * rng.normal();
    return t;
  }

  bool all_finite() const;
  std::string shape_str() const;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b))
    fail("ShapeMismatch", std::string(what) + ": " + a.shape_str() + " vs " + b.shape_str());
}

}  // namespace bifp
