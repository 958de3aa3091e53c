#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <sstream>
#include <string>
#include <vector>

#include "czsl/errors.hpp"

namespace czsl {

// Element type of all tensors. 32-bit by default; reductions always
// accumulate in double regardless of this setting.
#ifdef CZSL_REAL64
using real = double;
#else
using real = float;
#endif

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << ")";
  return os.str();
}

// Dense row-major tensor of rank 0..2.
struct Tensor {
  Shape shape;
  std::vector<real> data;

  Tensor() = default;
  Tensor(Shape s, std::vector<real> d) : shape(std::move(s)), data(std::move(d)) {}

  static Tensor scalar(real v) { return Tensor({}, {v}); }
  static Tensor zeros(const Shape& s) {
    return Tensor(s, std::vector<real>(static_cast<size_t>(shape_numel(s)), real(0)));
  }
  static Tensor full(const Shape& s, real v) {
    return Tensor(s, std::vector<real>(static_cast<size_t>(shape_numel(s)), v));
  }
  static Tensor vec(std::vector<real> d) {
    Shape s{static_cast<int>(d.size())};
    return Tensor(std::move(s), std::move(d));
  }
  static Tensor vec(std::initializer_list<real> d) { return vec(std::vector<real>(d)); }
  static Tensor matrix(int rows, int cols, std::vector<real> d) {
    if (static_cast<int64_t>(d.size()) != int64_t(rows) * cols)
      throw ShapeError("matrix: data length " + std::to_string(d.size()) + " does not match " +
                       std::to_string(rows) + "x" + std::to_string(cols));
    return Tensor({rows, cols}, std::move(d));
  }

  int rank() const { return static_cast<int>(shape.size()); }
  int64_t size() const { return static_cast<int64_t>(data.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }

  real& at(int i) { return data[static_cast<size_t>(i)]; }
  real at(int i) const { return data[static_cast<size_t>(i)]; }
  real& at(int r, int c) { return data[static_cast<size_t>(r) * shape[1] + c]; }
  real at(int r, int c) const { return data[static_cast<size_t>(r) * shape[1] + c]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (real v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

// Throws NumericError if the tensor holds NaN/Inf. Every op output is
// checked so non-finite values never propagate silently.
inline void check_finite(const Tensor& t, const char* what) {
  if (!t.all_finite()) throw NumericError(std::string(what) + ": non-finite value");
}

inline double dot64(const Tensor& a, const Tensor& b) {
  double acc = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) acc += double(a.data[i]) * double(b.data[i]);
  return acc;
}

inline double norm64(const Tensor& a) {
  double acc = 0.0;
  for (real v : a.data) acc += double(v) * double(v);
  return std::sqrt(acc);
}

}  // namespace czsl
