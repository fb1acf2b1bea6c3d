#pragma once

#include <cstdint>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "core/rng.hpp"

namespace fmpl {

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Raised when a forward op produces NaN/Inf or a loss diverges.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dense row-major f64 tensor. Values are immutable once the tensor takes
// part in a graph; parameter buffers are mutated only between graph
// lifetimes (see Tape).
struct Tensor {
  std::vector<int> shape;
  std::shared_ptr<std::vector<double>> data;
  bool requires_grad = false;

  Tensor() = default;

  int64_t size() const {
    if (!data) return 0;
    return int64_t(data->size());
  }
  bool defined() const { return bool(data); }

  const double* ptr() const { return data->data(); }
  double* mut() { return data->data(); }  // parameter updates only

  double at(int64_t i) const { return (*data)[size_t(i)]; }
  double scalar() const {
    if (size() != 1) throw ShapeError("Tensor::scalar: size != 1");
    return (*data)[0];
  }

  int dim(int i) const { return shape[size_t(i)]; }
  int ndim() const { return int(shape.size()); }

  static int64_t numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
      if (d <= 0) throw ShapeError("non-positive dimension");
      n *= d;
    }
    return n;
  }

  static Tensor zeros(std::vector<int> shape);
  static Tensor full(std::vector<int> shape, double v);
  static Tensor from(std::vector<int> shape, std::vector<double> values);
  static Tensor scalar_tensor(double v);
  static Tensor randn(std::vector<int> shape, Rng& rng, double stddev = 1.0);

  Tensor detached() const {  // same storage, cut from any graph
    Tensor t = *this;
    t.requires_grad = false;
    return t;
  }
  Tensor clone() const;                 // deep copy
  Tensor with_grad() const {            // mark as differentiable leaf
    Tensor t = *this;
    t.requires_grad = true;
    return t;
  }

  bool all_finite() const;
};

std::string shape_str(const std::vector<int>& s);

}  // namespace fmpl
