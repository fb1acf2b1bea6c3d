#include "core/tensor.hpp"

#include <cmath>

namespace fmpl {

Tensor Tensor::zeros(std::vector<int> shape) {
  Tensor t;
  int64_t n = numel(shape);
  t.shape = std::move(shape);
  t.data = std::make_shared<std::vector<double>>(size_t(n), 0.0);
  return t;
}

Tensor Tensor::full(std::vector<int> shape, double v) {
  Tensor t = zeros(std::move(shape));
  for (auto& x : *t.data) x = v;
  return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> values) {
  if (numel(shape) != int64_t(values.size()))
    throw ShapeError("Tensor::from: data length does not match shape");
  Tensor t;
  t.shape = std::move(shape);
  t.data = std::make_shared<std::vector<double>>(std::move(values));
  return t;
}

Tensor Tensor::scalar_tensor(double v) { return from({1}, {v}); }

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, double stddev) {
  Tensor t = zeros(std::move(shape));
  for (auto& x : *t.data) x = stddev * rng.normal();
  return t;
}

Tensor Tensor::clone() const {
  Tensor t;
  t.shape = shape;
  t.data = std::make_shared<std::vector<double>>(*data);
  t.requires_grad = requires_grad;
  return t;
}

bool Tensor::all_finite() const {
  for (double v : *data)
    if (!std::isfinite(v)) return false;
  return true;
}

std::string shape_str(const std::vector<int>& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

}  // namespace fmpl
