#include "fmd/nets.hpp"

#include <cmath>

#include "core/rng.hpp"

namespace fmpl {

namespace {
constexpr uint64_t kStreamInit = 4;

Tensor he_normal(std::vector<int> shape, int fan_in, Rng& rng) {
  Tensor t = Tensor::randn(std::move(shape), rng, std::sqrt(2.0 / double(fan_in)));
  t.requires_grad = true;
  return t;
}

Tensor zero_param(std::vector<int> shape) {
  Tensor t = Tensor::zeros(std::move(shape));
  t.requires_grad = true;
  return t;
}

}  // namespace

DenoiserParams DenoiserParams::init(uint64_t seed) {
  Rng rng = Rng::stream(seed, kStreamInit);
  DenoiserParams p;
  p.w1 = he_normal({16, 1, 3, 3}, 9, rng);
  p.b1 = zero_param({16});
  p.w2 = he_normal({32, 16, 3, 3}, 16 * 9, rng);
  p.b2 = zero_param({32});
  p.w3 = he_normal({16, 32, 3, 3}, 32 * 9, rng);
  p.b3 = zero_param({16});
  p.wh = he_normal({1, 16, 3, 3}, 16 * 9, rng);
  p.bh = zero_param({1});
  return p;
}

NamedTensors DenoiserParams::named() {
  return {{"w1", &w1}, {"b1", &b1}, {"w2", &w2}, {"b2", &b2},
          {"w3", &w3}, {"b3", &b3}, {"wh", &wh}, {"bh", &bh}};
}

std::vector<Tensor*> DenoiserParams::tensors() {
  return {&w1, &b1, &w2, &b2, &w3, &b3, &wh, &bh};
}

DenoiserParams DenoiserParams::clone() const {
  DenoiserParams p;
  p.w1 = w1.clone();
  p.b1 = b1.clone();
  p.w2 = w2.clone();
  p.b2 = b2.clone();
  p.w3 = w3.clone();
  p.b3 = b3.clone();
  p.wh = wh.clone();
  p.bh = bh.clone();
  return p;
}

int64_t DenoiserParams::count() const {
  return w1.size() + b1.size() + w2.size() + b2.size() + w3.size() + b3.size() +
         wh.size() + bh.size();
}

Tensor sigma_embedding(const std::vector<double>& sigmas) {
  int n = int(sigmas.size());
  Tensor e = Tensor::zeros({n, 16});
  double* p = e.mut();
  for (int i = 0; i < n; ++i) {
    double ls = std::log(sigmas[size_t(i)]);
    for (int f = 0; f < 8; ++f) {
      double w = std::ldexp(0.25, f);  // 0.25 * 2^f
      p[size_t(i) * 16 + 2 * f] = std::sin(ls * w);
      p[size_t(i) * 16 + 2 * f + 1] = std::cos(ls * w);
    }
  }
  return e;
}

Tensor denoiser_forward(DenoiserParams& p, const Tensor& x,
                        const std::vector<double>& sigmas) {
  if (x.ndim() != 4 || x.dim(1) != 1)
    throw ShapeError("denoiser_forward: expects [N,1,H,W]");
  if (int(sigmas.size()) != x.dim(0))
    throw ShapeError("denoiser_forward: one sigma per sample");
  Tensor e = sigma_embedding(sigmas);
  Tensor h1 = silu(bias_nchw(conv2d(x, p.w1, p.b1, 1), e));
  Tensor h2 = silu(conv2d(h1, p.w2, p.b2, 2));
  Tensor h3 = silu(add(conv2d(upsample2x(h2), p.w3, p.b3, 1), h1));
  return conv2d(h3, p.wh, p.bh, 1);
}

GeneratorParams GeneratorParams::from_teacher(const DenoiserParams& teacher,
                                              double sigma_star) {
  GeneratorParams g;
  g.net = teacher.clone();
  g.sigma_star = sigma_star;
  return g;
}

Tensor generator_forward(GeneratorParams& g, const Tensor& z) {
  std::vector<double> sig(size_t(z.dim(0)), g.sigma_star);
  return softplus(denoiser_forward(g.net, mul_scalar(z, g.sigma_star), sig));
}

DiscriminatorParams DiscriminatorParams::init(uint64_t seed, int rows, int cols) {
  Rng rng = Rng::stream(seed, kStreamInit).fork(0xd15c);
  DiscriminatorParams d;
  d.w1 = he_normal({8, 1, 3, 3}, 9, rng);
  d.b1 = zero_param({8});
  d.w2 = he_normal({16, 8, 3, 3}, 8 * 9, rng);
  d.b2 = zero_param({16});
  d.w3 = he_normal({32, 16, 3, 3}, 16 * 9, rng);
  d.b3 = zero_param({32});
  int h = rows, w = cols;
  for (int i = 0; i < 3; ++i) {
    h = (h + 2 - 3) / 2 + 1;
    w = (w + 2 - 3) / 2 + 1;
  }
  int flat = 32 * h * w;
  d.wl = he_normal({flat, 1}, flat, rng);
  d.bl = zero_param({1});
  return d;
}

NamedTensors DiscriminatorParams::named() {
  return {{"w1", &w1}, {"b1", &b1}, {"w2", &w2}, {"b2", &b2},
          {"w3", &w3}, {"b3", &b3}, {"wl", &wl}, {"bl", &bl}};
}

std::vector<Tensor*> DiscriminatorParams::tensors() {
  return {&w1, &b1, &w2, &b2, &w3, &b3, &wl, &bl};
}

Tensor discriminator_forward(DiscriminatorParams& d, const Tensor& x) {
  Tensor h1 = silu(conv2d(x, d.w1, d.b1, 2));
  Tensor h2 = silu(conv2d(h1, d.w2, d.b2, 2));
  Tensor h3 = silu(conv2d(h2, d.w3, d.b3, 2));
  int n = h3.dim(0);
  int flat = int(h3.size() / n);
  Tensor v = reshape(h3, {n, flat});
  return add(matmul(v, d.wl), broadcast_lead(reshape(d.bl, {1}), n));
}

std::vector<Tensor> grads_for(const GradMap& gm, const std::vector<Tensor*>& params) {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (auto* p : params) out.push_back(gm.grad(*p));
  return out;
}

}  // namespace fmpl
