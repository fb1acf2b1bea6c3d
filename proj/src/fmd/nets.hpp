#pragma once

#include <cstdint>
#include <vector>

#include "core/autodiff.hpp"
#include "core/optim.hpp"

namespace fmpl {

// Small convolutional denoiser: conv(1->16) + sinusoidal noise embedding,
// strided conv(16->32) down, nearest-neighbor up, conv(32->16) with a skip
// from the first stage, 3x3 head to one channel. ~10k parameters.
struct DenoiserParams {
  Tensor w1, b1;  // 16 x 1 x 3 x 3
  Tensor w2, b2;  // 32 x 16 x 3 x 3, stride 2
  Tensor w3, b3;  // 16 x 32 x 3 x 3
  Tensor wh, bh;  // 1 x 16 x 3 x 3

  static DenoiserParams init(uint64_t seed);
  NamedTensors named();
  std::vector<Tensor*> tensors();
  DenoiserParams clone() const;
  int64_t count() const;
};

// 16-dim sinusoidal embedding of log sigma, one row per sample.
Tensor sigma_embedding(const std::vector<double>& sigmas);

// x [N,1,H,W] -> prediction of the clean map, [N,1,H,W].
Tensor denoiser_forward(DenoiserParams& p, const Tensor& x,
                        const std::vector<double>& sigmas);

// Generator: denoiser body evaluated at fixed sigma_star on sigma_star * z,
// softplus head keeps the output nonnegative.
struct GeneratorParams {
  DenoiserParams net;
  double sigma_star = 10.0;

  static GeneratorParams from_teacher(const DenoiserParams& teacher, double sigma_star);
  NamedTensors named() { return net.named(); }
  std::vector<Tensor*> tensors() { return net.tensors(); }
};

Tensor generator_forward(GeneratorParams& g, const Tensor& z);  // z [N,1,H,W]

// 3 strided conv layers (8, 16, 32) + linear head to one logit per sample.
struct DiscriminatorParams {
  Tensor w1, b1;  // 8 x 1
  Tensor w2, b2;  // 16 x 8
  Tensor w3, b3;  // 32 x 16
  Tensor wl, bl;  // [32*2*3, 1], [1]

  static DiscriminatorParams init(uint64_t seed, int rows, int cols);
  NamedTensors named();
  std::vector<Tensor*> tensors();
};

Tensor discriminator_forward(DiscriminatorParams& d, const Tensor& x);  // [N,1]

std::vector<Tensor> grads_for(const GradMap& gm, const std::vector<Tensor*>& params);

}  // namespace fmpl
