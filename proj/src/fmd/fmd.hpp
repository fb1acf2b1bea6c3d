#pragma once

#include <cstdint>
#include <vector>

#include "fmd/nets.hpp"

namespace fmpl {

// Variance-exploding schedule: alpha_t = 1, training sigma log-uniform.
struct NoiseSchedule {
  double sigma_min = 0.02;
  double sigma_max = 10.0;

  double sample(Rng& rng) const {
    return std::exp(rng.uniform(std::log(sigma_min), std::log(sigma_max)));
  }
  // n_steps + 1 geometric points from sigma_max down to sigma_min
  std::vector<double> heun_grid(int n_steps) const;
};

struct FmdConfig {
  NoiseSchedule schedule;
  double sigma_star = 10.0;  // generator evaluation noise level (= sigma_max)
  int teacher_steps = 1500;
  int teacher_batch = 16;
  double teacher_lr = 1e-4;
  int distill_steps = 300;  // generator updates
  int distill_batch = 8;
  int fake_updates_per_gen = 5;
  double fake_lr = 1e-4;
  double disc_lr = 1e-4;
  double gen_lr = 2e-5;
  double lambda_dmd = 1.0;
  double lambda_gan = 0.1;
  bool normalize_dmd = true;
};

// f_t = f + sigma * eps with seeded standard normal eps.
Tensor add_noise(const Tensor& f, double sigma, uint64_t seed);

// Denoising score-matching loss: mean over the batch of ||mu(f_t) - f||_2^2
// with per-sample log-uniform sigma. Recorded on the active tape.
Tensor edm_loss_node(DenoiserParams& p, const Tensor& batch, const NoiseSchedule& ns,
                     uint64_t seed);
double edm_loss(DenoiserParams& p, const Tensor& batch, const NoiseSchedule& ns,
                uint64_t seed);

// Tweedie identity under alpha = 1: s = (denoised - f_t) / sigma^2.
Tensor score_from_denoised(const Tensor& denoised, const Tensor& f_t, double sigma);
Tensor score_from_denoiser(DenoiserParams& p, const Tensor& f_t, double sigma);

struct TeacherResult {
  DenoiserParams params;
  std::vector<double> curve;
};

// dataset: [M,1,H,W] stack of deliverable per-CP fluence maps.
TeacherResult train_teacher(const Tensor& dataset, const FmdConfig& cfg, uint64_t seed);

// Deterministic 2nd-order Heun probability-flow sampling, output clamped at 0.
Tensor sample_teacher_batch(DenoiserParams& p, int count, int rows, int cols,
                            int n_steps, const NoiseSchedule& ns, uint64_t seed);
Tensor sample_teacher(DenoiserParams& p, int rows, int cols, int n_steps,
                      const NoiseSchedule& ns, uint64_t seed);

// Distribution-matching gradient: the score difference -(s_real - s_fake),
// optionally normalized per sample by sigma^2 / mean|residual|, backpropagated
// into G(z) as the output cotangent with both scores held constant.
std::vector<Tensor> dmd_generator_grad(GeneratorParams& G, DenoiserParams& real_score,
                                       DenoiserParams& fake_score, const Tensor& z,
                                       const NoiseSchedule& ns, uint64_t seed,
                                       bool normalize);

struct GanLossValues {
  double loss_d = 0;
  double loss_g = 0;
};

// Non-saturating logistic losses on noised real and generated samples.
GanLossValues gan_losses(DiscriminatorParams& D, GeneratorParams& G,
                         const Tensor& real_batch, const Tensor& z,
                         const NoiseSchedule& ns, uint64_t seed);

// Graph builders used by the training loop (and the FD tests).
Tensor disc_loss_node(DiscriminatorParams& D, GeneratorParams& G,
                      const Tensor& real_batch, const Tensor& z,
                      const NoiseSchedule& ns, uint64_t seed);
Tensor gen_gan_loss_node(DiscriminatorParams& D, GeneratorParams& G, const Tensor& z,
                         const NoiseSchedule& ns, uint64_t seed);

struct DistillResult {
  GeneratorParams generator;
  DenoiserParams fake_score;
  DiscriminatorParams discriminator;
  std::vector<double> gen_loss_curve;   // lambda_gan * gan G loss per step
  std::vector<double> disc_loss_curve;
};

DistillResult distill(const DenoiserParams& teacher, const Tensor& dataset,
                      const FmdConfig& cfg, uint64_t seed);

// Per-CP one-shot generation: z [n_cp, rows, cols] -> fluence of same shape,
// nonnegative, differentiable w.r.t. z.
Tensor generate_one_shot(GeneratorParams& G, const Tensor& z);

void set_requires_grad(const std::vector<Tensor*>& params, bool value);

}  // namespace fmpl
