#include "fmd/fmd.hpp"

#include <cmath>

#include "core/rng.hpp"

namespace fmpl {

namespace {
constexpr uint64_t kStreamTeacher = 5;
constexpr uint64_t kStreamDistill = 6;
constexpr uint64_t kStreamNoise = 9;

Tensor gather_batch(const Tensor& dataset, const std::vector<int>& idx) {
  int C = dataset.dim(1), H = dataset.dim(2), W = dataset.dim(3);
  int64_t img = int64_t(C) * H * W;
  Tensor out = Tensor::zeros({int(idx.size()), C, H, W});
  for (size_t i = 0; i < idx.size(); ++i)
    std::copy_n(dataset.ptr() + int64_t(idx[i]) * img, img, out.mut() + int64_t(i) * img);
  return out;
}

}  // namespace

void set_requires_grad(const std::vector<Tensor*>& params, bool value) {
  for (auto* p : params) p->requires_grad = value;
}

std::vector<double> NoiseSchedule::heun_grid(int n_steps) const {
  std::vector<double> grid(size_t(n_steps) + 1);
  double l0 = std::log(sigma_max), l1 = std::log(sigma_min);
  for (int i = 0; i <= n_steps; ++i)
    grid[size_t(i)] = std::exp(l0 + (l1 - l0) * double(i) / double(n_steps));
  return grid;
}

Tensor add_noise(const Tensor& f, double sigma, uint64_t seed) {
  if (!(sigma > 0.0)) throw std::invalid_argument("add_noise: sigma must be > 0");
  Rng rng = Rng::stream(seed, kStreamNoise);
  Tensor out = f.clone();
  out.requires_grad = false;
  double* p = out.mut();
  for (int64_t i = 0; i < out.size(); ++i) p[i] += sigma * rng.normal();
  return out;
}

Tensor edm_loss_node(DenoiserParams& p, const Tensor& batch, const NoiseSchedule& ns,
                     uint64_t seed) {
  if (batch.ndim() != 4 || batch.dim(0) < 1)
    throw ShapeError("edm_loss: expects nonempty [N,1,H,W] batch");
  int N = batch.dim(0);
  Rng rng = Rng::stream(seed, kStreamNoise);
  std::vector<double> sigmas(static_cast<size_t>(N));
  for (auto& s : sigmas) s = ns.sample(rng);
  Tensor noisy = batch.clone();
  noisy.requires_grad = false;
  {
    double* q = noisy.mut();
    int64_t img = batch.size() / N;
    for (int i = 0; i < N; ++i)
      for (int64_t j = 0; j < img; ++j) q[int64_t(i) * img + j] += sigmas[size_t(i)] * rng.normal();
  }
  Tensor pred = denoiser_forward(p, noisy, sigmas);
  Tensor diff = sub(pred, batch.detached());
  return mul_scalar(sum_all(mul(diff, diff)), 1.0 / double(N));
}

double edm_loss(DenoiserParams& p, const Tensor& batch, const NoiseSchedule& ns,
                uint64_t seed) {
  return edm_loss_node(p, batch, ns, seed).scalar();
}

Tensor score_from_denoised(const Tensor& denoised, const Tensor& f_t, double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("score: sigma must be > 0");
  return mul_scalar(sub(denoised, f_t), 1.0 / (sigma * sigma));
}

Tensor score_from_denoiser(DenoiserParams& p, const Tensor& f_t, double sigma) {
  std::vector<double> sig(size_t(f_t.dim(0)), sigma);
  return score_from_denoised(denoiser_forward(p, f_t, sig), f_t, sigma);
}

TeacherResult train_teacher(const Tensor& dataset, const FmdConfig& cfg, uint64_t seed) {
  if (dataset.ndim() != 4 || dataset.dim(0) < 1)
    throw std::invalid_argument("train_teacher: empty dataset");
  TeacherResult r;
  r.params = DenoiserParams::init(seed);
  set_requires_grad(r.params.tensors(), true);
  AdamOpt opt(cfg.teacher_lr);
  Rng rng = Rng::stream(seed, kStreamTeacher);
  int M = dataset.dim(0);
  for (int step = 0; step < cfg.teacher_steps; ++step) {
    std::vector<int> idx(size_t(std::min(cfg.teacher_batch, M)));
    for (auto& i : idx) i = int(rng.below(uint64_t(M)));
    Tensor batch = gather_batch(dataset, idx);
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      loss = edm_loss_node(r.params, batch, cfg.schedule, rng.next_u64());
    }
    if (!std::isfinite(loss.scalar()))
      throw NumericError("train_teacher: loss diverged at step " + std::to_string(step));
    GradMap gm = tape.backward(loss);
    auto params = r.params.tensors();
    opt.step(params, grads_for(gm, params));
    r.curve.push_back(loss.scalar());
  }
  return r;
}

Tensor sample_teacher_batch(DenoiserParams& p, int count, int rows, int cols,
                            int n_steps, const NoiseSchedule& ns, uint64_t seed) {
  if (n_steps < 1) throw std::invalid_argument("sample_teacher: n_steps >= 1");
  Rng rng = Rng::stream(seed, kStreamNoise).fork(0x5a3);
  Tensor x = Tensor::randn({count, 1, rows, cols}, rng, ns.sigma_max);
  std::vector<double> grid = ns.heun_grid(n_steps);
  for (int i = 0; i < n_steps; ++i) {
    double s0 = grid[size_t(i)], s1 = grid[size_t(i) + 1];
    std::vector<double> sv0(size_t(count), s0), sv1(size_t(count), s1);
    Tensor d0 = mul_scalar(sub(x, denoiser_forward(p, x, sv0)), 1.0 / s0);
    Tensor xe = add(x, mul_scalar(d0, s1 - s0));
    Tensor d1 = mul_scalar(sub(xe, denoiser_forward(p, xe, sv1)), 1.0 / s1);
    x = add(x, mul_scalar(add(d0, d1), 0.5 * (s1 - s0)));
  }
  Tensor out = x.clone();
  out.requires_grad = false;
  for (int64_t i = 0; i < out.size(); ++i)
    if (out.mut()[i] < 0.0) out.mut()[i] = 0.0;
  return out;
}

Tensor sample_teacher(DenoiserParams& p, int rows, int cols, int n_steps,
                      const NoiseSchedule& ns, uint64_t seed) {
  Tensor b = sample_teacher_batch(p, 1, rows, cols, n_steps, ns, seed);
  return reshape(b, {rows, cols});
}

std::vector<Tensor> dmd_generator_grad(GeneratorParams& G, DenoiserParams& real_score,
                                       DenoiserParams& fake_score, const Tensor& z,
                                       const NoiseSchedule& ns, uint64_t seed,
                                       bool normalize) {
  int N = z.dim(0);
  Tape tape;
  Tensor gout;
  {
    TapeScope scope(tape);
    gout = generator_forward(G, z);
  }
  // scores held constant: computed off-tape
  Rng rng = Rng::stream(seed, kStreamNoise).fork(0xd3d);
  std::vector<double> sigmas(static_cast<size_t>(N));
  for (auto& s : sigmas) s = ns.sample(rng);
  Tensor f_t = gout.detached().clone();
  f_t.requires_grad = false;
  {
    double* q = f_t.mut();
    int64_t img = f_t.size() / N;
    for (int i = 0; i < N; ++i)
      for (int64_t j = 0; j < img; ++j) q[int64_t(i) * img + j] += sigmas[size_t(i)] * rng.normal();
  }
  Tensor den_real = denoiser_forward(real_score, f_t, sigmas);
  Tensor den_fake = denoiser_forward(fake_score, f_t, sigmas);

  // cotangent = (s_fake - s_real) * [sigma^2 / mean|residual|] / N
  //           = -(residual / mean|residual|) / N, residual = mu_real - mu_fake
  Tensor cot = Tensor::zeros(gout.shape);
  int64_t img = gout.size() / N;
  const double* dr = den_real.ptr();
  const double* df = den_fake.ptr();
  double* pc = cot.mut();
  for (int i = 0; i < N; ++i) {
    double s2 = sigmas[size_t(i)] * sigmas[size_t(i)];
    double scale;
    if (normalize) {
      double l1 = 0.0;
      for (int64_t j = 0; j < img; ++j)
        l1 += std::fabs(dr[int64_t(i) * img + j] - df[int64_t(i) * img + j]);
      l1 /= double(img);
      scale = 1.0 / std::max(l1, 1e-12);
    } else {
      scale = 1.0 / s2;
    }
    for (int64_t j = 0; j < img; ++j) {
      int64_t at = int64_t(i) * img + j;
      pc[at] = (df[at] - dr[at]) * scale / double(N);
    }
  }
  GradMap gm = tape.backward_seeded(gout, cot);
  return grads_for(gm, G.tensors());
}

namespace {

// x_t = x + per-sample sigma * eps as a graph op (noise constant).
Tensor noised_node(const Tensor& x, const std::vector<double>& sigmas, Rng& rng) {
  int N = x.dim(0);
  Tensor noise = Tensor::zeros(x.shape);
  double* q = noise.mut();
  int64_t img = x.size() / N;
  for (int i = 0; i < N; ++i)
    for (int64_t j = 0; j < img; ++j) q[int64_t(i) * img + j] = sigmas[size_t(i)] * rng.normal();
  return add(x, noise);
}

}  // namespace

Tensor disc_loss_node(DiscriminatorParams& D, GeneratorParams& G,
                      const Tensor& real_batch, const Tensor& z,
                      const NoiseSchedule& ns, uint64_t seed) {
  Rng rng = Rng::stream(seed, kStreamNoise).fork(0x6a9);
  int N = real_batch.dim(0);
  std::vector<double> sig_r(static_cast<size_t>(N));
  std::vector<double> sig_f(static_cast<size_t>(z.dim(0)));
  for (auto& s : sig_r) s = ns.sample(rng);
  for (auto& s : sig_f) s = ns.sample(rng);
  Tensor fake;
  {
    // generator stays out of the discriminator graph
    bool prev = G.net.w1.requires_grad;
    set_requires_grad(G.tensors(), false);
    fake = generator_forward(G, z);
    set_requires_grad(G.tensors(), prev);
  }
  Tensor real_t = noised_node(real_batch.detached(), sig_r, rng);
  Tensor fake_t = noised_node(fake.detached(), sig_f, rng);
  Tensor logit_r = discriminator_forward(D, real_t);
  Tensor logit_f = discriminator_forward(D, fake_t);
  // -E log sigmoid(real) - E log(1 - sigmoid(fake)), in stable softplus form
  return add(mean_all(softplus(mul_scalar(logit_r, -1.0))), mean_all(softplus(logit_f)));
}

Tensor gen_gan_loss_node(DiscriminatorParams& D, GeneratorParams& G, const Tensor& z,
                         const NoiseSchedule& ns, uint64_t seed) {
  Rng rng = Rng::stream(seed, kStreamNoise).fork(0x6b0);
  std::vector<double> sig(size_t(z.dim(0)));
  for (auto& s : sig) s = ns.sample(rng);
  bool prev = D.w1.requires_grad;
  set_requires_grad(D.tensors(), false);
  Tensor fake_t = noised_node(generator_forward(G, z), sig, rng);
  Tensor loss = mean_all(softplus(mul_scalar(discriminator_forward(D, fake_t), -1.0)));
  set_requires_grad(D.tensors(), prev);
  return loss;
}

GanLossValues gan_losses(DiscriminatorParams& D, GeneratorParams& G,
                         const Tensor& real_batch, const Tensor& z,
                         const NoiseSchedule& ns, uint64_t seed) {
  GanLossValues v;
  v.loss_d = disc_loss_node(D, G, real_batch, z, ns, seed).scalar();
  v.loss_g = gen_gan_loss_node(D, G, z, ns, seed).scalar();
  return v;
}

DistillResult distill(const DenoiserParams& teacher, const Tensor& dataset,
                      const FmdConfig& cfg, uint64_t seed) {
  DistillResult r;
  r.generator = GeneratorParams::from_teacher(teacher, cfg.sigma_star);
  r.fake_score = teacher.clone();
  int rows = dataset.dim(2), cols = dataset.dim(3);
  r.discriminator = DiscriminatorParams::init(seed ^ 0x9c0ffee, rows, cols);
  set_requires_grad(r.generator.tensors(), true);
  set_requires_grad(r.fake_score.tensors(), true);
  set_requires_grad(r.discriminator.tensors(), true);

  // The real-score teacher stays frozen.
  DenoiserParams real_score = teacher.clone();
  set_requires_grad(real_score.tensors(), false);

  AdamOpt opt_gen(cfg.gen_lr);
  AdamOpt opt_fake(cfg.fake_lr);
  AdamOpt opt_disc(cfg.disc_lr);
  Rng rng = Rng::stream(seed, kStreamDistill);
  int M = dataset.dim(0);
  int B = std::min(cfg.distill_batch, M);

  auto draw_z = [&](int n) {
    return Tensor::randn({n, 1, rows, cols}, rng, 1.0);
  };

  for (int step = 0; step < cfg.distill_steps; ++step) {
    // fake-score updates on generator samples (Eq. 1 applied to fake data)
    if (cfg.lambda_dmd != 0.0) {
      for (int j = 0; j < cfg.fake_updates_per_gen; ++j) {
        Tensor x;
        {
          bool prev = r.generator.net.w1.requires_grad;
          set_requires_grad(r.generator.tensors(), false);
          x = generator_forward(r.generator, draw_z(B)).detached();
          set_requires_grad(r.generator.tensors(), prev);
        }
        Tape tape;
        Tensor loss;
        {
          TapeScope scope(tape);
          loss = edm_loss_node(r.fake_score, x, cfg.schedule, rng.next_u64());
        }
        if (!std::isfinite(loss.scalar()))
          throw NumericError("distill: fake-score loss diverged at step " +
                             std::to_string(step));
        GradMap gm = tape.backward(loss);
        auto ps = r.fake_score.tensors();
        opt_fake.step(ps, grads_for(gm, ps));
      }
    }

    // discriminator update
    if (cfg.lambda_gan != 0.0) {
      std::vector<int> idx(static_cast<size_t>(B));
      for (auto& i : idx) i = int(rng.below(uint64_t(M)));
      Tensor real = gather_batch(dataset, idx);
      Tape tape;
      Tensor loss;
      {
        TapeScope scope(tape);
        loss = disc_loss_node(r.discriminator, r.generator, real, draw_z(B),
                              cfg.schedule, rng.next_u64());
      }
      if (!std::isfinite(loss.scalar()))
        throw NumericError("distill: discriminator loss diverged at step " +
                           std::to_string(step));
      GradMap gm = tape.backward(loss);
      auto ps = r.discriminator.tensors();
      opt_disc.step(ps, grads_for(gm, ps));
      r.disc_loss_curve.push_back(loss.scalar());
    } else {
      r.disc_loss_curve.push_back(0.0);
    }

    // generator update: lambda_dmd * DMD gradient + lambda_gan * GAN gradient
    auto gparams = r.generator.tensors();
    std::vector<Tensor> total(gparams.size());
    for (size_t i = 0; i < gparams.size(); ++i) total[i] = Tensor::zeros(gparams[i]->shape);
    if (cfg.lambda_dmd != 0.0) {
      bool prev_f = r.fake_score.w1.requires_grad;
      set_requires_grad(r.fake_score.tensors(), false);
      auto gd = dmd_generator_grad(r.generator, real_score, r.fake_score, draw_z(B),
                                   cfg.schedule, rng.next_u64(), cfg.normalize_dmd);
      set_requires_grad(r.fake_score.tensors(), prev_f);
      for (size_t i = 0; i < total.size(); ++i)
        for (int64_t j = 0; j < total[i].size(); ++j)
          total[i].mut()[j] += cfg.lambda_dmd * gd[i].at(j);
    }
    double gan_g = 0.0;
    if (cfg.lambda_gan != 0.0) {
      Tape tape;
      Tensor loss;
      {
        TapeScope scope(tape);
        loss = gen_gan_loss_node(r.discriminator, r.generator, draw_z(B), cfg.schedule,
                                 rng.next_u64());
      }
      gan_g = loss.scalar();
      if (!std::isfinite(gan_g))
        throw NumericError("distill: generator GAN loss diverged at step " +
                           std::to_string(step));
      GradMap gm = tape.backward(loss);
      auto gg = grads_for(gm, gparams);
      for (size_t i = 0; i < total.size(); ++i)
        for (int64_t j = 0; j < total[i].size(); ++j)
          total[i].mut()[j] += cfg.lambda_gan * gg[i].at(j);
    }
    opt_gen.step(gparams, total);
    r.gen_loss_curve.push_back(cfg.lambda_gan * gan_g);
  }
  return r;
}

Tensor generate_one_shot(GeneratorParams& G, const Tensor& z) {
  if (z.ndim() != 3) throw ShapeError("generate_one_shot: expects [n_cp, rows, cols]");
  int n_cp = z.dim(0), R = z.dim(1), C = z.dim(2);
  Tensor z4 = reshape(z, {n_cp, 1, R, C});
  Tensor f = generator_forward(G, z4);
  return reshape(f, {n_cp, R, C});
}

}  // namespace fmpl
