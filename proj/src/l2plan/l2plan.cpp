#include "l2plan/l2plan.hpp"

#include <cmath>

#include "core/rng.hpp"
#include "fmd/fmd.hpp"

namespace fmpl {

namespace {
constexpr uint64_t kStreamMeta = 7;
constexpr uint64_t kStreamPlanInit = 8;
constexpr int kHidden = 16;

double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

// Bias such that the sigmoid op returns exactly p for zero hidden state.
double logit_exact(double p) {
  double b = std::log(p / (1.0 - p));
  for (int i = 0; i < 64; ++i) {
    double s = sigmoid_scalar(b);
    if (s == p) return b;
    b = std::nextafter(b, s < p ? std::numeric_limits<double>::infinity()
                                : -std::numeric_limits<double>::infinity());
  }
  return b;
}

Tensor grad_param(std::vector<int> shape, Rng& rng, double stddev) {
  Tensor t = Tensor::randn(std::move(shape), rng, stddev);
  t.requires_grad = true;
  return t;
}

}  // namespace

MetaOptimizerParams MetaOptimizerParams::init(uint64_t seed) {
  Rng rng = Rng::stream(seed, kStreamMeta).fork(0x11117);
  MetaOptimizerParams p;
  // identity block: the first two feature channels reproduce the inputs
  p.delta_w = Tensor::zeros({2, 8});
  p.delta_w.mut()[0 * 8 + 0] = 1.0;
  p.delta_w.mut()[1 * 8 + 1] = 1.0;
  p.delta_w.requires_grad = true;
  p.delta_b = Tensor::zeros({8});
  p.delta_b.requires_grad = true;

  const double ws = 0.08;
  p.l1_wih = grad_param({8, 4 * kHidden}, rng, ws);
  p.l1_whh = grad_param({kHidden, 4 * kHidden}, rng, ws);
  p.l1_b = Tensor::zeros({4 * kHidden});
  p.l1_b.requires_grad = true;
  p.l2_wih = grad_param({kHidden, 4 * kHidden}, rng, ws);
  p.l2_whh = grad_param({kHidden, 4 * kHidden}, rng, ws);
  p.l2_b = Tensor::zeros({4 * kHidden});
  p.l2_b.requires_grad = true;

  p.hb_w = Tensor::zeros({kHidden, 1});
  p.hb_w.requires_grad = true;
  p.hb_b = Tensor::from({1}, {logit_exact(0.9)});
  p.hb_b.requires_grad = true;
  p.hg_w = Tensor::zeros({kHidden, 1});
  p.hg_w.requires_grad = true;
  p.hg_b = Tensor::from({1}, {logit_exact(0.999)});
  p.hg_b.requires_grad = true;
  return p;
}

NamedTensors MetaOptimizerParams::named() {
  return {{"delta_w", &delta_w}, {"delta_b", &delta_b}, {"l1_wih", &l1_wih},
          {"l1_whh", &l1_whh},   {"l1_b", &l1_b},       {"l2_wih", &l2_wih},
          {"l2_whh", &l2_whh},   {"l2_b", &l2_b},       {"hb_w", &hb_w},
          {"hb_b", &hb_b},       {"hg_w", &hg_w},       {"hg_b", &hg_b}};
}

std::vector<Tensor*> MetaOptimizerParams::tensors() {
  return {&delta_w, &delta_b, &l1_wih, &l1_whh, &l1_b, &l2_wih,
          &l2_whh,  &l2_b,    &hb_w,   &hb_b,   &hg_w, &hg_b};
}

GroupState GroupState::init(int64_t n) {
  GroupState s;
  s.h1 = Tensor::zeros({int(n), kHidden});
  s.c1 = Tensor::zeros({int(n), kHidden});
  s.h2 = Tensor::zeros({int(n), kHidden});
  s.c2 = Tensor::zeros({int(n), kHidden});
  s.m = Tensor::zeros({int(n)});
  s.v = Tensor::zeros({int(n)});
  s.prod_beta = Tensor::full({int(n)}, 1.0);
  s.prod_gamma = Tensor::full({int(n)}, 1.0);
  return s;
}

MetaOptimizerState MetaOptimizerState::init(int64_t n_z, int64_t n_mu) {
  MetaOptimizerState s;
  s.z = GroupState::init(n_z);
  s.mu = GroupState::init(n_mu);
  s.k = 0;
  return s;
}

Tensor preprocess_raw(const Tensor& g_flat) {
  if (!g_flat.all_finite()) throw NumericError("preprocess_raw: non-finite gradient");
  int64_t n = g_flat.size();
  double rms = 0.0;
  const double* g = g_flat.ptr();
  for (int64_t i = 0; i < n; ++i) rms += g[i] * g[i];
  rms = std::sqrt(rms / double(n));
  double denom = std::max(rms, 1e-8);
  Tensor out = Tensor::zeros({int(n), 2});
  double* p = out.mut();
  for (int64_t i = 0; i < n; ++i) {
    double gh = g[i] / denom;
    p[2 * i] = gh;
    p[2 * i + 1] = std::clamp(std::log(std::fabs(gh) + 1e-8), -10.0, 10.0);
  }
  return out;
}

Tensor preprocess_features(MetaOptimizerParams& p, const Tensor& raw) {
  return add(matmul(raw, p.delta_w), broadcast_lead(p.delta_b, raw.dim(0)));
}

Tensor preprocess_gradient(MetaOptimizerParams& p, const Tensor& g_flat) {
  return preprocess_features(p, preprocess_raw(g_flat));
}

void lstm_step(MetaOptimizerParams& p, const Tensor& features, GroupState& s) {
  Tensor o1 = lstm_cell(features, s.h1, s.c1, p.l1_wih, p.l1_whh, p.l1_b);
  s.h1 = slice(o1, 1, 0, kHidden);
  s.c1 = slice(o1, 1, kHidden, 2 * kHidden);
  Tensor o2 = lstm_cell(s.h1, s.h2, s.c2, p.l2_wih, p.l2_whh, p.l2_b);
  s.h2 = slice(o2, 1, 0, kHidden);
  s.c2 = slice(o2, 1, kHidden, 2 * kHidden);
}

HyperPred predict_hyperparams(MetaOptimizerParams& p, const GroupState& s) {
  int n = s.h2.dim(0);
  HyperPred h;
  h.beta = sigmoid(reshape(add(matmul(s.h2, p.hb_w), broadcast_lead(p.hb_b, n)), {n}));
  h.gamma = sigmoid(reshape(add(matmul(s.h2, p.hg_w), broadcast_lead(p.hg_b, n)), {n}));
  return h;
}

OptStepResult optimizee_step(const Tensor& phi, const Tensor& g, const Tensor& m,
                             const Tensor& v, const Tensor& beta, const Tensor& gamma,
                             const Tensor& prod_beta, const Tensor& prod_gamma,
                             int64_t k, double eta, double eps,
                             bool const_bias_correction) {
  if (k < 1) throw std::invalid_argument("optimizee_step: k must be >= 1");
  OptStepResult r;
  r.m = add(mul(beta, m), mul(rsub_scalar(1.0, beta), g));
  Tensor g2 = mul(g, g);
  r.v = add(mul(gamma, v), mul(rsub_scalar(1.0, gamma), g2));
  r.prod_beta = mul(prod_beta, beta);
  r.prod_gamma = mul(prod_gamma, gamma);
  Tensor mhat, vhat;
  if (const_bias_correction) {
    double c1 = 1.0 - std::pow(0.9, double(k));
    double c2 = 1.0 - std::pow(0.999, double(k));
    mhat = mul_scalar(r.m, 1.0 / c1);
    vhat = mul_scalar(r.v, 1.0 / c2);
  } else {
    mhat = divide(r.m, rsub_scalar(1.0, r.prod_beta));
    vhat = divide(r.v, rsub_scalar(1.0, r.prod_gamma));
  }
  Tensor delta = mul_scalar(divide(mhat, add_scalar(sqrt_t(vhat), eps)), -eta);
  r.phi = add(phi, delta);
  return r;
}

PlanningProblem make_problem(const Case& cs) {
  PlanningProblem p;
  p.cs = &cs;
  p.A = std::make_shared<DepositionOperator>(
      build_deposition(cs.phantom, cs.arc, cs.machine));
  p.dstar = cs.dstar.detached();
  return p;
}

ObjectiveEval eval_plan_objective(GeneratorParams& G, const PlanningProblem& prob,
                                  const Tensor& z_flat, const Tensor& mu_raw) {
  const Case& cs = *prob.cs;
  int n_cp = cs.arc.n_cp, R = cs.machine.n_rows, C = cs.machine.n_cols;
  ObjectiveEval ev;
  Tensor z3 = reshape(z_flat, {n_cp, R, C});
  ev.fluence = generate_one_shot(G, z3);
  double span = cs.machine.mu_max - cs.machine.mu_min;
  ev.mu = add_scalar(mul_scalar(sigmoid(mu_raw), span), cs.machine.mu_min);
  ev.dose = dose_forward_node(prob.A, ev.fluence, ev.mu);

  Tensor ptv_mask, oar_mask;
  const Tensor* pm = nullptr;
  const Tensor* om = nullptr;
  if (prob.flex == FlexKind::PtvHomogeneity) {
    ptv_mask = mask_to_tensor(cs.phantom.ptv);
    pm = &ptv_mask;
  } else if (prob.flex == FlexKind::OarSparing) {
    Mask u(size_t(kGridN), 0);
    for (int64_t i = 0; i < kGridN; ++i)
      u[size_t(i)] = cs.phantom.oars[0][size_t(i)] | cs.phantom.oars[1][size_t(i)];
    oar_mask = mask_to_tensor(u);
    om = &oar_mask;
  }
  ev.loss = plan_loss_graph(ev.dose, prob.dstar, z3, ev.mu, prob.lambda_z,
                            prob.lambda_mu, pm, prob.prescription, om, prob.lambda_x);
  return ev;
}

namespace {

StepRecord to_record(const PlanLossBreakdown& b) {
  StepRecord r;
  r.l_dose = b.l_dose;
  r.l_cont_z = b.l_cont_z;
  r.l_cont_mu = b.l_cont_mu;
  r.l_extra = b.l_extra;
  r.total = b.total;
  return r;
}

}  // namespace

RolloutResult inner_rollout(const PlanningProblem& prob, GeneratorParams& G,
                            MetaOptimizerParams& meta, const PlanParameters& phi0,
                            const RolloutOptions& opt) {
  if (opt.k_i < 1) throw std::invalid_argument("inner_rollout: k_i >= 1");
  Tape* meta_tape = Tape::current();
  if (opt.meta_graph && meta_tape == nullptr)
    throw std::logic_error("inner_rollout: meta_graph mode needs an active tape");
  set_requires_grad(G.tensors(), false);

  int64_t nz = phi0.z.size(), nmu = phi0.mu_raw.size();
  MetaOptimizerState st = MetaOptimizerState::init(nz, nmu);

  Tensor z = phi0.z.clone();
  z.requires_grad = true;
  Tensor mu_raw = phi0.mu_raw.clone();
  mu_raw.requires_grad = true;

  RolloutResult res;
  std::vector<Tensor> window;
  int win_from = std::max(0, opt.k_i - opt.outer_window + 1);

  for (int k = 0;; ++k) {
    bool need_g = k < opt.k_i;
    bool on_meta = opt.meta_graph && k >= win_from;
    Tensor gz, gmu;
    ObjectiveEval ev;
    if (on_meta) {
      ev = eval_plan_objective(G, prob, z, mu_raw);
      window.push_back(ev.loss.total);
      if (need_g && opt.replay_g == nullptr) {
        GradMap gm = meta_tape->backward(ev.loss.total, {z, mu_raw});
        gz = gm.grad(z);
        gmu = gm.grad(mu_raw);
      }
    } else {
      Tensor zc = z.detached();
      zc.requires_grad = true;
      Tensor mc = mu_raw.detached();
      mc.requires_grad = true;
      Tape sub;
      {
        TapeScope scope(sub);
        ev = eval_plan_objective(G, prob, zc, mc);
        if (need_g && opt.replay_g == nullptr) {
          GradMap gm = sub.backward(ev.loss.total);
          gz = gm.grad(zc);
          gmu = gm.grad(mc);
        }
      }
    }
    if (!std::isfinite(ev.loss.total.scalar()))
      throw NumericError("inner_rollout: non-finite loss at step " + std::to_string(k));
    res.trace.push_back(to_record(ev.loss.values()));

    if (!need_g) {
      res.fluence = ev.fluence.detached();
      res.dose = ev.dose.detached();
      res.mu.assign(ev.mu.ptr(), ev.mu.ptr() + ev.mu.size());
      break;
    }
    if (opt.replay_g != nullptr) {
      gz = (*opt.replay_g)[size_t(k)].first;
      gmu = (*opt.replay_g)[size_t(k)].second;
    }
    if (opt.capture_gradients) res.g_seq.emplace_back(gz, gmu);

    st.k += 1;
    Tensor beta_z, gamma_z, beta_mu, gamma_mu;
    if (opt.pin_heads) {
      beta_z = Tensor::full({int(nz)}, 0.9);
      gamma_z = Tensor::full({int(nz)}, 0.999);
      beta_mu = Tensor::full({int(nmu)}, 0.9);
      gamma_mu = Tensor::full({int(nmu)}, 0.999);
    } else {
      lstm_step(meta, preprocess_gradient(meta, gz), st.z);
      HyperPred hz = predict_hyperparams(meta, st.z);
      beta_z = hz.beta;
      gamma_z = hz.gamma;
      lstm_step(meta, preprocess_gradient(meta, gmu), st.mu);
      HyperPred hm = predict_hyperparams(meta, st.mu);
      beta_mu = hm.beta;
      gamma_mu = hm.gamma;
    }
    OptStepResult rz =
        optimizee_step(z, gz, st.z.m, st.z.v, beta_z, gamma_z, st.z.prod_beta,
                       st.z.prod_gamma, st.k, opt.eta, opt.eps,
                       opt.const_bias_correction);
    z = rz.phi;
    st.z.m = rz.m;
    st.z.v = rz.v;
    st.z.prod_beta = rz.prod_beta;
    st.z.prod_gamma = rz.prod_gamma;
    OptStepResult rm =
        optimizee_step(mu_raw, gmu, st.mu.m, st.mu.v, beta_mu, gamma_mu,
                       st.mu.prod_beta, st.mu.prod_gamma, st.k, opt.eta, opt.eps,
                       opt.const_bias_correction);
    mu_raw = rm.phi;
    st.mu.m = rm.m;
    st.mu.v = rm.v;
    st.mu.prod_beta = rm.prod_beta;
    st.mu.prod_gamma = rm.prod_gamma;
  }

  res.phi.z = z.detached();
  res.phi.mu_raw = mu_raw.detached();
  if (opt.meta_graph) {
    Tensor acc = window[0];
    for (size_t i = 1; i < window.size(); ++i) acc = add(acc, window[i]);
    res.outer_loss = mul_scalar(acc, 1.0 / double(window.size()));
  }
  return res;
}

MetaTrainResult meta_train(const std::vector<PlanningProblem>& cases,
                           GeneratorParams& G, const L2PlanConfig& cfg,
                           uint64_t seed) {
  if (cases.empty()) throw std::invalid_argument("meta_train: no cases");
  MetaTrainResult r;
  r.params = MetaOptimizerParams::init(seed);
  if (cfg.K0 <= 0) return r;  // pure Adam behavior by construction
  set_requires_grad(G.tensors(), false);

  AdamOpt opt(cfg.meta_lr);
  Rng rng = Rng::stream(seed, kStreamMeta);
  const Case& c0 = *cases[0].cs;
  int64_t nz = int64_t(c0.arc.n_cp) * c0.machine.n_rows * c0.machine.n_cols;

  RolloutOptions ro;
  ro.k_i = cfg.k_i;
  ro.meta_graph = true;
  ro.eta = cfg.eta;
  ro.eps = cfg.eps;
  ro.outer_window = cfg.outer_window;
  ro.const_bias_correction = cfg.const_bias_correction;

  for (int outer = 0; outer < cfg.K0; ++outer) {
    const PlanningProblem& prob = cases[size_t(rng.below(cases.size()))];
    PlanParameters phi0;
    Rng zrng = rng.fork(0x9f1e + uint64_t(outer));
    phi0.z = Tensor::randn({int(nz)}, zrng, 1.0);
    phi0.mu_raw = Tensor::zeros({prob.cs->arc.n_cp});

    Tape tape;
    RolloutResult rr;
    {
      TapeScope scope(tape);
      rr = inner_rollout(prob, G, r.params, phi0, ro);
    }
    double outer_loss = rr.outer_loss.scalar();
    if (!std::isfinite(outer_loss))
      throw NumericError("meta_train: outer loss diverged at step " +
                         std::to_string(outer));
    GradMap gm = tape.backward(rr.outer_loss);
    auto params = r.params.tensors();
    std::vector<Tensor> grads = grads_for(gm, params);
    clip_grad_norm(grads, cfg.grad_clip);
    opt.step(params, grads);
    r.curve.push_back(outer_loss);
  }
  return r;
}

BaselineHyper BaselineHyper::defaults(BaselineKind k) {
  BaselineHyper h;
  switch (k) {
    case BaselineKind::Adam:
      h.lr = 1e-2;
      h.beta1 = 0.9;
      h.beta2 = 0.999;
      h.eps = 1e-8;
      break;
    case BaselineKind::SgdMomentum:
      h.lr = 1e-2;
      h.momentum = 0.9;
      break;
    case BaselineKind::RmsProp:
      h.lr = 1e-2;
      h.rho = 0.99;
      h.eps = 1e-8;
      break;
  }
  return h;
}

BaselineState BaselineState::init(int64_t n) {
  BaselineState s;
  s.m = Tensor::zeros({int(n)});
  s.v = Tensor::zeros({int(n)});
  return s;
}

void baseline_step(BaselineKind kind, Tensor& phi, const Tensor& g,
                   BaselineState& st, const BaselineHyper& h) {
  if (phi.shape != g.shape) throw ShapeError("baseline_step: shape mismatch");
  double* p = phi.mut();
  const double* gp = g.ptr();
  double* m = st.m.mut();
  double* v = st.v.mut();
  int64_t n = phi.size();
  st.k += 1;
  switch (kind) {
    case BaselineKind::Adam: {
      st.pow1 *= h.beta1;
      st.pow2 *= h.beta2;
      double c1 = 1.0 - st.pow1;
      double c2 = 1.0 - st.pow2;
      for (int64_t i = 0; i < n; ++i) {
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * gp[i];
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * (gp[i] * gp[i]);
        double mhat = m[i] / c1;
        double vhat = v[i] / c2;
        p[i] = p[i] + (mhat / (std::sqrt(vhat) + h.eps)) * (-h.lr);
      }
      break;
    }
    case BaselineKind::SgdMomentum: {
      for (int64_t i = 0; i < n; ++i) {
        m[i] = h.momentum * m[i] + gp[i];
        p[i] -= h.lr * m[i];
      }
      break;
    }
    case BaselineKind::RmsProp: {
      for (int64_t i = 0; i < n; ++i) {
        v[i] = h.rho * v[i] + (1.0 - h.rho) * (gp[i] * gp[i]);
        p[i] -= h.lr * gp[i] / (std::sqrt(v[i]) + h.eps);
      }
      break;
    }
  }
}

PlanParameters init_phi(const PlanningProblem& prob, uint64_t seed) {
  const Case& cs = *prob.cs;
  int64_t nz = int64_t(cs.arc.n_cp) * cs.machine.n_rows * cs.machine.n_cols;
  Rng rng = Rng::stream(seed, kStreamPlanInit).fork(cs.seed);
  PlanParameters phi;
  phi.z = Tensor::randn({int(nz)}, rng, 1.0);
  phi.mu_raw = Tensor::zeros({cs.arc.n_cp});
  return phi;
}

PlanOutcome plan_case(const PlanningProblem& prob, GeneratorParams& G,
                      const OptimizerChoice& choice, int steps, uint64_t seed,
                      const L2PlanConfig& cfg) {
  if (steps < 1) throw std::invalid_argument("plan_case: steps >= 1");
  set_requires_grad(G.tensors(), false);
  PlanParameters phi0 = init_phi(prob, seed);
  PlanOutcome out;

  if (choice.learned) {
    if (choice.meta == nullptr)
      throw std::invalid_argument("plan_case: learned optimizer needs meta params");
    RolloutOptions ro;
    ro.k_i = steps;
    ro.meta_graph = false;
    ro.eta = cfg.eta;
    ro.eps = cfg.eps;
    ro.const_bias_correction = cfg.const_bias_correction;
    MetaOptimizerParams meta = *choice.meta;  // shared weights, fresh call
    RolloutResult rr = inner_rollout(prob, G, meta, phi0, ro);
    out.trace.assign(rr.trace.begin() + 1, rr.trace.end());
    out.phi = rr.phi;
    out.dose = rr.dose;
    out.plan.fluence = rr.fluence;
    out.plan.mu = rr.mu;
    out.plan.provenance = Provenance::Generated;
    return out;
  }

  BaselineHyper hyper = BaselineHyper::defaults(choice.baseline);
  BaselineState sz = BaselineState::init(phi0.z.size());
  BaselineState sm = BaselineState::init(phi0.mu_raw.size());
  Tensor z = phi0.z.clone();
  Tensor mu_raw = phi0.mu_raw.clone();
  for (int k = 0;; ++k) {
    Tensor zc = z.detached();
    zc.requires_grad = true;
    Tensor mc = mu_raw.detached();
    mc.requires_grad = true;
    Tape sub;
    ObjectiveEval ev;
    Tensor gz, gmu;
    {
      TapeScope scope(sub);
      ev = eval_plan_objective(G, prob, zc, mc);
      if (k < steps) {
        GradMap gm = sub.backward(ev.loss.total);
        gz = gm.grad(zc);
        gmu = gm.grad(mc);
      }
    }
    if (!std::isfinite(ev.loss.total.scalar()))
      throw NumericError("plan_case: non-finite loss at step " + std::to_string(k));
    if (k > 0) out.trace.push_back(to_record(ev.loss.values()));
    if (k == steps) {
      out.dose = ev.dose.detached();
      out.plan.fluence = ev.fluence.detached();
      out.plan.mu.assign(ev.mu.ptr(), ev.mu.ptr() + ev.mu.size());
      out.plan.provenance = Provenance::Generated;
      break;
    }
    baseline_step(choice.baseline, z, gz, sz, hyper);
    baseline_step(choice.baseline, mu_raw, gmu, sm, hyper);
  }
  out.phi.z = z;
  out.phi.mu_raw = mu_raw;
  return out;
}

}  // namespace fmpl
