#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "core/autodiff.hpp"
#include "core/optim.hpp"
#include "dose/dose.hpp"
#include "fmd/nets.hpp"
#include "metrics/metrics.hpp"

namespace fmpl {

// Coordinatewise learned optimizer: affine 2->8 gradient preprocessing,
// two stacked LSTM layers of hidden size 16 shared across coordinates, and
// sigmoid heads predicting the per-coordinate momentum decays.
struct MetaOptimizerParams {
  Tensor delta_w, delta_b;      // [2,8], [8]
  Tensor l1_wih, l1_whh, l1_b;  // [8,64], [16,64], [64]
  Tensor l2_wih, l2_whh, l2_b;  // [16,64], [16,64], [64]
  Tensor hb_w, hb_b;            // beta head,  sigmoid(bias) = 0.9
  Tensor hg_w, hg_b;            // gamma head, sigmoid(bias) = 0.999

  static MetaOptimizerParams init(uint64_t seed);
  NamedTensors named();
  std::vector<Tensor*> tensors();
};

// State for one parameter group (z and mu keep separate states but share
// the meta weights). prod_beta/prod_gamma are running products of the
// predicted decays; the bias correction 1 - prod reduces exactly to Adam's
// 1 - beta^k when the decays are constant.
struct GroupState {
  Tensor h1, c1, h2, c2;          // [n,16]
  Tensor m, v;                    // [n]
  Tensor prod_beta, prod_gamma;   // [n]

  static GroupState init(int64_t n);
};

struct MetaOptimizerState {
  GroupState z, mu;
  int64_t k = 0;

  static MetaOptimizerState init(int64_t n_z, int64_t n_mu);
};

struct PlanParameters {
  Tensor z;       // flat [n_cp * n_rows * n_cols]
  Tensor mu_raw;  // [n_cp]; MU = mu_min + (mu_max - mu_min) * sigmoid(mu_raw)
};

// ---- spec-facing single-step pieces -------------------------------------

// [ghat, clamp(log(|ghat| + 1e-8), -10, 10)] with ghat = g / max(rms, 1e-8).
// Pure numeric: the optimizee gradient enters the meta graph as a constant.
Tensor preprocess_raw(const Tensor& g_flat);
// delta-affine applied to the raw two channels, recorded on the tape.
Tensor preprocess_features(MetaOptimizerParams& p, const Tensor& raw);
Tensor preprocess_gradient(MetaOptimizerParams& p, const Tensor& g_flat);

// Runs both LSTM layers coordinatewise; updates h/c in place.
void lstm_step(MetaOptimizerParams& p, const Tensor& features, GroupState& s);

struct HyperPred {
  Tensor beta, gamma;  // [n] each, in (0,1)
};
HyperPred predict_hyperparams(MetaOptimizerParams& p, const GroupState& s);

// One Adam-style update with per-coordinate decays and running-product bias
// correction. k is the post-increment step index (>= 1).
struct OptStepResult {
  Tensor phi, m, v, prod_beta, prod_gamma;
};
OptStepResult optimizee_step(const Tensor& phi, const Tensor& g, const Tensor& m,
                             const Tensor& v, const Tensor& beta, const Tensor& gamma,
                             const Tensor& prod_beta, const Tensor& prod_gamma,
                             int64_t k, double eta, double eps,
                             bool const_bias_correction);

// ---- planning problem -----------------------------------------------------

enum class FlexKind { None, PtvHomogeneity, OarSparing };

struct PlanningProblem {
  const Case* cs = nullptr;
  std::shared_ptr<const DepositionOperator> A;
  Tensor dstar;
  double lambda_z = 5.0;
  double lambda_mu = 1.0;
  double lambda_x = 1.0;
  FlexKind flex = FlexKind::None;
  double prescription = 0.0;  // for PtvHomogeneity
};

PlanningProblem make_problem(const Case& cs);

struct ObjectiveEval {
  Tensor fluence;  // [n_cp,R,C] node
  Tensor mu;       // [n_cp] mapped MU node
  Tensor dose;     // [Z,Y,X] node
  PlanLossNodes loss;
};

// G(z) -> dose -> MAP objective, all on the active tape.
ObjectiveEval eval_plan_objective(GeneratorParams& G, const PlanningProblem& prob,
                                  const Tensor& z_flat, const Tensor& mu_raw);

// ---- rollout / training ----------------------------------------------------

struct RolloutOptions {
  int k_i = 20;
  bool meta_graph = false;
  bool pin_heads = false;               // constant (0.9, 0.999); oracle mode
  bool const_bias_correction = false;
  double eta = 1e-2;
  double eps = 1e-8;
  int outer_window = 5;                 // outer loss = mean of last W losses
  bool capture_gradients = false;
  // replayed optimizee gradients (z, mu) per step; used by the meta-gradient
  // finite-difference check
  const std::vector<std::pair<Tensor, Tensor>>* replay_g = nullptr;
};

struct StepRecord {
  double l_dose = 0, l_cont_z = 0, l_cont_mu = 0, l_extra = 0, total = 0;
};

struct RolloutResult {
  std::vector<StepRecord> trace;  // loss at phi_k for k = 0..k_i
  PlanParameters phi;             // final values (detached)
  Tensor outer_loss;              // defined in meta_graph mode
  std::vector<std::pair<Tensor, Tensor>> g_seq;
  Tensor fluence;                 // final
  std::vector<double> mu;         // final mapped MU
  Tensor dose;                    // final
};

RolloutResult inner_rollout(const PlanningProblem& prob, GeneratorParams& G,
                            MetaOptimizerParams& meta, const PlanParameters& phi0,
                            const RolloutOptions& opt);

struct L2PlanConfig {
  int k_i = 20;
  int K0 = 180;
  double meta_lr = 1e-3;
  double eta = 1e-2;
  double eps = 1e-8;
  int outer_window = 5;
  double grad_clip = 1.0;
  bool const_bias_correction = false;
};

struct MetaTrainResult {
  MetaOptimizerParams params;
  std::vector<double> curve;  // outer loss per meta step
};

MetaTrainResult meta_train(const std::vector<PlanningProblem>& cases,
                           GeneratorParams& G, const L2PlanConfig& cfg,
                           uint64_t seed);

// ---- baselines -------------------------------------------------------------

enum class BaselineKind { Adam, SgdMomentum, RmsProp };

struct BaselineHyper {
  double lr = 1e-2;
  double beta1 = 0.9;   // adam
  double beta2 = 0.999; // adam
  double rho = 0.99;    // rmsprop
  double momentum = 0.9;
  double eps = 1e-8;

  static BaselineHyper defaults(BaselineKind k);
};

struct BaselineState {
  Tensor m, v;          // moments / velocity
  double pow1 = 1.0;    // running beta1^k, beta2^k
  double pow2 = 1.0;
  int64_t k = 0;

  static BaselineState init(int64_t n);
};

void baseline_step(BaselineKind kind, Tensor& phi, const Tensor& g,
                   BaselineState& st, const BaselineHyper& hyper);

// ---- planning entry ---------------------------------------------------------

struct OptimizerChoice {
  bool learned = false;
  BaselineKind baseline = BaselineKind::Adam;
  const MetaOptimizerParams* meta = nullptr;
};

struct PlanOutcome {
  Plan plan;
  std::vector<StepRecord> trace;  // loss at phi_k, k = 1..steps
  Tensor dose;
  PlanParameters phi;
};

PlanParameters init_phi(const PlanningProblem& prob, uint64_t seed);

PlanOutcome plan_case(const PlanningProblem& prob, GeneratorParams& G,
                      const OptimizerChoice& choice, int steps, uint64_t seed,
                      const L2PlanConfig& cfg = {});

}  // namespace fmpl
