#include "harness/config.hpp"

#include <fstream>
#include <set>
#include <stdexcept>

#include <json.hpp>

namespace fmpl {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& allowed,
                    const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key()))
      throw std::invalid_argument("config: unknown key '" + it.key() + "' in " + where);
}

template <typename T>
void take(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

Config parse_config(const std::string& text) {
  json j = json::parse(text);
  Config c;
  reject_unknown(j, {"seed", "domain", "machine", "fmd", "l2plan", "objective", "plan",
                     "data"},
                 "root");
  take(j, "seed", c.seed);
  if (j.contains("domain")) {
    const json& d = j.at("domain");
    reject_unknown(d, {"n_cp"}, "domain");
    take(d, "n_cp", c.n_cp);
    if (c.n_cp < 2) throw std::invalid_argument("config: n_cp must be >= 2");
  }
  if (j.contains("machine")) {
    const json& m = j.at("machine");
    reject_unknown(m,
                   {"n_rows", "n_cols", "max_leaf_travel_per_cp", "min_gap", "mu_min",
                    "mu_max", "max_mu_delta_per_cp"},
                   "machine");
    take(m, "n_rows", c.machine.n_rows);
    take(m, "n_cols", c.machine.n_cols);
    take(m, "max_leaf_travel_per_cp", c.machine.max_leaf_travel_per_cp);
    take(m, "min_gap", c.machine.min_gap);
    take(m, "mu_min", c.machine.mu_min);
    take(m, "mu_max", c.machine.mu_max);
    take(m, "max_mu_delta_per_cp", c.machine.max_mu_delta_per_cp);
    c.machine.validate();
  }
  if (j.contains("fmd")) {
    const json& f = j.at("fmd");
    reject_unknown(f,
                   {"sigma_min", "sigma_max", "sigma_star", "teacher_steps",
                    "teacher_batch", "teacher_lr", "distill_steps", "distill_batch",
                    "fake_updates_per_gen", "fake_lr", "disc_lr", "gen_lr",
                    "lambda_dmd", "lambda_gan", "normalize_dmd"},
                   "fmd");
    take(f, "sigma_min", c.fmd.schedule.sigma_min);
    take(f, "sigma_max", c.fmd.schedule.sigma_max);
    take(f, "sigma_star", c.fmd.sigma_star);
    take(f, "teacher_steps", c.fmd.teacher_steps);
    take(f, "teacher_batch", c.fmd.teacher_batch);
    take(f, "teacher_lr", c.fmd.teacher_lr);
    take(f, "distill_steps", c.fmd.distill_steps);
    take(f, "distill_batch", c.fmd.distill_batch);
    take(f, "fake_updates_per_gen", c.fmd.fake_updates_per_gen);
    take(f, "fake_lr", c.fmd.fake_lr);
    take(f, "disc_lr", c.fmd.disc_lr);
    take(f, "gen_lr", c.fmd.gen_lr);
    take(f, "lambda_dmd", c.fmd.lambda_dmd);
    take(f, "lambda_gan", c.fmd.lambda_gan);
    take(f, "normalize_dmd", c.fmd.normalize_dmd);
    if (!(c.fmd.schedule.sigma_min > 0 &&
          c.fmd.schedule.sigma_min < c.fmd.schedule.sigma_max))
      throw std::invalid_argument("config: need 0 < sigma_min < sigma_max");
  }
  if (j.contains("l2plan")) {
    const json& l = j.at("l2plan");
    reject_unknown(l,
                   {"k_i", "K0", "meta_lr", "eta", "eps", "outer_window", "grad_clip",
                    "const_bias_correction"},
                   "l2plan");
    take(l, "k_i", c.l2plan.k_i);
    take(l, "K0", c.l2plan.K0);
    take(l, "meta_lr", c.l2plan.meta_lr);
    take(l, "eta", c.l2plan.eta);
    take(l, "eps", c.l2plan.eps);
    take(l, "outer_window", c.l2plan.outer_window);
    take(l, "grad_clip", c.l2plan.grad_clip);
    take(l, "const_bias_correction", c.l2plan.const_bias_correction);
    if (c.l2plan.k_i < 1) throw std::invalid_argument("config: k_i must be >= 1");
  }
  if (j.contains("objective")) {
    const json& o = j.at("objective");
    reject_unknown(o, {"lambda_z", "lambda_mu", "lambda_x"}, "objective");
    take(o, "lambda_z", c.lambda_z);
    take(o, "lambda_mu", c.lambda_mu);
    take(o, "lambda_x", c.lambda_x);
  }
  if (j.contains("plan")) {
    const json& p = j.at("plan");
    reject_unknown(p, {"steps"}, "plan");
    take(p, "steps", c.plan_steps);
    if (c.plan_steps < 1) throw std::invalid_argument("config: plan steps must be >= 1");
  }
  if (j.contains("data")) {
    const json& d = j.at("data");
    reject_unknown(d, {"num_cases"}, "data");
    take(d, "num_cases", c.num_cases);
    if (c.num_cases < 1) throw std::invalid_argument("config: num_cases must be >= 1");
  }
  return c;
}

Config load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("config: cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return parse_config(text);
}

}  // namespace fmpl
