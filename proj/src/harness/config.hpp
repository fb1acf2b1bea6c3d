#pragma once

#include <string>

#include "domain/domain.hpp"
#include "fmd/fmd.hpp"
#include "l2plan/l2plan.hpp"

namespace fmpl {

struct Config {
  uint64_t seed = 0;
  int n_cp = 24;
  int num_cases = 128;
  MachineConstraints machine;
  FmdConfig fmd;
  L2PlanConfig l2plan;
  double lambda_z = 5.0;
  double lambda_mu = 1.0;
  double lambda_x = 1.0;
  int plan_steps = 100;
};

// JSON config; unknown keys are rejected, absent keys keep defaults.
Config load_config(const std::string& path);
Config parse_config(const std::string& text);

}  // namespace fmpl
