#pragma once

#include <string>
#include <vector>

#include "domain/domain.hpp"
#include "dose/dose.hpp"
#include "metrics/metrics.hpp"

namespace fmpl {

// One aperture per control point (VMAT convention). Open rows satisfy
// left + min_gap <= right; closed rows carry left == right and are excluded
// from the gap rule. With no predecessor closed rows park at 0; when chained
// they walk toward 0 under the travel limit.
struct Aperture {
  std::vector<double> left, right;  // fractional columns, [0, n_cols]
  std::vector<uint8_t> open;
  double intensity = 0.0;
};

struct SequencedPlan {
  std::vector<Aperture> apertures;
  std::vector<double> mu;
  Tensor f_ls;  // [n_cp, n_rows, n_cols] reconstruction
};

struct Violation {
  int cp = 0;
  int row = -1;  // -1 for MU violations
  std::string kind;  // "travel", "gap", "mu-bound", "mu-delta", "range"
  double magnitude = 0.0;
};

// Threshold at half the row maximum, largest connected run (leftmost tie),
// intensity = mean of the map over all open cells, prev-chaining clips into
// the travel window, gap repaired by moving the right leaf outward with the
// min gap enforced last.
Aperture sequence_cp(const Tensor& f_cp, const MachineConstraints& c,
                     const Aperture* prev);

SequencedPlan sequence_plan(const Plan& plan, const MachineConstraints& c);

std::vector<Violation> validate_deliverability(const SequencedPlan& sp,
                                               const MachineConstraints& c);

struct LsComparison {
  MetricsRow pre, post;
  Tensor dose_pre, dose_post;
};

// Recomputes dose from the reconstructed fluence and sequenced MU and
// evaluates the metric suite for both plans against the case target.
LsComparison post_ls_metrics(const Case& cs, const DepositionOperator& A,
                             const Plan& pre_plan, const Tensor& pre_dose,
                             const SequencedPlan& sp, const std::string& optimizer,
                             int steps);

}  // namespace fmpl
