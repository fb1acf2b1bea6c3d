#pragma once

#include <string>

#include "domain/domain.hpp"

namespace fmpl {

// Case/plan JSON: floats as decimal (shortest round-trip), masks run-length
// encoded over the row-major order as alternating counts starting with the
// zero run: [n0, n1, n0', ...].
std::vector<int64_t> rle_encode(const Mask& m);
Mask rle_decode(const std::vector<int64_t>& runs, int64_t n);

void save_case(const std::string& path, const Case& cs);
Case load_case(const std::string& path);

struct PlanFile {
  Plan plan;
  Tensor dose;           // optional, empty when absent
  std::string optimizer; // metadata
  int steps = 0;
  uint64_t seed = 0;
};

void save_plan(const std::string& path, const PlanFile& pf);
PlanFile load_plan(const std::string& path);

}  // namespace fmpl
