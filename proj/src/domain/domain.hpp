#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "core/tensor.hpp"

namespace fmpl {

// Dose/phantom grids are row-major [z][y][x]; fluence row r maps to slice z=r.
inline constexpr int kGridX = 64;
inline constexpr int kGridY = 64;
inline constexpr int kGridZ = 16;
inline constexpr int64_t kGridN = int64_t(kGridX) * kGridY * kGridZ;

inline int64_t grid_index(int z, int y, int x) {
  return (int64_t(z) * kGridY + y) * kGridX + x;
}

using Mask = std::vector<uint8_t>;  // kGridN, 0/1

struct Phantom {
  std::vector<double> mu;  // attenuation per voxel length, >= 0
  Mask body;
  Mask ptv;
  std::array<Mask, 2> oars;
  uint64_t seed = 0;
};

struct Arc {
  int n_cp = 24;
  std::vector<double> gantry_deg;  // strictly increasing, spans [0, 345]

  static Arc uniform(int n_cp = 24, double span_deg = 345.0);
};

struct MachineConstraints {
  int n_rows = 16;
  int n_cols = 24;
  double max_leaf_travel_per_cp = 3.0;  // columns
  double min_gap = 1.0;                 // columns
  double mu_min = 0.0;
  double mu_max = 10.0;
  double max_mu_delta_per_cp = 2.0;

  void validate() const;
};

enum class Provenance { SyntheticGroundTruth, Generated, Sequenced };

struct Plan {
  Tensor fluence;           // [n_cp, n_rows, n_cols], >= 0
  std::vector<double> mu;   // n_cp, within [mu_min, mu_max]
  Provenance provenance = Provenance::SyntheticGroundTruth;
};

struct DeliverableSample {
  Plan plan;               // fluence with penumbra smoothing applied
  Tensor aperture_fluence; // pre-smoothing binary-aperture stack
};

struct Case {
  uint64_t seed = 0;
  Phantom phantom;
  Arc arc;
  MachineConstraints machine;
  Plan truth;    // the deliverable plan whose dose defines dstar
  Tensor dstar;  // [kGridZ, kGridY, kGridX]
};

// Deterministic synthetic phantom: elliptical body, one ellipsoidal PTV,
// two OARs flanking it without overlap; mu = 0.02 inside the body.
Phantom make_phantom(uint64_t seed);

// Random leaf/MU walks that satisfy every machine constraint by
// construction, then lateral triangular smoothing of width 3.
DeliverableSample sample_deliverable_plan(const MachineConstraints& c,
                                          const Arc& arc, uint64_t seed);

// Phantom + arc + target dose from a fresh deliverable plan. Geometry is
// rejection-sampled until mean PTV dose exceeds mean OAR dose.
Case build_case(uint64_t seed);
Case build_case(uint64_t seed, const MachineConstraints& c, const Arc& arc);

int64_t mask_count(const Mask& m);
double masked_mean(const Tensor& grid, const Mask& m);
Tensor mask_to_tensor(const Mask& m);

}  // namespace fmpl
