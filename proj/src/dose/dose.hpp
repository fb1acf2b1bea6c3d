#pragma once

#include <memory>
#include <vector>

#include "core/autodiff.hpp"
#include "domain/domain.hpp"

namespace fmpl {

// Global dose scale so typical ground-truth PTV means land near 1 (Gy-like
// arbitrary units).
inline constexpr double kDoseScale = 1.0 / 256.0;

// Linear fluence-to-dose map. Stored factored: a 7-tap Gaussian column
// penumbra followed by per-(cp, slice) sparse parallel-ray matrices; the
// composition is what the public operations expose.
struct DepositionOperator {
  int n_cp = 0;
  int n_rows = 0;
  int n_cols = 0;

  std::vector<double> penumbra;  // [n_cols][n_cols] dense column-mixing matrix

  struct SliceMatrix {
    std::vector<int> col_ptr;  // n_cols + 1
    std::vector<int> voxel;    // flat index into a 64x64 slice
    std::vector<double> w;     // >= 0
  };
  std::vector<SliceMatrix> mats;  // index cp * kGridZ + z

  const SliceMatrix& mat(int cp, int z) const {
    return mats[size_t(cp) * kGridZ + size_t(z)];
  }
};

// Parallel-ray march at each gantry angle: 0.5-voxel steps, bilinear mu
// sampling, transmittance exp(-integral mu ds), Gaussian penumbra of sigma
// one column, zero deposition outside the body.
DepositionOperator build_deposition(const Phantom& p, const Arc& arc,
                                    const MachineConstraints& c);

// dhat = sum_cp mu[cp] * (A_cp . vec(f[cp])); linear in f and mu.
Tensor compute_dose(const DepositionOperator& A, const Tensor& fluence,
                    const std::vector<double>& mu);

// Gradients (df, dmu) of <A f mu, g>; the hand-written adjoint.
void dose_adjoint(const DepositionOperator& A, const Tensor& g,
                  const Tensor& fluence, const std::vector<double>& mu,
                  Tensor& dfluence, std::vector<double>& dmu);

// Graph-recording version: fluence [n_cp,R,C] and mu [n_cp] tensors in,
// dose [Z,Y,X] tensor out, registered as a custom node.
Tensor dose_forward_node(std::shared_ptr<const DepositionOperator> A,
                         const Tensor& fluence, const Tensor& mu);

}  // namespace fmpl
