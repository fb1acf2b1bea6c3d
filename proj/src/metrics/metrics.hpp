#pragma once

#include <optional>
#include <string>
#include <vector>

#include "core/autodiff.hpp"
#include "domain/domain.hpp"

namespace fmpl {

struct PlanLossBreakdown {
  double l_dose = 0, l_cont_z = 0, l_cont_mu = 0, l_extra = 0, total = 0;
};

struct PlanLossNodes {
  Tensor l_dose, l_cont_z, l_cont_mu, l_extra, total;
  PlanLossBreakdown values() const;
};

// MAP plan objective. All L1 terms are mean-normalized so the fixed weights
// lambda_z = 5, lambda_mu = 1 stay meaningful across grid sizes.
// flex_mask/prescription feed the optional flexibility term (l_extra).
PlanLossNodes plan_loss_graph(const Tensor& dhat, const Tensor& dstar,
                              const Tensor& z3, const Tensor& mu,
                              double lambda_z = 5.0, double lambda_mu = 1.0,
                              const Tensor* flex_ptv_abs_mask = nullptr,
                              double prescription = 0.0,
                              const Tensor* flex_oar_mask = nullptr,
                              double lambda_x = 1.0);

// mean over mask voxels of |D - prescription|
Tensor ptv_homogeneity_term(const Tensor& dhat, const Tensor& mask, double prescription);
// mean over mask voxels of max(D, 0)
Tensor oar_sparing_term(const Tensor& dhat, const Tensor& mask);

double mae(const Tensor& a, const Tensor& b, const Mask* mask = nullptr);
// peak = max of the target; identical inputs return +inf.
double psnr(const Tensor& dhat, const Tensor& dstar);
// Slice-wise SSIM, 7x7 Gaussian window sigma 1.5, K1 = 0.01, K2 = 0.03,
// dynamic range max(B) - min(B).
double ssim3d(const Tensor& a, const Tensor& b);

struct DVHCurve {
  std::vector<double> dose;         // 512 uniform bins, 0..max
  std::vector<double> volume_frac;  // fraction of voxels with D >= dose[i]
};

DVHCurve dvh(const Tensor& d, const Mask& mask, int bins = 512);
double dose_at_volume(const DVHCurve& c, double q_percent);
double homogeneity_index(const DVHCurve& c);  // (D2 - D98) / D50

// 43-dim hand features per fluence map:
// [mean, std, 16 row means, 24 col means, mean |grad|].
std::vector<double> fluence_features(const Tensor& map);
// Frechet distance between Gaussian fits of the two feature clouds.
double frechet_proxy(const std::vector<Tensor>& set_a, const std::vector<Tensor>& set_b);
double frechet_from_features(const std::vector<std::vector<double>>& fa,
                             const std::vector<std::vector<double>>& fb);

struct TTestResult {
  double t = 0, p = 1;
};
// Two-sided paired t-test; p from the Student-t CDF via the regularized
// incomplete beta function.
TTestResult paired_t_test(const std::vector<double>& x, const std::vector<double>& y);

double regularized_incomplete_beta(double a, double b, double x);

// Symmetric eigendecomposition (cyclic Jacobi); A row-major n*n.
void jacobi_eigen(std::vector<double> a, int n, std::vector<double>& eigenvalues,
                  std::vector<double>& eigenvectors);

// One row of the experiment tables.
struct MetricsRow {
  std::string case_id;
  std::string optimizer;
  int steps = 0;
  double mae = 0, mae_ptv = 0, mae_oars = 0;
  double psnr = 0, ssim = 0, hi = 0, frechet = 0;
  double seconds = 0;
};

}  // namespace fmpl
