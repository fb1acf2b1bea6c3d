#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "core/rng.hpp"
#include "dose/dose.hpp"

using namespace fmpl;

namespace {

Phantom uniform_phantom(double mu_value) {
  Phantom p;
  p.mu.assign(size_t(kGridN), mu_value);
  p.body.assign(size_t(kGridN), 1);
  p.ptv.assign(size_t(kGridN), 0);
  p.oars[0].assign(size_t(kGridN), 0);
  p.oars[1].assign(size_t(kGridN), 0);
  return p;
}

Arc two_angle_arc(double a0, double a1) {
  Arc a;
  a.n_cp = 2;
  a.gantry_deg = {a0, a1};
  return a;
}

Tensor rand_fluence(const MachineConstraints& c, int n_cp, Rng& rng) {
  Tensor f = Tensor::zeros({n_cp, c.n_rows, c.n_cols});
  for (int64_t i = 0; i < f.size(); ++i) f.mut()[i] = rng.uniform(0.0, 4.0);
  return f;
}

// per-column line sums of the raw (pre-penumbra) ray matrix at fixed y
double line_sum(const DepositionOperator& A, int cp, int z, int col, int y) {
  const auto& m = A.mat(cp, z);
  double s = 0.0;
  for (int e = m.col_ptr[size_t(col)]; e < m.col_ptr[size_t(col) + 1]; ++e) {
    int vox = m.voxel[size_t(e)];
    if (vox / kGridX == y) s += m.w[size_t(e)];
  }
  return s;
}

}  // namespace

TEST_CASE("zero attenuation gives unit ray weights before penumbra") {
  Phantom p = uniform_phantom(0.0);
  MachineConstraints c;
  Arc arc = two_angle_arc(0.0, 90.0);
  DepositionOperator A = build_deposition(p, arc, c);
  const double unit = kDoseScale;  // sample density 1/step times weight step, times scale
  for (int col : {0, 5, 11, 23}) {
    for (int y : {1, 13, 32, 50, 62}) {
      double s = line_sum(A, 0, 4, col, y) / unit;
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("doubling attenuation squares transmittance at equal depth") {
  MachineConstraints c;
  Arc arc = two_angle_arc(0.0, 180.0);
  DepositionOperator a1 = build_deposition(uniform_phantom(0.01), arc, c);
  DepositionOperator a2 = build_deposition(uniform_phantom(0.02), arc, c);
  const double unit = kDoseScale;
  // voxel weights aggregate a few samples at slightly different depths, so
  // the exponential squaring law holds to the depth-spread scale
  for (int y : {5, 20, 40, 60}) {
    double w1 = line_sum(a1, 0, 8, 11, y) / unit;
    double w2 = line_sum(a2, 0, 8, 11, y) / unit;
    CHECK(w2 == doctest::Approx(w1 * w1).epsilon(1e-4));
  }
}

TEST_CASE("opposed beams enter from opposite sides") {
  MachineConstraints c;
  Arc arc = two_angle_arc(0.0, 180.0);
  DepositionOperator A = build_deposition(uniform_phantom(0.02), arc, c);
  // gantry 0: beam travels toward -y, so high-y voxels are the entrance
  CHECK(line_sum(A, 0, 8, 11, 60) > line_sum(A, 0, 8, 11, 3));
  CHECK(line_sum(A, 1, 8, 11, 3) > line_sum(A, 1, 8, 11, 60));
}

TEST_CASE("dose linearity and superposition") {
  Case cs = build_case(3);
  DepositionOperator A = build_deposition(cs.phantom, cs.arc, cs.machine);
  Rng rng = Rng::stream(4, 9);
  Tensor f1 = rand_fluence(cs.machine, cs.arc.n_cp, rng);
  Tensor f2 = rand_fluence(cs.machine, cs.arc.n_cp, rng);
  std::vector<double> mu(size_t(cs.arc.n_cp));
  for (auto& m : mu) m = rng.uniform(0.0, 8.0);

  Tensor zero = Tensor::zeros(f1.shape);
  Tensor d0 = compute_dose(A, zero, mu);
  for (int64_t i = 0; i < d0.size(); ++i) CHECK(d0.at(i) == 0.0);

  Tensor d1 = compute_dose(A, f1, mu);
  Tensor d1x2 = compute_dose(A, mul_scalar(f1, 2.0), mu);
  for (int64_t i = 0; i < d1.size(); ++i)
    CHECK(d1x2.at(i) == doctest::Approx(2.0 * d1.at(i)).epsilon(1e-12));

  Tensor d2 = compute_dose(A, f2, mu);
  Tensor d12 = compute_dose(A, add(f1, f2), mu);
  for (int64_t i = 0; i < d1.size(); ++i)
    CHECK(std::fabs(d12.at(i) - d1.at(i) - d2.at(i)) <= 1e-10);

  std::vector<double> neg = mu;
  neg[0] = -1.0;
  CHECK_THROWS(compute_dose(A, f1, neg));
}

TEST_CASE("adjoint identity over 100 random trials") {
  Case cs = build_case(5);
  DepositionOperator A = build_deposition(cs.phantom, cs.arc, cs.machine);
  Rng rng = Rng::stream(6, 9);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    Tensor f = rand_fluence(cs.machine, cs.arc.n_cp, rng);
    std::vector<double> mu(size_t(cs.arc.n_cp));
    for (auto& m : mu) m = rng.uniform(0.0, 8.0);
    Tensor g = Tensor::zeros({kGridZ, kGridY, kGridX});
    for (int64_t i = 0; i < g.size(); ++i) g.mut()[i] = rng.uniform(-1.0, 1.0);

    Tensor D = compute_dose(A, f, mu);
    Tensor df;
    std::vector<double> dmu;
    dose_adjoint(A, g, f, mu, df, dmu);

    double lhs = 0.0;
    for (int64_t i = 0; i < D.size(); ++i) lhs += D.at(i) * g.at(i);
    double rhs_f = 0.0;
    for (int64_t i = 0; i < f.size(); ++i) rhs_f += f.at(i) * df.at(i);
    double rhs_mu = 0.0;
    for (size_t cp = 0; cp < mu.size(); ++cp) rhs_mu += mu[cp] * dmu[cp];
    double denom = std::max(1.0, std::fabs(lhs));
    worst = std::max(worst, std::fabs(lhs - rhs_f) / denom);
    worst = std::max(worst, std::fabs(lhs - rhs_mu) / denom);
  }
  CHECK(worst <= 1e-10);
}

TEST_CASE("zero dose-gradient gives zero adjoint") {
  Case cs = build_case(2);
  DepositionOperator A = build_deposition(cs.phantom, cs.arc, cs.machine);
  Rng rng = Rng::stream(8, 9);
  Tensor f = rand_fluence(cs.machine, cs.arc.n_cp, rng);
  std::vector<double> mu(size_t(cs.arc.n_cp), 3.0);
  Tensor g = Tensor::zeros({kGridZ, kGridY, kGridX});
  Tensor df;
  std::vector<double> dmu;
  dose_adjoint(A, g, f, mu, df, dmu);
  for (int64_t i = 0; i < df.size(); ++i) CHECK(df.at(i) == 0.0);
  for (double v : dmu) CHECK(v == 0.0);
}

TEST_CASE("dose node matches finite differences") {
  Case cs = build_case(9);
  auto A = std::make_shared<DepositionOperator>(
      build_deposition(cs.phantom, cs.arc, cs.machine));
  Rng rng = Rng::stream(10, 9);
  Tensor f = rand_fluence(cs.machine, cs.arc.n_cp, rng);
  Tensor mu = Tensor::zeros({cs.arc.n_cp});
  for (int64_t i = 0; i < mu.size(); ++i) mu.mut()[i] = rng.uniform(1.0, 6.0);
  Tensor target = cs.dstar;

  // restrict the check to fluence cells whose rays actually reach the body;
  // cells with ~zero influence only probe round-off against the 1e-8 floor
  std::vector<int64_t> coords;
  {
    std::vector<double> muv(mu.ptr(), mu.ptr() + mu.size());
    Tensor d0 = compute_dose(*A, f, muv);
    Tensor g = Tensor::zeros(d0.shape);
    for (int64_t i = 0; i < g.size(); ++i) g.mut()[i] = 2.0 * (d0.at(i) - target.at(i)) / double(g.size());
    Tensor df;
    std::vector<double> dmu;
    dose_adjoint(*A, g, f, muv, df, dmu);
    double gmax = 0.0;
    for (int64_t i = 0; i < df.size(); ++i) gmax = std::max(gmax, std::fabs(df.at(i)));
    while (coords.size() < 24) {
      int64_t i = int64_t(rng.below(uint64_t(f.size())));
      if (std::fabs(df.at(i)) > 1e-3 * gmax) coords.push_back(i);
    }
  }
  auto lf = [&](const Tensor& t) {
    Tensor d = dose_forward_node(A, t, mu);
    Tensor diff = sub(d, target);
    return mean_all(mul(diff, diff));
  };
  CHECK(finite_difference_check(lf, f, 1e-4, coords) < 1e-6);

  auto lm = [&](const Tensor& t) {
    Tensor d = dose_forward_node(A, f, t);
    Tensor diff = sub(d, target);
    return mean_all(mul(diff, diff));
  };
  CHECK(finite_difference_check(lm, mu, 1e-5) < 1e-6);
}

TEST_CASE("monotonicity: more fluence never lowers dose") {
  Case cs = build_case(12);
  DepositionOperator A = build_deposition(cs.phantom, cs.arc, cs.machine);
  Rng rng = Rng::stream(11, 9);
  Tensor f = rand_fluence(cs.machine, cs.arc.n_cp, rng);
  std::vector<double> mu(size_t(cs.arc.n_cp), 4.0);
  Tensor d0 = compute_dose(A, f, mu);
  Tensor f2 = f.clone();
  f2.mut()[f2.size() / 2] += 3.0;
  Tensor d1 = compute_dose(A, f2, mu);
  for (int64_t i = 0; i < d0.size(); ++i) CHECK(d1.at(i) >= d0.at(i) - 1e-15);
}
