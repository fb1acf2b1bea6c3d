#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "core/rng.hpp"
#include "domain/domain.hpp"
#include "metrics/metrics.hpp"

using namespace fmpl;

namespace {

Tensor rand_grid(Rng& rng, double lo = 0.0, double hi = 2.0) {
  Tensor t = Tensor::zeros({kGridZ, kGridY, kGridX});
  for (int64_t i = 0; i < t.size(); ++i) t.mut()[i] = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("plan loss: zero at perfect match, weights, homogeneity") {
  Rng rng = Rng::stream(1, 9);
  Tensor dstar = rand_grid(rng);
  Tensor z = Tensor::full({24, 16, 24}, 0.7);
  Tensor mu = Tensor::full({24}, 3.0);
  PlanLossNodes n = plan_loss_graph(dstar, dstar, z, mu);
  CHECK(n.total.scalar() == 0.0);
  CHECK(n.l_cont_z.scalar() == 0.0);
  CHECK(n.l_cont_mu.scalar() == 0.0);

  Tensor dhat = rand_grid(rng);
  Rng rng2 = Rng::stream(2, 9);
  Tensor z2 = Tensor::randn({24, 16, 24}, rng2);
  Tensor mu2 = Tensor::randn({24}, rng2);
  PlanLossNodes a = plan_loss_graph(dhat, dstar, z2, mu2, 5.0, 1.0);
  PlanLossBreakdown b = a.values();
  CHECK(b.total == doctest::Approx(b.l_dose + 5.0 * b.l_cont_z + 1.0 * b.l_cont_mu));

  // 1-homogeneity in the dose residual with priors fixed
  Tensor mid = Tensor::zeros(dhat.shape);
  for (int64_t i = 0; i < mid.size(); ++i)
    mid.mut()[i] = dstar.at(i) + 2.0 * (dhat.at(i) - dstar.at(i));
  PlanLossBreakdown d2 = plan_loss_graph(mid, dstar, z2, mu2, 5.0, 1.0).values();
  CHECK(d2.l_dose == doctest::Approx(2.0 * b.l_dose).epsilon(1e-12));
}

TEST_CASE("flexibility terms") {
  Rng rng = Rng::stream(3, 9);
  Phantom p = make_phantom(0);
  Tensor mask = mask_to_tensor(p.ptv);
  Tensor d = Tensor::full({kGridZ, kGridY, kGridX}, 1.3);
  CHECK(ptv_homogeneity_term(d, mask, 1.3).scalar() == 0.0);
  Tensor zero = Tensor::zeros({kGridZ, kGridY, kGridX});
  Tensor omask = mask_to_tensor(p.oars[0]);
  CHECK(oar_sparing_term(zero, omask).scalar() == 0.0);
  Tensor dr = rand_grid(rng);
  double manual = 0.0;
  int64_t cnt = 0;
  for (int64_t i = 0; i < kGridN; ++i)
    if (p.oars[0][size_t(i)]) {
      manual += std::max(dr.at(i), 0.0);
      ++cnt;
    }
  CHECK(oar_sparing_term(dr, omask).scalar() == doctest::Approx(manual / double(cnt)));
  CHECK_THROWS(ptv_homogeneity_term(d, mask, 0.0));
}

TEST_CASE("mae") {
  Rng rng = Rng::stream(4, 9);
  Tensor a = rand_grid(rng), b = rand_grid(rng);
  CHECK(mae(a, a) == 0.0);
  Tensor c = a.clone();
  for (int64_t i = 0; i < c.size(); ++i) c.mut()[i] += 0.25;
  CHECK(mae(c, a) == doctest::Approx(0.25).epsilon(1e-12));
  double naive = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) naive += std::fabs(a.at(i) - b.at(i));
  naive /= double(a.size());
  CHECK(mae(a, b) == doctest::Approx(naive).epsilon(1e-12));

  // permutation invariance within a mask
  Phantom p = make_phantom(1);
  double m1 = mae(a, b, &p.ptv);
  Tensor ap = a.clone(), bp = b.clone();
  std::vector<int64_t> ptv_idx;
  for (int64_t i = 0; i < kGridN; ++i)
    if (p.ptv[size_t(i)]) ptv_idx.push_back(i);
  for (size_t i = 0; i + 1 < ptv_idx.size(); i += 2) {
    std::swap(ap.mut()[ptv_idx[i]], ap.mut()[ptv_idx[i + 1]]);
    std::swap(bp.mut()[ptv_idx[i]], bp.mut()[ptv_idx[i + 1]]);
  }
  CHECK(mae(ap, bp, &p.ptv) == doctest::Approx(m1).epsilon(1e-12));
}

TEST_CASE("psnr") {
  Tensor a = Tensor::full({kGridZ, kGridY, kGridX}, 0.0);
  Tensor b = Tensor::full({kGridZ, kGridY, kGridX}, 1.0);
  CHECK(psnr(a, b) == doctest::Approx(0.0).epsilon(1e-12));  // mse = peak^2
  CHECK(std::isinf(psnr(b, b)));
  // peak 1, mse 1e-4 -> 40 dB
  Tensor c = b.clone();
  for (int64_t i = 0; i < c.size(); ++i) c.mut()[i] -= 0.01;
  CHECK(psnr(c, b) == doctest::Approx(40.0).epsilon(1e-9));
}

TEST_CASE("ssim") {
  Rng rng = Rng::stream(5, 9);
  Tensor b = rand_grid(rng);
  CHECK(ssim3d(b, b) == 1.0);

  // anti-correlated input drives SSIM negative: a zero-mean checkerboard has
  // near-zero local means, so the structure term -1 dominates the product
  Tensor zb = Tensor::zeros({kGridZ, kGridY, kGridX});
  for (int z = 0; z < kGridZ; ++z)
    for (int y = 0; y < kGridY; ++y)
      for (int x = 0; x < kGridX; ++x)
        zb.mut()[grid_index(z, y, x)] = ((y + x) % 2 == 0) ? 1.0 : -1.0;
  Tensor neg = zb.clone();
  for (int64_t i = 0; i < neg.size(); ++i) neg.mut()[i] = -neg.at(i);
  CHECK(ssim3d(neg, zb) < 0.0);

  // brute-force per-window reference
  Tensor a = rand_grid(rng);
  double ref;
  {
    const int Z = kGridZ, Y = kGridY, X = kGridX;
    double bmax = -1e300, bmin = 1e300;
    for (int64_t i = 0; i < b.size(); ++i) {
      bmax = std::max(bmax, b.at(i));
      bmin = std::min(bmin, b.at(i));
    }
    double L = bmax - bmin;
    double C1 = 0.01 * L * 0.01 * L, C2 = 0.03 * L * 0.03 * L;
    double w[7];
    double ws = 0;
    for (int i = 0; i < 7; ++i) {
      double d = i - 3;
      w[i] = std::exp(-d * d / 4.5);
      ws += w[i];
    }
    for (auto& v : w) v /= ws;
    double acc = 0;
    int64_t cnt = 0;
    for (int z = 0; z < Z; ++z)
      for (int y = 3; y < Y - 3; ++y)
        for (int x = 3; x < X - 3; ++x) {
          double ma = 0, mb = 0, maa = 0, mbb = 0, mab = 0;
          for (int dy = -3; dy <= 3; ++dy)
            for (int dx = -3; dx <= 3; ++dx) {
              double wv = w[dy + 3] * w[dx + 3];
              double av = a.at(grid_index(z, y + dy, x + dx));
              double bv = b.at(grid_index(z, y + dy, x + dx));
              ma += wv * av;
              mb += wv * bv;
              maa += wv * av * av;
              mbb += wv * bv * bv;
              mab += wv * av * bv;
            }
          double va = maa - ma * ma, vb = mbb - mb * mb, cov = mab - ma * mb;
          acc += ((2 * ma * mb + C1) * (2 * cov + C2)) /
                 ((ma * ma + mb * mb + C1) * (va + vb + C2));
          ++cnt;
        }
    ref = acc / double(cnt);
  }
  CHECK(ssim3d(a, b) == doctest::Approx(ref).epsilon(1e-10));
}

TEST_CASE("dvh and homogeneity index") {
  Phantom p = make_phantom(2);
  Tensor d = Tensor::full({kGridZ, kGridY, kGridX}, 0.0);
  for (int64_t i = 0; i < kGridN; ++i)
    if (p.ptv[size_t(i)]) d.mut()[i] = 1.5;
  DVHCurve c = dvh(d, p.ptv);
  CHECK(c.volume_frac.front() == 1.0);
  CHECK(dose_at_volume(c, 50.0) == doctest::Approx(1.5).epsilon(1e-9));
  CHECK(homogeneity_index(c) == doctest::Approx(0.0).epsilon(1e-9));

  // monotone: D2 >= D50 >= D98 on random dose
  Rng rng = Rng::stream(6, 9);
  Tensor dr = rand_grid(rng, 0.5, 2.0);
  DVHCurve cr = dvh(dr, p.ptv);
  double d2 = dose_at_volume(cr, 2.0), d50 = dose_at_volume(cr, 50.0),
         d98 = dose_at_volume(cr, 98.0);
  CHECK(d2 >= d50);
  CHECK(d50 >= d98);

  // against a sort-based quantile oracle, within one bin width
  std::vector<double> vals;
  for (int64_t i = 0; i < kGridN; ++i)
    if (p.ptv[size_t(i)]) vals.push_back(dr.at(i));
  std::sort(vals.begin(), vals.end());
  double binw = cr.dose[1] - cr.dose[0];
  for (double q : {2.0, 50.0, 98.0}) {
    // dose with fraction q/100 of voxels at or above it
    size_t k = size_t(std::ceil(q / 100.0 * double(vals.size())));
    double oracle = vals[vals.size() - std::min(vals.size(), std::max<size_t>(k, 1))];
    CHECK(std::fabs(dose_at_volume(cr, q) - oracle) <= binw + 1e-12);
  }

  // HI arithmetic: D2=1.1, D98=0.9, D50=1.0 -> 0.2
  DVHCurve manual;
  manual.dose = {0.0, 0.9, 1.0, 1.1};
  manual.volume_frac = {1.0, 0.98, 0.5, 0.02};
  double hi = (dose_at_volume(manual, 2.0) - dose_at_volume(manual, 98.0)) /
              dose_at_volume(manual, 50.0);
  CHECK(hi == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("frechet proxy") {
  Rng rng = Rng::stream(7, 9);
  std::vector<Tensor> a, b;
  for (int i = 0; i < 24; ++i) {
    Tensor m = Tensor::zeros({16, 24});
    for (int64_t j = 0; j < m.size(); ++j) m.mut()[j] = rng.uniform(0.0, 3.0);
    a.push_back(m);
    b.push_back(m.clone());
  }
  CHECK(std::fabs(frechet_proxy(a, a)) <= 1e-8);
  CHECK(std::fabs(frechet_proxy(a, b)) <= 1e-8);

  std::vector<Tensor> c;
  for (int i = 0; i < 24; ++i) {
    Tensor m = Tensor::zeros({16, 24});
    for (int64_t j = 0; j < m.size(); ++j) m.mut()[j] = rng.uniform(1.0, 5.0);
    c.push_back(m);
  }
  double dab = frechet_proxy(a, c);
  double dba = frechet_proxy(c, a);
  CHECK(dab == doctest::Approx(dba).epsilon(1e-8));
  CHECK(dab > 0.0);

  // order invariance within a set
  std::vector<Tensor> shuffled = c;
  std::reverse(shuffled.begin(), shuffled.end());
  CHECK(frechet_proxy(a, shuffled) == doctest::Approx(dab).epsilon(1e-10));

  // synthetic-feature oracle: N(0, I) vs N(m, I) converges to ||m||^2
  Rng rng2 = Rng::stream(8, 9);
  int dim = 6, n = 20000;
  std::vector<double> shift(static_cast<size_t>(dim));
  double m2 = 0.0;
  for (int i = 0; i < dim; ++i) {
    shift[size_t(i)] = 0.2 * (i + 1);
    m2 += shift[size_t(i)] * shift[size_t(i)];
  }
  std::vector<std::vector<double>> fa, fb;
  for (int i = 0; i < n; ++i) {
    std::vector<double> ra(static_cast<size_t>(dim));
    std::vector<double> rb(static_cast<size_t>(dim));
    for (int j = 0; j < dim; ++j) {
      ra[size_t(j)] = rng2.normal();
      rb[size_t(j)] = rng2.normal() + shift[size_t(j)];
    }
    fa.push_back(std::move(ra));
    fb.push_back(std::move(rb));
  }
  CHECK(frechet_from_features(fa, fb) == doctest::Approx(m2).epsilon(0.08));

  std::vector<Tensor> tiny(a.begin(), a.begin() + 8);
  CHECK_THROWS(frechet_proxy(tiny, a));
}

TEST_CASE("paired t-test") {
  std::vector<double> x = {1, 2, 3, 4, 5};
  CHECK_THROWS(paired_t_test(x, x));  // zero variance

  std::vector<double> y = {0, 1, 2, 3, 3.9999};
  TTestResult r = paired_t_test(x, y);  // d = [1,1,1,1,1.0001]
  CHECK(r.p < 0.001);

  std::vector<double> a = {0.0, 2.0};
  std::vector<double> b = {1.0, 1.0};  // d = [-1, 1]
  TTestResult r2 = paired_t_test(a, b);
  CHECK(r2.t == doctest::Approx(0.0));
  CHECK(r2.p == doctest::Approx(1.0).epsilon(1e-12));

  // Student-t CDF sanity: symmetric two-sided p at |t|=1, nu=4 is ~0.3739
  std::vector<double> u = {1.31, 0.64, 1.18, 0.82, 1.05};
  std::vector<double> v = {0.0, 0.0, 0.0, 0.0, 0.0};
  TTestResult r3 = paired_t_test(u, v);
  CHECK(r3.p < 0.01);
}
