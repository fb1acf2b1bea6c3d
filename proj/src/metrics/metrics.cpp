#include "metrics/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace fmpl {

PlanLossBreakdown PlanLossNodes::values() const {
  PlanLossBreakdown b;
  b.l_dose = l_dose.scalar();
  b.l_cont_z = l_cont_z.scalar();
  b.l_cont_mu = l_cont_mu.scalar();
  b.l_extra = l_extra.defined() ? l_extra.scalar() : 0.0;
  b.total = total.scalar();
  return b;
}

namespace {

Tensor cp_continuity(const Tensor& t) {
  int n_cp = t.dim(0);
  if (n_cp < 2) return Tensor::scalar_tensor(0.0);
  Tensor hi = slice(t, 0, 1, n_cp);
  Tensor lo = slice(t, 0, 0, n_cp - 1);
  return mean_all(abs_t(sub(hi, lo)));
}

Tensor masked_mean_graph(const Tensor& values, const Tensor& mask) {
  double cnt = 0.0;
  const double* m = mask.ptr();
  for (int64_t i = 0; i < mask.size(); ++i) cnt += m[i];
  if (cnt <= 0.0) throw std::invalid_argument("masked mean: empty mask");
  return mul_scalar(sum_all(mul(values, mask)), 1.0 / cnt);
}

}  // namespace

Tensor ptv_homogeneity_term(const Tensor& dhat, const Tensor& mask, double prescription) {
  if (!(prescription > 0.0))
    throw std::invalid_argument("ptv_homogeneity_term: prescription must be > 0");
  return masked_mean_graph(abs_t(add_scalar(dhat, -prescription)), mask);
}

Tensor oar_sparing_term(const Tensor& dhat, const Tensor& mask) {
  return masked_mean_graph(relu(dhat), mask);
}

PlanLossNodes plan_loss_graph(const Tensor& dhat, const Tensor& dstar,
                              const Tensor& z3, const Tensor& mu,
                              double lambda_z, double lambda_mu,
                              const Tensor* flex_ptv_mask, double prescription,
                              const Tensor* flex_oar_mask, double lambda_x) {
  if (dhat.shape != dstar.shape) throw ShapeError("plan_loss: dose shape mismatch");
  PlanLossNodes out;
  out.l_dose = mean_all(abs_t(sub(dhat, dstar)));
  out.l_cont_z = cp_continuity(z3);
  out.l_cont_mu = cp_continuity(mu);
  out.total = add(out.l_dose, add(mul_scalar(out.l_cont_z, lambda_z),
                                  mul_scalar(out.l_cont_mu, lambda_mu)));
  if (flex_ptv_mask != nullptr) {
    out.l_extra = ptv_homogeneity_term(dhat, *flex_ptv_mask, prescription);
    out.total = add(out.total, mul_scalar(out.l_extra, lambda_x));
  } else if (flex_oar_mask != nullptr) {
    out.l_extra = oar_sparing_term(dhat, *flex_oar_mask);
    out.total = add(out.total, mul_scalar(out.l_extra, lambda_x));
  }
  return out;
}

double mae(const Tensor& a, const Tensor& b, const Mask* mask) {
  if (a.shape != b.shape) throw ShapeError("mae: shape mismatch");
  const double* pa = a.ptr();
  const double* pb = b.ptr();
  double s = 0.0;
  int64_t n = 0;
  for (int64_t i = 0; i < a.size(); ++i) {
    if (mask && !(*mask)[size_t(i)]) continue;
    s += std::fabs(pa[i] - pb[i]);
    ++n;
  }
  if (n == 0) throw std::invalid_argument("mae: empty mask");
  return s / double(n);
}

double psnr(const Tensor& dhat, const Tensor& dstar) {
  if (dhat.shape != dstar.shape) throw ShapeError("psnr: shape mismatch");
  const double* pa = dhat.ptr();
  const double* pb = dstar.ptr();
  double peak = 0.0, mse = 0.0;
  for (int64_t i = 0; i < dhat.size(); ++i) {
    peak = std::max(peak, pb[i]);
    double d = pa[i] - pb[i];
    mse += d * d;
  }
  mse /= double(dhat.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

double ssim3d(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape || a.ndim() != 3) throw ShapeError("ssim3d: expects matching [Z,Y,X]");
  const int Z = a.dim(0), Y = a.dim(1), X = a.dim(2);
  const double* pa = a.ptr();
  const double* pb = b.ptr();

  bool identical = true;
  double bmax = -std::numeric_limits<double>::infinity();
  double bmin = std::numeric_limits<double>::infinity();
  for (int64_t i = 0; i < a.size(); ++i) {
    if (pa[i] != pb[i]) identical = false;
    bmax = std::max(bmax, pb[i]);
    bmin = std::min(bmin, pb[i]);
  }
  if (identical) return 1.0;
  double L = bmax - bmin;
  if (L <= 0.0) L = 1e-12;
  const double C1 = (0.01 * L) * (0.01 * L);
  const double C2 = (0.03 * L) * (0.03 * L);

  // 7-tap Gaussian, sigma 1.5, normalized
  double w[7];
  double wsum = 0.0;
  for (int i = 0; i < 7; ++i) {
    double d = i - 3;
    w[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
    wsum += w[i];
  }
  for (double& v : w) v /= wsum;

  // separable filtering of the five moment maps per slice
  auto filt = [&](const std::vector<double>& src, std::vector<double>& dst,
                  std::vector<double>& tmp) {
    for (int y = 0; y < Y; ++y)
      for (int x = 3; x < X - 3; ++x) {
        double s = 0.0;
        for (int t = -3; t <= 3; ++t) s += w[t + 3] * src[size_t(y) * X + x + t];
        tmp[size_t(y) * X + x] = s;
      }
    for (int y = 3; y < Y - 3; ++y)
      for (int x = 3; x < X - 3; ++x) {
        double s = 0.0;
        for (int t = -3; t <= 3; ++t) s += w[t + 3] * tmp[size_t(y + t) * X + x];
        dst[size_t(y) * X + x] = s;
      }
  };

  double acc = 0.0;
  int64_t count = 0;
  std::vector<double> sa(size_t(Y) * X), sb(size_t(Y) * X), saa(size_t(Y) * X),
      sbb(size_t(Y) * X), sab(size_t(Y) * X);
  std::vector<double> ma(size_t(Y) * X), mb(size_t(Y) * X), maa(size_t(Y) * X),
      mbb(size_t(Y) * X), mab(size_t(Y) * X), tmp(size_t(Y) * X);
  for (int z = 0; z < Z; ++z) {
    const double* az = pa + int64_t(z) * Y * X;
    const double* bz = pb + int64_t(z) * Y * X;
    for (int64_t i = 0; i < int64_t(Y) * X; ++i) {
      sa[size_t(i)] = az[i];
      sb[size_t(i)] = bz[i];
      saa[size_t(i)] = az[i] * az[i];
      sbb[size_t(i)] = bz[i] * bz[i];
      sab[size_t(i)] = az[i] * bz[i];
    }
    filt(sa, ma, tmp);
    filt(sb, mb, tmp);
    filt(saa, maa, tmp);
    filt(sbb, mbb, tmp);
    filt(sab, mab, tmp);
    for (int y = 3; y < Y - 3; ++y)
      for (int x = 3; x < X - 3; ++x) {
        size_t i = size_t(y) * X + x;
        double mua = ma[i], mub = mb[i];
        double va = maa[i] - mua * mua;
        double vb = mbb[i] - mub * mub;
        double cov = mab[i] - mua * mub;
        double v = ((2.0 * mua * mub + C1) * (2.0 * cov + C2)) /
                   ((mua * mua + mub * mub + C1) * (va + vb + C2));
        acc += v;
        ++count;
      }
  }
  return acc / double(count);
}

DVHCurve dvh(const Tensor& d, const Mask& mask, int bins) {
  if (bins < 2) throw std::invalid_argument("dvh: need >= 2 bins");
  std::vector<double> vals;
  const double* p = d.ptr();
  for (int64_t i = 0; i < d.size(); ++i)
    if (mask[size_t(i)]) vals.push_back(p[i]);
  if (vals.empty()) throw std::invalid_argument("dvh: empty mask");
  double dmax = 0.0;
  for (double v : vals) dmax = std::max(dmax, v);

  DVHCurve c;
  c.dose.resize(size_t(bins));
  c.volume_frac.assign(size_t(bins), 0.0);
  for (int i = 0; i < bins; ++i) c.dose[size_t(i)] = dmax * double(i) / double(bins - 1);
  // histogram + suffix sum
  std::vector<int64_t> hist(size_t(bins), 0);
  double scale = dmax > 0.0 ? double(bins - 1) / dmax : 0.0;
  for (double v : vals) {
    int b = int(std::floor(v * scale));
    b = std::clamp(b, 0, bins - 1);
    hist[size_t(b)] += 1;
  }
  int64_t run = 0;
  for (int i = bins - 1; i >= 0; --i) {
    run += hist[size_t(i)];
    c.volume_frac[size_t(i)] = double(run) / double(vals.size());
  }
  // volume_frac[i] approximates frac(D >= dose[i]); the binned count drops a
  // voxel whose value sits below its bin center, so recompute bin 0 exactly.
  c.volume_frac[0] = 1.0;
  return c;
}

double dose_at_volume(const DVHCurve& c, double q_percent) {
  double q = q_percent / 100.0;
  int n = int(c.dose.size());
  if (c.volume_frac[size_t(n - 1)] >= q) return c.dose[size_t(n - 1)];
  for (int i = n - 1; i > 0; --i) {
    double f_hi = c.volume_frac[size_t(i)];
    double f_lo = c.volume_frac[size_t(i - 1)];
    if (f_lo >= q && f_hi < q) {
      if (f_lo == f_hi) return c.dose[size_t(i - 1)];
      double t = (f_lo - q) / (f_lo - f_hi);
      return c.dose[size_t(i - 1)] + t * (c.dose[size_t(i)] - c.dose[size_t(i - 1)]);
    }
  }
  return c.dose[0];
}

double homogeneity_index(const DVHCurve& c) {
  double d50 = dose_at_volume(c, 50.0);
  if (!(d50 > 0.0)) throw std::invalid_argument("homogeneity_index: D50 must be > 0");
  return (dose_at_volume(c, 2.0) - dose_at_volume(c, 98.0)) / d50;
}

std::vector<double> fluence_features(const Tensor& map) {
  if (map.ndim() != 2) throw ShapeError("fluence_features: expects [rows, cols]");
  int R = map.dim(0), C = map.dim(1);
  const double* p = map.ptr();
  std::vector<double> f;
  f.reserve(size_t(2 + R + C + 1));
  double mean = 0.0;
  for (int64_t i = 0; i < map.size(); ++i) mean += p[i];
  mean /= double(map.size());
  double var = 0.0;
  for (int64_t i = 0; i < map.size(); ++i) var += (p[i] - mean) * (p[i] - mean);
  var /= double(map.size());
  f.push_back(mean);
  f.push_back(std::sqrt(var));
  for (int r = 0; r < R; ++r) {
    double s = 0.0;
    for (int c = 0; c < C; ++c) s += p[size_t(r) * C + c];
    f.push_back(s / double(C));
  }
  for (int c = 0; c < C; ++c) {
    double s = 0.0;
    for (int r = 0; r < R; ++r) s += p[size_t(r) * C + c];
    f.push_back(s / double(R));
  }
  // mean absolute difference over all horizontally and vertically adjacent
  // pairs; the |grad| summary feature
  double gsum = 0.0;
  int64_t gcnt = 0;
  for (int r = 0; r < R; ++r)
    for (int c = 0; c + 1 < C; ++c) {
      gsum += std::fabs(p[size_t(r) * C + c + 1] - p[size_t(r) * C + c]);
      ++gcnt;
    }
  for (int r = 0; r + 1 < R; ++r)
    for (int c = 0; c < C; ++c) {
      gsum += std::fabs(p[size_t(r + 1) * C + c] - p[size_t(r) * C + c]);
      ++gcnt;
    }
  f.push_back(gsum / double(gcnt));
  return f;
}

void jacobi_eigen(std::vector<double> a, int n, std::vector<double>& eigenvalues,
                  std::vector<double>& eigenvectors) {
  eigenvectors.assign(size_t(n) * n, 0.0);
  for (int i = 0; i < n; ++i) eigenvectors[size_t(i) * n + i] = 1.0;
  for (int sweep = 0; sweep < 64; ++sweep) {
    double off = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) off += a[size_t(i) * n + j] * a[size_t(i) * n + j];
    if (off < 1e-24) break;
    for (int p = 0; p < n - 1; ++p) {
      for (int q = p + 1; q < n; ++q) {
        double apq = a[size_t(p) * n + q];
        if (std::fabs(apq) < 1e-300) continue;
        double app = a[size_t(p) * n + p], aqq = a[size_t(q) * n + q];
        double theta = (aqq - app) / (2.0 * apq);
        double t = (theta >= 0.0 ? 1.0 : -1.0) /
                   (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        double c = 1.0 / std::sqrt(t * t + 1.0);
        double s = t * c;
        for (int k = 0; k < n; ++k) {
          double akp = a[size_t(k) * n + p], akq = a[size_t(k) * n + q];
          a[size_t(k) * n + p] = c * akp - s * akq;
          a[size_t(k) * n + q] = s * akp + c * akq;
        }
        for (int k = 0; k < n; ++k) {
          double apk = a[size_t(p) * n + k], aqk = a[size_t(q) * n + k];
          a[size_t(p) * n + k] = c * apk - s * aqk;
          a[size_t(q) * n + k] = s * apk + c * aqk;
        }
        for (int k = 0; k < n; ++k) {
          double vkp = eigenvectors[size_t(k) * n + p];
          double vkq = eigenvectors[size_t(k) * n + q];
          eigenvectors[size_t(k) * n + p] = c * vkp - s * vkq;
          eigenvectors[size_t(k) * n + q] = s * vkp + c * vkq;
        }
      }
    }
  }
  eigenvalues.resize(size_t(n));
  for (int i = 0; i < n; ++i) eigenvalues[size_t(i)] = a[size_t(i) * n + i];
}

namespace {

// Eigenvalues below a relative floor collapse to zero so that sqrt of
// round-off jitter in rank-deficient covariances does not pollute traces.
double clamp_eig(double l, double lmax) {
  return l > 1e-12 * std::max(lmax, 1e-300) ? l : 0.0;
}

// B = X^{1/2} for symmetric PSD X (eigenvalues clamped at zero).
std::vector<double> sym_sqrt(const std::vector<double>& x, int n) {
  std::vector<double> ev, V;
  jacobi_eigen(x, n, ev, V);
  double lmax = 0.0;
  for (double l : ev) lmax = std::max(lmax, l);
  std::vector<double> out(size_t(n) * n, 0.0);
  for (int k = 0; k < n; ++k) {
    double l = std::sqrt(clamp_eig(ev[size_t(k)], lmax));
    if (l == 0.0) continue;
    for (int i = 0; i < n; ++i) {
      double vik = V[size_t(i) * n + k] * l;
      for (int j = 0; j < n; ++j) out[size_t(i) * n + j] += vik * V[size_t(j) * n + k];
    }
  }
  return out;
}

}  // namespace

double frechet_from_features(const std::vector<std::vector<double>>& fa,
                             const std::vector<std::vector<double>>& fb) {
  if (fa.size() < 2 || fb.size() < 2)
    throw std::invalid_argument("frechet: need >= 2 samples per set");
  int d = int(fa[0].size());
  auto fit = [&](const std::vector<std::vector<double>>& f, std::vector<double>& mu,
                 std::vector<double>& cov) {
    int n = int(f.size());
    mu.assign(size_t(d), 0.0);
    for (const auto& row : f)
      for (int i = 0; i < d; ++i) mu[size_t(i)] += row[size_t(i)];
    for (double& v : mu) v /= double(n);
    cov.assign(size_t(d) * d, 0.0);
    for (const auto& row : f)
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j)
          cov[size_t(i) * d + j] += (row[size_t(i)] - mu[size_t(i)]) *
                                    (row[size_t(j)] - mu[size_t(j)]);
    for (double& v : cov) v /= double(n - 1);
  };
  std::vector<double> mu1, mu2, c1, c2;
  fit(fa, mu1, c1);
  fit(fb, mu2, c2);

  double mean_term = 0.0;
  for (int i = 0; i < d; ++i) {
    double dm = mu1[size_t(i)] - mu2[size_t(i)];
    mean_term += dm * dm;
  }
  double tr1 = 0.0, tr2 = 0.0;
  for (int i = 0; i < d; ++i) {
    tr1 += c1[size_t(i) * d + i];
    tr2 += c2[size_t(i) * d + i];
  }
  // tr((C1 C2)^{1/2}) via eigenvalues of S1 C2 S1 with S1 = C1^{1/2}
  std::vector<double> s1 = sym_sqrt(c1, d);
  std::vector<double> t(size_t(d) * d, 0.0), m(size_t(d) * d, 0.0);
  for (int i = 0; i < d; ++i)
    for (int k = 0; k < d; ++k) {
      double v = s1[size_t(i) * d + k];
      if (v == 0.0) continue;
      for (int j = 0; j < d; ++j) t[size_t(i) * d + j] += v * c2[size_t(k) * d + j];
    }
  for (int i = 0; i < d; ++i)
    for (int k = 0; k < d; ++k) {
      double v = t[size_t(i) * d + k];
      if (v == 0.0) continue;
      for (int j = 0; j < d; ++j) m[size_t(i) * d + j] += v * s1[size_t(k) * d + j];
    }
  // symmetrize against accumulated roundoff
  for (int i = 0; i < d; ++i)
    for (int j = i + 1; j < d; ++j) {
      double v = 0.5 * (m[size_t(i) * d + j] + m[size_t(j) * d + i]);
      m[size_t(i) * d + j] = v;
      m[size_t(j) * d + i] = v;
    }
  std::vector<double> ev, V;
  jacobi_eigen(m, d, ev, V);
  double lmax = 0.0;
  for (double l : ev) lmax = std::max(lmax, l);
  double tr_sqrt = 0.0;
  for (double l : ev) tr_sqrt += std::sqrt(clamp_eig(l, lmax));
  return mean_term + tr1 + tr2 - 2.0 * tr_sqrt;
}

double frechet_proxy(const std::vector<Tensor>& set_a, const std::vector<Tensor>& set_b) {
  if (set_a.size() < 16 || set_b.size() < 16)
    throw std::invalid_argument("frechet_proxy: need >= 16 maps per set");
  std::vector<std::vector<double>> fa, fb;
  fa.reserve(set_a.size());
  fb.reserve(set_b.size());
  for (const auto& m : set_a) fa.push_back(fluence_features(m));
  for (const auto& m : set_b) fb.push_back(fluence_features(m));
  return frechet_from_features(fa, fb);
}

// Lentz continued fraction for the regularized incomplete beta.
double regularized_incomplete_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  double ln_beta = std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
  double front = std::exp(a * std::log(x) + b * std::log(1.0 - x) - ln_beta);
  bool swap = x > (a + 1.0) / (a + b + 2.0);
  if (swap) {
    std::swap(a, b);
    x = 1.0 - x;
    front = std::exp(a * std::log(x) + b * std::log(1.0 - x) - ln_beta);
  }
  const double tiny = 1e-300;
  double f = 1.0, c = 1.0, d = 0.0;
  for (int i = 0; i <= 300; ++i) {
    int m = i / 2;
    double num;
    if (i == 0)
      num = 1.0;
    else if (i % 2 == 0)
      num = m * (b - m) * x / ((a + 2.0 * m - 1.0) * (a + 2.0 * m));
    else
      num = -(a + m) * (a + b + m) * x / ((a + 2.0 * m) * (a + 2.0 * m + 1.0));
    d = 1.0 + num * d;
    if (std::fabs(d) < tiny) d = tiny;
    d = 1.0 / d;
    c = 1.0 + num / c;
    if (std::fabs(c) < tiny) c = tiny;
    double delta = c * d;
    f *= delta;
    if (std::fabs(delta - 1.0) < 1e-15) break;
  }
  double result = front * (f - 1.0) / a;
  return swap ? 1.0 - result : result;
}

TTestResult paired_t_test(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw std::invalid_argument("paired_t_test: length mismatch");
  size_t n = x.size();
  if (n < 2) throw std::invalid_argument("paired_t_test: need n >= 2");
  std::vector<double> diff(n);
  for (size_t i = 0; i < n; ++i) diff[i] = x[i] - y[i];
  double mean = 0.0;
  for (double v : diff) mean += v;
  mean /= double(n);
  double var = 0.0;
  for (double v : diff) var += (v - mean) * (v - mean);
  var /= double(n - 1);
  if (var == 0.0)
    throw std::invalid_argument("paired_t_test: zero variance of differences");
  TTestResult r;
  double sd = std::sqrt(var);
  r.t = mean * std::sqrt(double(n)) / sd;
  double nu = double(n - 1);
  double xbeta = nu / (nu + r.t * r.t);
  r.p = regularized_incomplete_beta(nu / 2.0, 0.5, xbeta);
  return r;
}

}  // namespace fmpl
