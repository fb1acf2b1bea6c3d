#include "domain/domain.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "core/rng.hpp"
#include "dose/dose.hpp"

namespace fmpl {

namespace {
constexpr uint64_t kStreamPhantom = 1;
constexpr uint64_t kStreamPlan = 2;
constexpr uint64_t kStreamCase = 3;

struct Ellipsoid {
  double cx, cy, cz, ax, ay, az;
  bool contains(double x, double y, double z) const {
    double u = (x - cx) / ax, v = (y - cy) / ay, w = (z - cz) / az;
    return u * u + v * v + w * w <= 1.0;
  }
};

Mask rasterize(const Ellipsoid& e) {
  Mask m(size_t(kGridN), 0);
  for (int z = 0; z < kGridZ; ++z)
    for (int y = 0; y < kGridY; ++y)
      for (int x = 0; x < kGridX; ++x)
        if (e.contains(x + 0.5, y + 0.5, z + 0.5)) m[size_t(grid_index(z, y, x))] = 1;
  return m;
}

}  // namespace

Arc Arc::uniform(int n_cp, double span_deg) {
  if (n_cp < 2) throw std::invalid_argument("Arc: n_cp must be >= 2");
  Arc a;
  a.n_cp = n_cp;
  a.gantry_deg.resize(size_t(n_cp));
  for (int i = 0; i < n_cp; ++i)
    a.gantry_deg[size_t(i)] = span_deg * double(i) / double(n_cp - 1);
  return a;
}

void MachineConstraints::validate() const {
  if (!(min_gap > 0.0 && min_gap < n_cols))
    throw std::invalid_argument("MachineConstraints: 0 < min_gap < n_cols required");
  if (!(max_leaf_travel_per_cp >= 0.0))
    throw std::invalid_argument("MachineConstraints: max_leaf_travel_per_cp >= 0");
  if (!(mu_min >= 0.0 && mu_max > mu_min))
    throw std::invalid_argument("MachineConstraints: need 0 <= mu_min < mu_max");
}

Phantom make_phantom(uint64_t seed) {
  Rng rng = Rng::stream(seed, kStreamPhantom);
  Phantom p;
  p.seed = seed;

  double bx = 32.0 + rng.uniform(-2.0, 2.0);
  double by = 32.0 + rng.uniform(-2.0, 2.0);
  double ba = rng.uniform(24.0, 28.0);
  double bb = rng.uniform(18.0, 22.0);

  p.body.assign(size_t(kGridN), 0);
  for (int z = 0; z < kGridZ; ++z)
    for (int y = 0; y < kGridY; ++y)
      for (int x = 0; x < kGridX; ++x) {
        double u = (x + 0.5 - bx) / ba, v = (y + 0.5 - by) / bb;
        if (u * u + v * v <= 1.0) p.body[size_t(grid_index(z, y, x))] = 1;
      }

  Ellipsoid ptv;
  ptv.cx = bx + rng.uniform(-3.0, 3.0);
  ptv.cy = by + rng.uniform(-3.0, 3.0);
  ptv.cz = 8.0 + rng.uniform(-1.5, 1.5);
  ptv.ax = rng.uniform(4.0, 7.0);
  ptv.ay = rng.uniform(3.5, 5.5);
  ptv.az = rng.uniform(2.5, 4.0);

  // OARs flank the PTV along +x and -y with a 1-2 voxel standoff.
  Ellipsoid oar1, oar2;
  oar1.ax = rng.uniform(3.5, 5.0);
  oar1.ay = rng.uniform(3.5, 5.0);
  oar1.az = rng.uniform(2.5, 3.5);
  oar1.cx = ptv.cx + ptv.ax + oar1.ax + rng.uniform(1.0, 2.0);
  oar1.cy = ptv.cy + rng.uniform(-2.0, 2.0);
  oar1.cz = ptv.cz;

  oar2.ax = rng.uniform(3.5, 5.0);
  oar2.ay = rng.uniform(3.5, 5.0);
  oar2.az = rng.uniform(2.5, 3.5);
  oar2.cx = ptv.cx + rng.uniform(-2.0, 2.0);
  oar2.cy = ptv.cy - (ptv.ay + oar2.ay + rng.uniform(1.0, 2.0));
  oar2.cz = ptv.cz;

  p.ptv = rasterize(ptv);
  p.oars[0] = rasterize(oar1);
  p.oars[1] = rasterize(oar2);
  for (int64_t i = 0; i < kGridN; ++i) {
    p.ptv[size_t(i)] &= p.body[size_t(i)];
    for (auto& oar : p.oars) {
      oar[size_t(i)] &= p.body[size_t(i)];
      if (p.ptv[size_t(i)]) oar[size_t(i)] = 0;  // disjointness guarantee
    }
  }

  p.mu.assign(size_t(kGridN), 0.0);
  for (int64_t i = 0; i < kGridN; ++i)
    if (p.body[size_t(i)]) p.mu[size_t(i)] = 0.02;
  return p;
}

DeliverableSample sample_deliverable_plan(const MachineConstraints& c,
                                          const Arc& arc, uint64_t seed) {
  c.validate();
  Rng rng = Rng::stream(seed, kStreamPlan);
  int n_cp = arc.n_cp, R = c.n_rows, C = c.n_cols;
  int travel = int(std::floor(c.max_leaf_travel_per_cp));
  int gap = std::max(1, int(std::ceil(c.min_gap)));

  // Integer leaf walks keep apertures aligned to column boundaries, which
  // makes sequencing of the pre-smoothing stack an exact round trip.
  std::vector<int> left(static_cast<size_t>(R));
  std::vector<int> right(static_cast<size_t>(R));
  for (int r = 0; r < R; ++r) {
    int l0 = 3 + int(rng.below(uint64_t(std::max(1, C / 3))));
    int w0 = 4 + int(rng.below(7));
    left[size_t(r)] = std::min(l0, C - gap);
    right[size_t(r)] = std::min(left[size_t(r)] + std::max(gap, w0), C);
  }

  // MU walk kept away from zero so every CP map carries signal; the
  // sub-interval still satisfies the [mu_min, mu_max] bound.
  double mu_lo = c.mu_min + 0.05 * (c.mu_max - c.mu_min);
  double mu = rng.uniform(mu_lo + 0.2 * (c.mu_max - mu_lo), c.mu_max);

  Tensor aperture = Tensor::zeros({n_cp, R, C});
  Tensor smooth = Tensor::zeros({n_cp, R, C});
  std::vector<double> mus(static_cast<size_t>(n_cp));

  for (int cp = 0; cp < n_cp; ++cp) {
    if (cp > 0) {
      for (int r = 0; r < R; ++r) {
        int dl = travel > 0 ? int(rng.below(uint64_t(2 * travel + 1))) - travel : 0;
        int dr = travel > 0 ? int(rng.below(uint64_t(2 * travel + 1))) - travel : 0;
        int l = std::clamp(left[size_t(r)] + dl, 0, C - gap);
        int rlo = std::max(l + gap, right[size_t(r)] - travel);
        int rhi = std::min(C, right[size_t(r)] + travel);
        int rr = std::clamp(right[size_t(r)] + dr, rlo, rhi);
        left[size_t(r)] = l;
        right[size_t(r)] = rr;
      }
      double d = rng.uniform(-c.max_mu_delta_per_cp, c.max_mu_delta_per_cp);
      mu = std::clamp(mu + d, mu_lo, c.mu_max);
    }
    mus[size_t(cp)] = mu;
    double* ap = aperture.mut() + int64_t(cp) * R * C;
    for (int r = 0; r < R; ++r)
      for (int col = left[size_t(r)]; col < right[size_t(r)]; ++col)
        ap[int64_t(r) * C + col] = mu;
  }

  // Width-3 triangular smoothing along columns emulates the penumbra.
  const double* src = aperture.ptr();
  double* dst = smooth.mut();
  for (int64_t row = 0; row < int64_t(n_cp) * R; ++row) {
    const double* s = src + row * C;
    double* d = dst + row * C;
    for (int col = 0; col < C; ++col) {
      double v = 0.5 * s[col];
      if (col > 0) v += 0.25 * s[col - 1];
      if (col + 1 < C) v += 0.25 * s[col + 1];
      d[col] = v;
    }
  }

  DeliverableSample out;
  out.plan.fluence = std::move(smooth);
  out.plan.mu = std::move(mus);
  out.plan.provenance = Provenance::SyntheticGroundTruth;
  out.aperture_fluence = std::move(aperture);
  return out;
}

Case build_case(uint64_t seed) {
  return build_case(seed, MachineConstraints{}, Arc::uniform());
}

Case build_case(uint64_t seed, const MachineConstraints& c, const Arc& arc) {
  Rng rng = Rng::stream(seed, kStreamCase);
  for (int attempt = 0; attempt < 64; ++attempt) {
    uint64_t sub = rng.next_u64();
    Case cs;
    cs.seed = seed;
    cs.machine = c;
    cs.arc = arc;
    cs.phantom = make_phantom(sub);
    DeliverableSample sample = sample_deliverable_plan(c, arc, Rng::mix(sub ^ 0x5eedf00d));
    cs.truth = std::move(sample.plan);
    DepositionOperator op = build_deposition(cs.phantom, cs.arc, cs.machine);
    cs.dstar = compute_dose(op, cs.truth.fluence, cs.truth.mu);
    double ptv_mean = masked_mean(cs.dstar, cs.phantom.ptv);
    Mask oar_union(size_t(kGridN), 0);
    for (int64_t i = 0; i < kGridN; ++i)
      oar_union[size_t(i)] = cs.phantom.oars[0][size_t(i)] | cs.phantom.oars[1][size_t(i)];
    double oar_mean = masked_mean(cs.dstar, oar_union);
    if (ptv_mean > oar_mean) return cs;
    // geometry rejected; resample phantom and plan
  }
  throw std::runtime_error("build_case: failed to find PTV/OAR-separated geometry");
}

int64_t mask_count(const Mask& m) {
  int64_t n = 0;
  for (uint8_t v : m) n += v;
  return n;
}

double masked_mean(const Tensor& grid, const Mask& m) {
  int64_t n = 0;
  double s = 0.0;
  const double* p = grid.ptr();
  for (int64_t i = 0; i < int64_t(m.size()); ++i)
    if (m[size_t(i)]) {
      s += p[i];
      ++n;
    }
  return n > 0 ? s / double(n) : 0.0;
}

Tensor mask_to_tensor(const Mask& m) {
  Tensor t = Tensor::zeros({kGridZ, kGridY, kGridX});
  double* p = t.mut();
  for (int64_t i = 0; i < kGridN; ++i) p[i] = m[size_t(i)] ? 1.0 : 0.0;
  return t;
}

}  // namespace fmpl
