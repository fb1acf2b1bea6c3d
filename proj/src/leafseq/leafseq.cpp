#include "leafseq/leafseq.hpp"

#include <algorithm>
#include <cmath>

namespace fmpl {

namespace {

struct Run {
  int start = 0, stop = 0;
  int len() const { return stop - start; }
};

// Largest connected run of columns strictly above threshold; leftmost wins ties.
bool best_run(const double* row, int C, double theta, Run& out) {
  Run best;
  int i = 0;
  while (i < C) {
    if (row[i] > theta) {
      Run r;
      r.start = i;
      while (i < C && row[i] > theta) ++i;
      r.stop = i;
      if (r.len() > best.len()) best = r;
    } else {
      ++i;
    }
  }
  if (best.len() == 0) return false;
  out = best;
  return true;
}

}  // namespace

Aperture sequence_cp(const Tensor& f_cp, const MachineConstraints& c,
                     const Aperture* prev) {
  if (f_cp.ndim() != 2 || f_cp.dim(0) != c.n_rows || f_cp.dim(1) != c.n_cols)
    throw ShapeError("sequence_cp: fluence map shape mismatch");
  const int R = c.n_rows, C = c.n_cols;
  const double* f = f_cp.ptr();
  const double T = c.max_leaf_travel_per_cp;
  const double gap = c.min_gap;

  double global_max = 0.0;
  for (int64_t i = 0; i < f_cp.size(); ++i) global_max = std::max(global_max, f[i]);

  Aperture ap;
  ap.left.assign(size_t(R), 0.0);
  ap.right.assign(size_t(R), 0.0);
  ap.open.assign(size_t(R), 0);

  for (int r = 0; r < R; ++r) {
    const double* row = f + int64_t(r) * C;
    double row_max = 0.0;
    for (int col = 0; col < C; ++col) row_max = std::max(row_max, row[col]);

    bool want_open = global_max > 0.0 && row_max >= 1e-6 * global_max;
    Run run;
    if (want_open) want_open = best_run(row, C, 0.5 * row_max, run);

    double pl = prev ? prev->left[size_t(r)] : 0.0;
    double pr = prev ? prev->right[size_t(r)] : 0.0;

    if (want_open) {
      double l = double(run.start), rr = double(run.stop);
      if (prev) {
        l = std::clamp(l, pl - T, pl + T);
        rr = std::clamp(rr, pr - T, pr + T);
      }
      l = std::clamp(l, 0.0, double(C));
      rr = std::clamp(rr, 0.0, double(C));
      // gap repair: push the right leaf outward (coverage priority), fall
      // back to pulling the left leaf in; the min gap has the last word
      if (rr - l < gap) {
        rr = l + gap;
        double rr_hi = prev ? std::min(pr + T, double(C)) : double(C);
        if (rr > rr_hi) {
          rr = rr_hi;
          l = rr - gap;
          double l_lo = prev ? std::max(pl - T, 0.0) : 0.0;
          if (l < l_lo) {
            l = l_lo;
            rr = l + gap;
          }
        }
      }
      ap.left[size_t(r)] = l;
      ap.right[size_t(r)] = rr;
      ap.open[size_t(r)] = 1;
    } else {
      // closed: collapse the pair and walk the parked position toward 0
      if (!prev) {
        ap.left[size_t(r)] = 0.0;
        ap.right[size_t(r)] = 0.0;
      } else if (pl == pr) {
        double p = std::clamp(0.0, pl - T, pl + T);
        ap.left[size_t(r)] = p;
        ap.right[size_t(r)] = p;
      } else if (pr - pl <= 2.0 * T) {
        double p = std::clamp(0.0, pr - T, pl + T);
        ap.left[size_t(r)] = p;
        ap.right[size_t(r)] = p;
      } else {
        // gap too wide to collapse this CP: shrink as far as travel allows
        double l = pl + T, rr = pr - T;
        if (rr - l < gap) rr = l + gap;
        ap.left[size_t(r)] = l;
        ap.right[size_t(r)] = rr;
        ap.open[size_t(r)] = 1;
      }
    }
  }

  // intensity: mean over all open-interval cells; flat runs short-circuit so
  // sequencing aperture-generated maps reconstructs them bit-exactly
  double sum = 0.0, vmin = 0.0, vmax = 0.0;
  int64_t cnt = 0;
  for (int r = 0; r < R; ++r) {
    if (!ap.open[size_t(r)]) continue;
    const double* row = f + int64_t(r) * C;
    int lo = int(std::floor(ap.left[size_t(r)]));
    int hi = int(std::ceil(ap.right[size_t(r)]));
    for (int col = std::max(0, lo); col < std::min(C, hi); ++col) {
      double cover = std::min(double(col + 1), ap.right[size_t(r)]) -
                     std::max(double(col), ap.left[size_t(r)]);
      if (cover <= 0.0) continue;
      if (cnt == 0) {
        vmin = row[col];
        vmax = row[col];
      } else {
        vmin = std::min(vmin, row[col]);
        vmax = std::max(vmax, row[col]);
      }
      sum += row[col];
      ++cnt;
    }
  }
  ap.intensity = cnt > 0 ? (vmin == vmax ? vmin : sum / double(cnt)) : 0.0;
  return ap;
}

SequencedPlan sequence_plan(const Plan& plan, const MachineConstraints& c) {
  const int n_cp = plan.fluence.dim(0), R = c.n_rows, C = c.n_cols;
  SequencedPlan sp;
  sp.f_ls = Tensor::zeros({n_cp, R, C});
  sp.mu.resize(size_t(n_cp));

  const Aperture* prev = nullptr;
  for (int cp = 0; cp < n_cp; ++cp) {
    Tensor f_cp = Tensor::zeros({R, C});
    std::copy_n(plan.fluence.ptr() + int64_t(cp) * R * C, int64_t(R) * C, f_cp.mut());
    sp.apertures.push_back(sequence_cp(f_cp, c, prev));
    prev = &sp.apertures.back();

    const Aperture& ap = sp.apertures.back();
    double* out = sp.f_ls.mut() + int64_t(cp) * R * C;
    for (int r = 0; r < R; ++r) {
      if (!ap.open[size_t(r)]) continue;
      for (int col = 0; col < C; ++col) {
        double cover = std::min(double(col + 1), ap.right[size_t(r)]) -
                       std::max(double(col), ap.left[size_t(r)]);
        if (cover > 0.0) out[int64_t(r) * C + col] = ap.intensity * std::min(1.0, cover);
      }
    }

    double m = std::clamp(plan.mu[size_t(cp)], c.mu_min, c.mu_max);
    if (cp > 0) {
      double lo = std::max(c.mu_min, sp.mu[size_t(cp) - 1] - c.max_mu_delta_per_cp);
      double hi = std::min(c.mu_max, sp.mu[size_t(cp) - 1] + c.max_mu_delta_per_cp);
      m = std::clamp(m, lo, hi);
    }
    sp.mu[size_t(cp)] = m;
  }
  return sp;
}

std::vector<Violation> validate_deliverability(const SequencedPlan& sp,
                                               const MachineConstraints& c) {
  std::vector<Violation> out;
  const double tol = 1e-9;
  int n_cp = int(sp.apertures.size());
  for (int cp = 0; cp < n_cp; ++cp) {
    const Aperture& ap = sp.apertures[size_t(cp)];
    for (int r = 0; r < c.n_rows; ++r) {
      double l = ap.left[size_t(r)], rr = ap.right[size_t(r)];
      if (l < -tol || rr > c.n_cols + tol || l > rr + tol)
        out.push_back({cp, r, "range", 0.0});
      if (ap.open[size_t(r)] && rr - l < c.min_gap - tol)
        out.push_back({cp, r, "gap", c.min_gap - (rr - l)});
      if (cp > 0) {
        const Aperture& pv = sp.apertures[size_t(cp) - 1];
        double dl = std::fabs(l - pv.left[size_t(r)]);
        double dr = std::fabs(rr - pv.right[size_t(r)]);
        double worst = std::max(dl, dr);
        if (worst > c.max_leaf_travel_per_cp + tol)
          out.push_back({cp, r, "travel", worst - c.max_leaf_travel_per_cp});
      }
    }
    double m = sp.mu[size_t(cp)];
    if (m < c.mu_min - tol || m > c.mu_max + tol) out.push_back({cp, -1, "mu-bound", m});
    if (cp > 0) {
      double d = std::fabs(m - sp.mu[size_t(cp) - 1]);
      if (d > c.max_mu_delta_per_cp + tol)
        out.push_back({cp, -1, "mu-delta", d - c.max_mu_delta_per_cp});
    }
  }
  return out;
}

LsComparison post_ls_metrics(const Case& cs, const DepositionOperator& A,
                             const Plan& pre_plan, const Tensor& pre_dose,
                             const SequencedPlan& sp, const std::string& optimizer,
                             int steps) {
  LsComparison r;
  r.dose_pre = pre_dose;
  r.dose_post = compute_dose(A, sp.f_ls, sp.mu);

  Mask oar_union(size_t(kGridN), 0);
  for (int64_t i = 0; i < kGridN; ++i)
    oar_union[size_t(i)] = cs.phantom.oars[0][size_t(i)] | cs.phantom.oars[1][size_t(i)];

  auto fill = [&](MetricsRow& row, const Tensor& dose, const Tensor& fluence,
                  const std::string& name) {
    row.case_id = "case-" + std::to_string(cs.seed);
    row.optimizer = name;
    row.steps = steps;
    row.mae = mae(dose, cs.dstar, &cs.phantom.body);
    row.mae_ptv = mae(dose, cs.dstar, &cs.phantom.ptv);
    row.mae_oars = mae(dose, cs.dstar, &oar_union);
    row.psnr = psnr(dose, cs.dstar);
    row.ssim = ssim3d(dose, cs.dstar);
    row.hi = homogeneity_index(dvh(dose, cs.phantom.ptv));
    std::vector<Tensor> mine, truth;
    int n_cp = fluence.dim(0);
    for (int cp = 0; cp < n_cp; ++cp) {
      Tensor m = Tensor::zeros({cs.machine.n_rows, cs.machine.n_cols});
      std::copy_n(fluence.ptr() + int64_t(cp) * m.size(), m.size(), m.mut());
      mine.push_back(std::move(m));
      Tensor t = Tensor::zeros({cs.machine.n_rows, cs.machine.n_cols});
      std::copy_n(cs.truth.fluence.ptr() + int64_t(cp) * t.size(), t.size(), t.mut());
      truth.push_back(std::move(t));
    }
    row.frechet = frechet_proxy(mine, truth);
  };
  fill(r.pre, r.dose_pre, pre_plan.fluence, optimizer);
  fill(r.post, r.dose_post, sp.f_ls, optimizer + "_ls");
  return r;
}

}  // namespace fmpl
