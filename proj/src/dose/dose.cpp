#include "dose/dose.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace fmpl {

namespace {

constexpr double kStep = 0.5;       // ray-march step, voxels
constexpr double kReach = 96.0;     // march start distance from grid center
constexpr int kPenumbraRadius = 3;  // taps beyond exp(-4.5) are dropped

// Bilinear gather of mu at (x, y) in slice z; zero outside the grid.
double sample_mu(const std::vector<double>& mu, int z, double x, double y) {
  double fx = x - 0.5, fy = y - 0.5;
  int ix = int(std::floor(fx)), iy = int(std::floor(fy));
  double wx = fx - ix, wy = fy - iy;
  double acc = 0.0;
  for (int dy = 0; dy < 2; ++dy) {
    int yy = iy + dy;
    if (yy < 0 || yy >= kGridY) continue;
    double wyv = dy ? wy : 1.0 - wy;
    for (int dx = 0; dx < 2; ++dx) {
      int xx = ix + dx;
      if (xx < 0 || xx >= kGridX) continue;
      double wxv = dx ? wx : 1.0 - wx;
      acc += wyv * wxv * mu[size_t(grid_index(z, yy, xx))];
    }
  }
  return acc;
}

}  // namespace

DepositionOperator build_deposition(const Phantom& p, const Arc& arc,
                                    const MachineConstraints& c) {
  c.validate();
  if (c.n_rows != kGridZ)
    throw std::invalid_argument("build_deposition: n_rows must match grid slices");
  DepositionOperator A;
  A.n_cp = arc.n_cp;
  A.n_rows = c.n_rows;
  A.n_cols = c.n_cols;

  // Column penumbra: Gaussian with sigma = 1 column, normalized per source
  // column so total fluence is preserved (edge columns renormalized).
  const int C = c.n_cols;
  A.penumbra.assign(size_t(C) * C, 0.0);
  for (int src = 0; src < C; ++src) {
    double norm = 0.0;
    for (int d = -kPenumbraRadius; d <= kPenumbraRadius; ++d) {
      int dst = src + d;
      if (dst < 0 || dst >= C) continue;
      norm += std::exp(-0.5 * d * d);
    }
    for (int d = -kPenumbraRadius; d <= kPenumbraRadius; ++d) {
      int dst = src + d;
      if (dst < 0 || dst >= C) continue;
      A.penumbra[size_t(dst) * C + src] = std::exp(-0.5 * d * d) / norm;
    }
  }

  const double spacing = double(kGridX) / C;
  const double cx = kGridX / 2.0, cy = kGridY / 2.0;
  const int n_samples = int(2.0 * kReach / kStep);

  A.mats.resize(size_t(A.n_cp) * kGridZ);
  std::vector<double> dense(size_t(kGridX) * kGridY);
  std::vector<int> touched;
  touched.reserve(1024);

  for (int cp = 0; cp < A.n_cp; ++cp) {
    double th = arc.gantry_deg[size_t(cp)] * M_PI / 180.0;
    double dirx = std::sin(th), diry = -std::cos(th);
    double perpx = std::cos(th), perpy = std::sin(th);
    for (int z = 0; z < kGridZ; ++z) {
      auto& m = A.mats[size_t(cp) * kGridZ + size_t(z)];
      m.col_ptr.assign(size_t(C) + 1, 0);
      for (int col = 0; col < C; ++col) {
        double u = (col + 0.5 - C / 2.0) * spacing;
        double sx = cx + perpx * u - dirx * kReach;
        double sy = cy + perpy * u - diry * kReach;
        std::fill(dense.begin(), dense.end(), 0.0);
        touched.clear();
        double depth = 0.0;
        for (int s = 0; s <= n_samples; ++s) {
          double x = sx + dirx * kStep * s;
          double y = sy + diry * kStep * s;
          if (x > -1.0 && x < kGridX + 1.0 && y > -1.0 && y < kGridY + 1.0) {
            double trans = kStep * std::exp(-depth) * kDoseScale;
            double fx = x - 0.5, fy = y - 0.5;
            int ix = int(std::floor(fx)), iy = int(std::floor(fy));
            double wx = fx - ix, wy = fy - iy;
            for (int dy = 0; dy < 2; ++dy) {
              int yy = iy + dy;
              if (yy < 0 || yy >= kGridY) continue;
              double wyv = dy ? wy : 1.0 - wy;
              for (int dx = 0; dx < 2; ++dx) {
                int xx = ix + dx;
                if (xx < 0 || xx >= kGridX) continue;
                double wxv = dx ? wx : 1.0 - wx;
                int vox = yy * kGridX + xx;
                if (!p.body[size_t(grid_index(z, yy, xx))]) continue;
                if (dense[size_t(vox)] == 0.0) touched.push_back(vox);
                dense[size_t(vox)] += trans * wyv * wxv;
              }
            }
            depth += sample_mu(p.mu, z, x, y) * kStep;
          }
        }
        std::sort(touched.begin(), touched.end());
        for (int vox : touched) {
          m.voxel.push_back(vox);
          m.w.push_back(dense[size_t(vox)]);
        }
        m.col_ptr[size_t(col) + 1] = int(m.voxel.size());
      }
    }
  }
  return A;
}

namespace {

void apply_penumbra_row(const DepositionOperator& A, const double* f, double* out) {
  int C = A.n_cols;
  for (int dst = 0; dst < C; ++dst) {
    double acc = 0.0;
    const double* prow = A.penumbra.data() + size_t(dst) * C;
    int lo = std::max(0, dst - kPenumbraRadius), hi = std::min(C - 1, dst + kPenumbraRadius);
    for (int src = lo; src <= hi; ++src) acc += prow[src] * f[src];
    out[dst] = acc;
  }
}

void apply_penumbra_row_t(const DepositionOperator& A, const double* t, double* out) {
  int C = A.n_cols;
  for (int src = 0; src < C; ++src) {
    double acc = 0.0;
    int lo = std::max(0, src - kPenumbraRadius), hi = std::min(C - 1, src + kPenumbraRadius);
    for (int dst = lo; dst <= hi; ++dst) acc += A.penumbra[size_t(dst) * C + src] * t[dst];
    out[src] = acc;
  }
}

void check_shapes(const DepositionOperator& A, const Tensor& fluence, size_t n_mu) {
  if (fluence.ndim() != 3 || fluence.dim(0) != A.n_cp || fluence.dim(1) != A.n_rows ||
      fluence.dim(2) != A.n_cols)
    throw ShapeError("dose: fluence shape does not match operator");
  if (int(n_mu) != A.n_cp) throw ShapeError("dose: mu length does not match operator");
}

}  // namespace

Tensor compute_dose(const DepositionOperator& A, const Tensor& fluence,
                    const std::vector<double>& mu) {
  check_shapes(A, fluence, mu.size());
  for (double m : mu)
    if (m < 0.0) throw std::invalid_argument("compute_dose: negative mu rejected");

  Tensor dose = Tensor::zeros({kGridZ, kGridY, kGridX});
  double* D = dose.mut();
  const double* f = fluence.ptr();
  std::vector<double> fs(size_t(A.n_cols));
  for (int cp = 0; cp < A.n_cp; ++cp) {
    double m = mu[size_t(cp)];
    if (m == 0.0) continue;
    for (int z = 0; z < kGridZ; ++z) {
      const double* frow = f + (int64_t(cp) * A.n_rows + z) * A.n_cols;
      apply_penumbra_row(A, frow, fs.data());
      const auto& M = A.mat(cp, z);
      double* Dz = D + int64_t(z) * kGridY * kGridX;
      for (int col = 0; col < A.n_cols; ++col) {
        double fv = m * fs[size_t(col)];
        if (fv == 0.0) continue;
        for (int e = M.col_ptr[size_t(col)]; e < M.col_ptr[size_t(col) + 1]; ++e)
          Dz[M.voxel[size_t(e)]] += fv * M.w[size_t(e)];
      }
    }
  }
  return dose;
}

void dose_adjoint(const DepositionOperator& A, const Tensor& g,
                  const Tensor& fluence, const std::vector<double>& mu,
                  Tensor& dfluence, std::vector<double>& dmu) {
  check_shapes(A, fluence, mu.size());
  if (g.ndim() != 3 || g.dim(0) != kGridZ || g.dim(1) != kGridY || g.dim(2) != kGridX)
    throw ShapeError("dose_adjoint: gradient grid shape");

  dfluence = Tensor::zeros(fluence.shape);
  dmu.assign(size_t(A.n_cp), 0.0);
  const double* G = g.ptr();
  const double* f = fluence.ptr();
  double* df = dfluence.mut();
  std::vector<double> t(size_t(A.n_cols));
  std::vector<double> fs(size_t(A.n_cols));
  std::vector<double> bt(size_t(A.n_cols));
  for (int cp = 0; cp < A.n_cp; ++cp) {
    double m = mu[size_t(cp)];
    double mu_acc = 0.0;
    for (int z = 0; z < kGridZ; ++z) {
      const auto& M = A.mat(cp, z);
      const double* Gz = G + int64_t(z) * kGridY * kGridX;
      for (int col = 0; col < A.n_cols; ++col) {
        double acc = 0.0;
        for (int e = M.col_ptr[size_t(col)]; e < M.col_ptr[size_t(col) + 1]; ++e)
          acc += M.w[size_t(e)] * Gz[M.voxel[size_t(e)]];
        t[size_t(col)] = acc;
      }
      const double* frow = f + (int64_t(cp) * A.n_rows + z) * A.n_cols;
      apply_penumbra_row(A, frow, fs.data());
      for (int col = 0; col < A.n_cols; ++col) mu_acc += t[size_t(col)] * fs[size_t(col)];
      apply_penumbra_row_t(A, t.data(), bt.data());
      double* dfrow = df + (int64_t(cp) * A.n_rows + z) * A.n_cols;
      for (int col = 0; col < A.n_cols; ++col) dfrow[col] = m * bt[size_t(col)];
    }
    dmu[size_t(cp)] = mu_acc;
  }
}

namespace {

struct DoseCustomOp : CustomOp {
  std::shared_ptr<const DepositionOperator> A;

  const char* name() const override { return "dose_apply"; }

  void backward(const std::vector<Tensor>& inputs, const Tensor& /*out*/,
                const Tensor& gout, std::vector<Tensor>& grads_in) const override {
    const Tensor& fluence = inputs[0];
    const Tensor& mu = inputs[1];
    std::vector<double> muv(mu.ptr(), mu.ptr() + mu.size());
    Tensor df;
    std::vector<double> dmu;
    dose_adjoint(*A, gout, fluence, muv, df, dmu);
    grads_in[0] = std::move(df);
    int n_cp = int(dmu.size());
    grads_in[1] = Tensor::from({n_cp}, std::move(dmu));
  }
};

}  // namespace

Tensor dose_forward_node(std::shared_ptr<const DepositionOperator> A,
                         const Tensor& fluence, const Tensor& mu) {
  if (mu.ndim() != 1) throw ShapeError("dose_forward_node: mu must be rank 1");
  std::vector<double> muv(mu.ptr(), mu.ptr() + mu.size());
  Tensor out = compute_dose(*A, fluence, muv);
  auto op = std::make_shared<DoseCustomOp>();
  op->A = std::move(A);
  return apply_custom(std::move(op), {fluence, mu}, std::move(out));
}

}  // namespace fmpl
