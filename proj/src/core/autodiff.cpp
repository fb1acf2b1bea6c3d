#include "core/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace fmpl {

namespace {

thread_local Tape* g_tape = nullptr;

const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::AddS: return "add_scalar";
    case Op::MulS: return "mul_scalar";
    case Op::RsubS: return "rsub_scalar";
    case Op::Matmul: return "matmul";
    case Op::Transpose2d: return "transpose2d";
    case Op::Reshape: return "reshape";
    case Op::Concat: return "concat";
    case Op::Slice: return "slice";
    case Op::BroadcastLead: return "broadcast_lead";
    case Op::SumAll: return "sum";
    case Op::MeanAll: return "mean";
    case Op::Abs: return "abs";
    case Op::Sqrt: return "sqrt";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Sigmoid: return "sigmoid";
    case Op::Tanh: return "tanh";
    case Op::Silu: return "silu";
    case Op::Softplus: return "softplus";
    case Op::Relu: return "relu";
    case Op::Conv2d: return "conv2d";
    case Op::Upsample2x: return "upsample2x";
    case Op::BiasNCHW: return "bias_nchw";
    case Op::LstmCell: return "lstm_cell";
    case Op::Custom: return "custom";
  }
  return "?";
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_softplus(double x) {
  if (x > 35.0) return x;
  if (x < -35.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

// C[m,n] (+)= A[m,k] * B[k,n]
void mm_nn(double* C, const double* A, const double* B, int m, int k, int n,
           bool accumulate) {
  if (!accumulate) std::memset(C, 0, sizeof(double) * size_t(m) * size_t(n));
  for (int i = 0; i < m; ++i) {
    const double* a = A + size_t(i) * k;
    double* c = C + size_t(i) * n;
    for (int p = 0; p < k; ++p) {
      double av = a[p];
      if (av == 0.0) continue;
      const double* b = B + size_t(p) * n;
      for (int j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// C[m,n] (+)= A[m,k] * B[n,k]^T
void mm_nt(double* C, const double* A, const double* B, int m, int k, int n,
           bool accumulate) {
  if (!accumulate) std::memset(C, 0, sizeof(double) * size_t(m) * size_t(n));
  for (int i = 0; i < m; ++i) {
    const double* a = A + size_t(i) * k;
    double* c = C + size_t(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* b = B + size_t(j) * k;
      double s = 0.0;
      for (int p = 0; p < k; ++p) s += a[p] * b[p];
      c[j] += s;
    }
  }
}

// C[m,n] (+)= A[k,m]^T * B[k,n]
void mm_tn(double* C, const double* A, const double* B, int m, int k, int n,
           bool accumulate) {
  if (!accumulate) std::memset(C, 0, sizeof(double) * size_t(m) * size_t(n));
  for (int p = 0; p < k; ++p) {
    const double* a = A + size_t(p) * m;
    const double* b = B + size_t(p) * n;
    for (int i = 0; i < m; ++i) {
      double av = a[i];
      if (av == 0.0) continue;
      double* c = C + size_t(i) * n;
      for (int j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

struct ConvDims {
  int N, C, H, W, K, OH, OW, stride;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride) {
  if (x.ndim() != 4 || w.ndim() != 4) throw ShapeError("conv2d: expects NCHW x and KC33 w");
  if (w.dim(2) != 3 || w.dim(3) != 3) throw ShapeError("conv2d: kernel must be 3x3");
  if (w.dim(1) != x.dim(1)) throw ShapeError("conv2d: channel mismatch");
  if (stride != 1 && stride != 2) throw ShapeError("conv2d: stride must be 1 or 2");
  ConvDims d;
  d.N = x.dim(0);
  d.C = x.dim(1);
  d.H = x.dim(2);
  d.W = x.dim(3);
  d.K = w.dim(0);
  d.stride = stride;
  d.OH = (d.H + 2 - 3) / stride + 1;
  d.OW = (d.W + 2 - 3) / stride + 1;
  return d;
}

inline void tap_range(int dk, int stride, int in_extent, int out_extent, int& lo,
                      int& hi) {
  // valid o with 0 <= o*stride + dk - 1 < in_extent
  lo = 0;
  if (dk == 0) lo = (stride == 1) ? 1 : 1;
  int omax = (in_extent - dk) / stride;  // o*stride + dk - 1 <= in-1
  hi = std::min(out_extent - 1, omax);
}

}  // namespace

Tape* Tape::current() { return g_tape; }

TapeScope::TapeScope(Tape& t) {
  prev_ = g_tape;
  g_tape = &t;
}

TapeScope::~TapeScope() { g_tape = prev_; }

int Tape::intern(const Tensor& t) {
  auto it = ids_.find(t.data.get());
  if (it != ids_.end()) return it->second;
  TapeNode n;
  n.op = Op::Leaf;
  n.out = t;
  nodes_.push_back(std::move(n));
  int id = int(nodes_.size()) - 1;
  ids_[t.data.get()] = id;
  return id;
}

int Tape::node_of(const Tensor& t) const {
  auto it = ids_.find(t.data.get());
  return it == ids_.end() ? -1 : it->second;
}

Tensor record(Op op, std::vector<Tensor> inputs, Tensor out, double s0 = 0.0,
              int i0 = 0, int i1 = 0, int i2 = 0, std::vector<Tensor> saved = {},
              std::shared_ptr<const CustomOp> custom = nullptr) {
  if (!out.all_finite())
    throw NumericError(std::string("non-finite output of op ") +
                       (op == Op::Custom && custom ? custom->name() : op_name(op)));
  bool rg = false;
  for (const auto& t : inputs) rg = rg || t.requires_grad;
  out.requires_grad = rg;
  Tape* tape = Tape::current();
  if (tape != nullptr && rg) {
    TapeNode n;
    n.op = op;
    n.s0 = s0;
    n.i0 = i0;
    n.i1 = i1;
    n.i2 = i2;
    n.custom = std::move(custom);
    n.saved = std::move(saved);
    n.in.reserve(inputs.size());
    for (const auto& t : inputs) n.in.push_back(tape->intern(t));
    n.inputs = std::move(inputs);
    n.out = out;
    tape->nodes_.push_back(std::move(n));
    tape->ids_[out.data.get()] = int(tape->nodes_.size()) - 1;
  }
  return out;
}

// ---- elementwise -------------------------------------------------------

static void require_same_shape(const Tensor& a, const Tensor& b, const char* who) {
  if (a.shape != b.shape)
    throw ShapeError(std::string(who) + ": shape mismatch " + shape_str(a.shape) +
                     " vs " + shape_str(b.shape));
}

#define EW_BINARY(NAME, OPK, EXPR)                           \
  Tensor NAME(const Tensor& a, const Tensor& b) {            \
    require_same_shape(a, b, #NAME);                         \
    Tensor out = Tensor::zeros(a.shape);                     \
    const double* pa = a.ptr();                              \
    const double* pb = b.ptr();                              \
    double* po = out.mut();                                  \
    int64_t n = a.size();                                    \
    for (int64_t i = 0; i < n; ++i) po[i] = (EXPR);          \
    return record(OPK, {a, b}, std::move(out));              \
  }

EW_BINARY(add, Op::Add, pa[i] + pb[i])
EW_BINARY(sub, Op::Sub, pa[i] - pb[i])
EW_BINARY(mul, Op::Mul, pa[i] * pb[i])
EW_BINARY(divide, Op::Div, pa[i] / pb[i])
#undef EW_BINARY

Tensor add_scalar(const Tensor& a, double s) {
  Tensor out = Tensor::zeros(a.shape);
  const double* pa = a.ptr();
  double* po = out.mut();
  for (int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] + s;
  return record(Op::AddS, {a}, std::move(out), s);
}

Tensor mul_scalar(const Tensor& a, double s) {
  Tensor out = Tensor::zeros(a.shape);
  const double* pa = a.ptr();
  double* po = out.mut();
  for (int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] * s;
  return record(Op::MulS, {a}, std::move(out), s);
}

Tensor rsub_scalar(double s, const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape);
  const double* pa = a.ptr();
  double* po = out.mut();
  for (int64_t i = 0; i < a.size(); ++i) po[i] = s - pa[i];
  return record(Op::RsubS, {a}, std::move(out), s);
}

#define EW_UNARY(NAME, OPK, EXPR)                   \
  Tensor NAME(const Tensor& a) {                    \
    Tensor out = Tensor::zeros(a.shape);            \
    const double* pa = a.ptr();                     \
    double* po = out.mut();                         \
    int64_t n = a.size();                           \
    for (int64_t i = 0; i < n; ++i) {               \
      double x = pa[i];                             \
      po[i] = (EXPR);                               \
    }                                               \
    return record(OPK, {a}, std::move(out));        \
  }

EW_UNARY(abs_t, Op::Abs, std::fabs(x))
EW_UNARY(sqrt_t, Op::Sqrt, std::sqrt(x))
EW_UNARY(exp_t, Op::Exp, std::exp(x))
EW_UNARY(log_t, Op::Log, std::log(x))
EW_UNARY(sigmoid, Op::Sigmoid, stable_sigmoid(x))
EW_UNARY(tanh_t, Op::Tanh, std::tanh(x))
EW_UNARY(silu, Op::Silu, x* stable_sigmoid(x))
EW_UNARY(softplus, Op::Softplus, stable_softplus(x))
EW_UNARY(relu, Op::Relu, x > 0.0 ? x : 0.0)
#undef EW_UNARY

// ---- structure ops ------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape) + " x " +
                     shape_str(b.shape));
  int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  mm_nn(out.mut(), a.ptr(), b.ptr(), m, k, n, false);
  return record(Op::Matmul, {a, b}, std::move(out));
}

Tensor transpose2d(const Tensor& a) {
  if (a.ndim() != 2) throw ShapeError("transpose2d: expects rank 2");
  int m = a.dim(0), n = a.dim(1);
  Tensor out = Tensor::zeros({n, m});
  const double* pa = a.ptr();
  double* po = out.mut();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) po[size_t(j) * m + i] = pa[size_t(i) * n + j];
  return record(Op::Transpose2d, {a}, std::move(out));
}

Tensor reshape(const Tensor& a, std::vector<int> shape) {
  if (Tensor::numel(shape) != a.size())
    throw ShapeError("reshape: element count mismatch");
  Tensor out;
  out.shape = std::move(shape);
  out.data = std::make_shared<std::vector<double>>(*a.data);
  return record(Op::Reshape, {a}, std::move(out));
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const auto& s0 = parts[0].shape;
  if (axis < 0 || axis >= int(s0.size())) throw ShapeError("concat: bad axis");
  int total = 0;
  for (const auto& p : parts) {
    if (p.ndim() != int(s0.size())) throw ShapeError("concat: rank mismatch");
    for (int d = 0; d < p.ndim(); ++d)
      if (d != axis && p.dim(d) != s0[size_t(d)])
        throw ShapeError("concat: shape mismatch off-axis");
    total += p.dim(axis);
  }
  std::vector<int> oshape = s0;
  oshape[size_t(axis)] = total;
  Tensor out = Tensor::zeros(oshape);
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s0[size_t(d)];
  for (int d = axis + 1; d < int(s0.size()); ++d) inner *= s0[size_t(d)];
  double* po = out.mut();
  int64_t ostride = int64_t(total) * inner;
  int64_t off = 0;
  for (const auto& p : parts) {
    int64_t pstride = int64_t(p.dim(axis)) * inner;
    const double* pp = p.ptr();
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(po + o * ostride + off, pp + o * pstride,
                  sizeof(double) * size_t(pstride));
    off += pstride;
  }
  return record(Op::Concat, parts, std::move(out), 0.0, axis);
}

Tensor slice(const Tensor& a, int axis, int start, int stop) {
  if (axis < 0 || axis >= a.ndim()) throw ShapeError("slice: bad axis");
  if (start < 0 || stop > a.dim(axis) || start >= stop)
    throw ShapeError("slice: bad range");
  std::vector<int> oshape = a.shape;
  oshape[size_t(axis)] = stop - start;
  Tensor out = Tensor::zeros(oshape);
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= a.dim(d);
  for (int d = axis + 1; d < a.ndim(); ++d) inner *= a.dim(d);
  int64_t astride = int64_t(a.dim(axis)) * inner;
  int64_t ostride = int64_t(stop - start) * inner;
  const double* pa = a.ptr();
  double* po = out.mut();
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(po + o * ostride, pa + o * astride + int64_t(start) * inner,
                sizeof(double) * size_t(ostride));
  return record(Op::Slice, {a}, std::move(out), 0.0, axis, start, stop);
}

Tensor broadcast_lead(const Tensor& a, int n_lead) {
  if (n_lead <= 0) throw ShapeError("broadcast_lead: n_lead must be positive");
  std::vector<int> oshape;
  oshape.push_back(n_lead);
  for (int d : a.shape) oshape.push_back(d);
  Tensor out = Tensor::zeros(oshape);
  double* po = out.mut();
  int64_t n = a.size();
  for (int i = 0; i < n_lead; ++i)
    std::memcpy(po + int64_t(i) * n, a.ptr(), sizeof(double) * size_t(n));
  return record(Op::BroadcastLead, {a}, std::move(out), 0.0, n_lead);
}

Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  const double* pa = a.ptr();
  for (int64_t i = 0; i < a.size(); ++i) s += pa[i];
  return record(Op::SumAll, {a}, Tensor::from({1}, {s}));
}

Tensor mean_all(const Tensor& a) {
  double s = 0.0;
  const double* pa = a.ptr();
  for (int64_t i = 0; i < a.size(); ++i) s += pa[i];
  return record(Op::MeanAll, {a}, Tensor::from({1}, {s / double(a.size())}));
}

// ---- network ops --------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride) {
  ConvDims d = conv_dims(x, w, stride);
  if (b.ndim() != 1 || b.dim(0) != d.K) throw ShapeError("conv2d: bias shape");
  Tensor out = Tensor::zeros({d.N, d.K, d.OH, d.OW});
  const double* px = x.ptr();
  const double* pw = w.ptr();
  const double* pb = b.ptr();
  double* po = out.mut();
  for (int n = 0; n < d.N; ++n) {
    for (int k = 0; k < d.K; ++k) {
      double* op = po + (size_t(n) * d.K + k) * d.OH * d.OW;
      double bias = pb[k];
      for (int i = 0; i < d.OH * d.OW; ++i) op[i] = bias;
      for (int c = 0; c < d.C; ++c) {
        const double* xp = px + (size_t(n) * d.C + c) * d.H * d.W;
        const double* wp = pw + (size_t(k) * d.C + c) * 9;
        for (int dy = 0; dy < 3; ++dy) {
          int oy_lo, oy_hi;
          tap_range(dy, stride, d.H, d.OH, oy_lo, oy_hi);
          for (int dx = 0; dx < 3; ++dx) {
            double wv = wp[dy * 3 + dx];
            int ox_lo, ox_hi;
            tap_range(dx, stride, d.W, d.OW, ox_lo, ox_hi);
            for (int oy = oy_lo; oy <= oy_hi; ++oy) {
              int iy = oy * stride + dy - 1;
              const double* xrow = xp + size_t(iy) * d.W + (dx - 1);
              double* orow = op + size_t(oy) * d.OW;
              for (int ox = ox_lo; ox <= ox_hi; ++ox)
                orow[ox] += wv * xrow[size_t(ox) * stride];
            }
          }
        }
      }
    }
  }
  return record(Op::Conv2d, {x, w, b}, std::move(out), 0.0, stride);
}

Tensor upsample2x(const Tensor& x) {
  if (x.ndim() != 4) throw ShapeError("upsample2x: expects NCHW");
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor out = Tensor::zeros({N, C, 2 * H, 2 * W});
  const double* px = x.ptr();
  double* po = out.mut();
  for (int64_t nc = 0; nc < int64_t(N) * C; ++nc) {
    const double* ip = px + nc * H * W;
    double* op = po + nc * 4 * H * W;
    for (int y = 0; y < H; ++y) {
      for (int x2 = 0; x2 < W; ++x2) {
        double v = ip[size_t(y) * W + x2];
        double* o0 = op + size_t(2 * y) * 2 * W + 2 * x2;
        o0[0] = v;
        o0[1] = v;
        o0[2 * W] = v;
        o0[2 * W + 1] = v;
      }
    }
  }
  return record(Op::Upsample2x, {x}, std::move(out));
}

Tensor bias_nchw(const Tensor& x, const Tensor& e) {
  if (x.ndim() != 4 || e.ndim() != 2 || e.dim(0) != x.dim(0) || e.dim(1) != x.dim(1))
    throw ShapeError("bias_nchw: expects x [N,C,H,W], e [N,C]");
  int N = x.dim(0), C = x.dim(1);
  int64_t hw = int64_t(x.dim(2)) * x.dim(3);
  Tensor out = Tensor::zeros(x.shape);
  const double* px = x.ptr();
  const double* pe = e.ptr();
  double* po = out.mut();
  for (int64_t nc = 0; nc < int64_t(N) * C; ++nc) {
    double bias = pe[nc];
    const double* ip = px + nc * hw;
    double* op = po + nc * hw;
    for (int64_t i = 0; i < hw; ++i) op[i] = ip[i] + bias;
  }
  return record(Op::BiasNCHW, {x, e}, std::move(out));
}

Tensor lstm_cell(const Tensor& x, const Tensor& h, const Tensor& c,
                 const Tensor& w_ih, const Tensor& w_hh, const Tensor& b) {
  if (x.ndim() != 2 || h.ndim() != 2 || c.ndim() != 2)
    throw ShapeError("lstm_cell: x/h/c must be rank 2");
  int n = x.dim(0), in = x.dim(1), H = h.dim(1);
  if (h.dim(0) != n || c.dim(0) != n || c.dim(1) != H)
    throw ShapeError("lstm_cell: state shape mismatch");
  if (w_ih.ndim() != 2 || w_ih.dim(0) != in || w_ih.dim(1) != 4 * H ||
      w_hh.ndim() != 2 || w_hh.dim(0) != H || w_hh.dim(1) != 4 * H ||
      b.ndim() != 1 || b.dim(0) != 4 * H)
    throw ShapeError("lstm_cell: weight shape mismatch");

  Tensor pre = Tensor::zeros({n, 4 * H});
  mm_nn(pre.mut(), x.ptr(), w_ih.ptr(), n, in, 4 * H, false);
  mm_nn(pre.mut(), h.ptr(), w_hh.ptr(), n, H, 4 * H, true);
  {
    double* pp = pre.mut();
    const double* pb = b.ptr();
    for (int r = 0; r < n; ++r)
      for (int j = 0; j < 4 * H; ++j) pp[size_t(r) * 4 * H + j] += pb[j];
  }
  Tensor gates = Tensor::zeros({n, 4 * H});  // [i f g o] post-activation
  Tensor out = Tensor::zeros({n, 2 * H});    // [h' | c']
  {
    const double* pp = pre.ptr();
    const double* pc = c.ptr();
    double* pg = gates.mut();
    double* po = out.mut();
    for (int r = 0; r < n; ++r) {
      const double* prer = pp + size_t(r) * 4 * H;
      double* gr = pg + size_t(r) * 4 * H;
      for (int j = 0; j < H; ++j) {
        double gi = stable_sigmoid(prer[j]);
        double gf = stable_sigmoid(prer[H + j]);
        double gg = std::tanh(prer[2 * H + j]);
        double go = stable_sigmoid(prer[3 * H + j]);
        gr[j] = gi;
        gr[H + j] = gf;
        gr[2 * H + j] = gg;
        gr[3 * H + j] = go;
        double cn = gf * pc[size_t(r) * H + j] + gi * gg;
        po[size_t(r) * 2 * H + j] = go * std::tanh(cn);
        po[size_t(r) * 2 * H + H + j] = cn;
      }
    }
  }
  return record(Op::LstmCell, {x, h, c, w_ih, w_hh, b}, std::move(out), 0.0, 0, 0,
                0, {gates});
}

Tensor apply_custom(std::shared_ptr<const CustomOp> op, std::vector<Tensor> inputs,
                    Tensor out) {
  return record(Op::Custom, std::move(inputs), std::move(out), 0.0, 0, 0, 0, {},
                std::move(op));
}

// ---- backward -----------------------------------------------------------

namespace {

void accum_into(Tensor& slot, const Tensor& g) {
  if (!slot.defined()) {
    slot = g.clone();
    slot.requires_grad = false;
    return;
  }
  double* ps = slot.mut();
  const double* pg = g.ptr();
  for (int64_t i = 0; i < slot.size(); ++i) ps[i] += pg[i];
}

void accum_owned(Tensor& slot, Tensor&& g) {
  if (!slot.defined()) {
    g.requires_grad = false;
    slot = std::move(g);
    return;
  }
  double* ps = slot.mut();
  const double* pg = g.ptr();
  for (int64_t i = 0; i < slot.size(); ++i) ps[i] += pg[i];
}

}  // namespace

static void backward_node(const TapeNode& n, const Tensor& gout,
                          std::vector<Tensor>& grads,
                          const std::vector<TapeNode>& nodes) {
  auto needs = [&](int slot) {
    return nodes[size_t(n.in[size_t(slot)])].out.requires_grad;
  };
  auto out_slot = [&](int slot) -> Tensor& {
    return grads[size_t(n.in[size_t(slot)])];
  };

  const double* g = gout.ptr();
  int64_t sz = gout.size();

  switch (n.op) {
    case Op::Leaf:
      return;
    case Op::Add: {
      if (needs(0)) accum_into(out_slot(0), gout);
      if (needs(1)) accum_into(out_slot(1), gout);
      return;
    }
    case Op::Sub: {
      if (needs(0)) accum_into(out_slot(0), gout);
      if (needs(1)) {
        Tensor gb = Tensor::zeros(n.inputs[1].shape);
        double* p = gb.mut();
        for (int64_t i = 0; i < sz; ++i) p[i] = -g[i];
        accum_owned(out_slot(1), std::move(gb));
      }
      return;
    }
    case Op::Mul: {
      if (needs(0)) {
        Tensor ga = Tensor::zeros(n.inputs[0].shape);
        double* p = ga.mut();
        const double* pb = n.inputs[1].ptr();
        for (int64_t i = 0; i < sz; ++i) p[i] = g[i] * pb[i];
        accum_owned(out_slot(0), std::move(ga));
      }
      if (needs(1)) {
        Tensor gb = Tensor::zeros(n.inputs[1].shape);
        double* p = gb.mut();
        const double* pa = n.inputs[0].ptr();
        for (int64_t i = 0; i < sz; ++i) p[i] = g[i] * pa[i];
        accum_owned(out_slot(1), std::move(gb));
      }
      return;
    }
    case Op::Div: {
      const double* pa = n.inputs[0].ptr();
      const double* pb = n.inputs[1].ptr();
      if (needs(0)) {
        Tensor ga = Tensor::zeros(n.inputs[0].shape);
        double* p = ga.mut();
        for (int64_t i = 0; i < sz; ++i) p[i] = g[i] / pb[i];
        accum_owned(out_slot(0), std::move(ga));
      }
      if (needs(1)) {
        Tensor gb = Tensor::zeros(n.inputs[1].shape);
        double* p = gb.mut();
        for (int64_t i = 0; i < sz; ++i) p[i] = -g[i] * pa[i] / (pb[i] * pb[i]);
        accum_owned(out_slot(1), std::move(gb));
      }
      return;
    }
    case Op::AddS: {
      if (needs(0)) accum_into(out_slot(0), gout);
      return;
    }
    case Op::MulS: {
      if (needs(0)) {
        Tensor ga = Tensor::zeros(n.inputs[0].shape);
        double* p = ga.mut();
        for (int64_t i = 0; i < sz; ++i) p[i] = g[i] * n.s0;
        accum_owned(out_slot(0), std::move(ga));
      }
      return;
    }
    case Op::RsubS: {
      if (needs(0)) {
        Tensor ga = Tensor::zeros(n.inputs[0].shape);
        double* p = ga.mut();
        for (int64_t i = 0; i < sz; ++i) p[i] = -g[i];
        accum_owned(out_slot(0), std::move(ga));
      }
      return;
    }
    case Op::Matmul: {
      const Tensor& a = n.inputs[0];
      const Tensor& b = n.inputs[1];
      int m = a.dim(0), k = a.dim(1), c = b.dim(1);
      if (needs(0)) {
        Tensor ga = Tensor::zeros(a.shape);
        mm_nt(ga.mut(), g, b.ptr(), m, c, k, false);  // g[m,c] * b[k,c]^T
        accum_owned(out_slot(0), std::move(ga));
      }
      if (needs(1)) {
        Tensor gb = Tensor::zeros(b.shape);
        mm_tn(gb.mut(), a.ptr(), g, k, m, c, false);  // a[m,k]^T * g[m,c]
        accum_owned(out_slot(1), std::move(gb));
      }
      return;
    }
    case Op::Transpose2d: {
      if (needs(0)) {
        const Tensor& a = n.inputs[0];
        int m = a.dim(0), c = a.dim(1);
        Tensor ga = Tensor::zeros(a.shape);
        double* p = ga.mut();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < c; ++j) p[size_t(i) * c + j] = g[size_t(j) * m + i];
        accum_owned(out_slot(0), std::move(ga));
      }
      return;
    }
    case Op::Reshape: {
      if (needs(0)) {
        Tensor ga;
        ga.shape = n.inputs[0].shape;
        ga.data = std::make_shared<std::vector<double>>(*gout.data);
        accum_owned(out_slot(0), std::move(ga));
      }
      return;
    }
    case Op::Concat: {
      int axis = n.i0;
      const auto& s0 = n.out.shape;
      int64_t outer = 1, inner = 1;
      for (int d = 0; d < axis; ++d) outer *= s0[size_t(d)];
      for (int d = axis + 1; d < int(s0.size()); ++d) inner *= s0[size_t(d)];
      int64_t ostride = int64_t(s0[size_t(axis)]) * inner;
      int64_t off = 0;
      for (size_t pi = 0; pi < n.inputs.size(); ++pi) {
        const Tensor& part = n.inputs[pi];
        int64_t pstride = int64_t(part.dim(axis)) * inner;
        if (needs(int(pi))) {
          Tensor gp = Tensor::zeros(part.shape);
          double* p = gp.mut();
          for (int64_t o = 0; o < outer; ++o)
            std::memcpy(p + o * pstride, g + o * ostride + off,
                        sizeof(double) * size_t(pstride));
          accum_owned(out_slot(int(pi)), std::move(gp));
        }
        off += pstride;
      }
      return;
    }
    case Op::Slice: {
      if (needs(0)) {
        const Tensor& a = n.inputs[0];
        int axis = n.i0, start = n.i1, stop = n.i2;
        int64_t outer = 1, inner = 1;
        for (int d = 0; d < axis; ++d) outer *= a.dim(d);
        for (int d = axis + 1; d < a.ndim(); ++d) inner *= a.dim(d);
        int64_t astride = int64_t(a.dim(axis)) * inner;
        int64_t ostride = int64_t(stop - start) * inner;
        Tensor ga = Tensor::zeros(a.shape);
        double* p = ga.mut();
        for (int64_t o = 0; o < outer; ++o)
          std::memcpy(p + o * astride + int64_t(start) * inner, g + o * ostride,
                      sizeof(double) * size_t(ostride));
        accum_owned(out_slot(0), std::move(ga));
      }
      return;
    }
    case Op::BroadcastLead: {
      if (needs(0)) {
        const Tensor& a = n.inputs[0];
        int64_t m = a.size();
        Tensor ga = Tensor::zeros(a.shape);
        double* p = ga.mut();
        for (int i = 0; i < n.i0; ++i) {
          const double* gr = g + int64_t(i) * m;
          for (int64_t j = 0; j < m; ++j) p[j] += gr[j];
        }
        accum_owned(out_slot(0), std::move(ga));
      }
      return;
    }
    case Op::SumAll: {
      if (needs(0)) {
        Tensor ga = Tensor::full(n.inputs[0].shape, g[0]);
        accum_owned(out_slot(0), std::move(ga));
      }
      return;
    }
    case Op::MeanAll: {
      if (needs(0)) {
        Tensor ga =
            Tensor::full(n.inputs[0].shape, g[0] / double(n.inputs[0].size()));
        accum_owned(out_slot(0), std::move(ga));
      }
      return;
    }
    case Op::Abs: {
      if (needs(0)) {
        const double* pa = n.inputs[0].ptr();
        Tensor ga = Tensor::zeros(n.inputs[0].shape);
        double* p = ga.mut();
        for (int64_t i = 0; i < sz; ++i)
          p[i] = pa[i] > 0.0 ? g[i] : (pa[i] < 0.0 ? -g[i] : 0.0);
        accum_owned(out_slot(0), std::move(ga));
      }
      return;
    }
    case Op::Sqrt: {
      if (needs(0)) {
        const double* po = n.out.ptr();
        Tensor ga = Tensor::zeros(n.inputs[0].shape);
        double* p = ga.mut();
        for (int64_t i = 0; i < sz; ++i)
          p[i] = po[i] > 0.0 ? 0.5 * g[i] / po[i] : 0.0;
        accum_owned(out_slot(0), std::move(ga));
      }
      return;
    }
    case Op::Exp: {
      if (needs(0)) {
        const double* po = n.out.ptr();
        Tensor ga = Tensor::zeros(n.inputs[0].shape);
        double* p = ga.mut();
        for (int64_t i = 0; i < sz; ++i) p[i] = g[i] * po[i];
        accum_owned(out_slot(0), std::move(ga));
      }
      return;
    }
    case Op::Log: {
      if (needs(0)) {
        const double* pa = n.inputs[0].ptr();
        Tensor ga = Tensor::zeros(n.inputs[0].shape);
        double* p = ga.mut();
        for (int64_t i = 0; i < sz; ++i) p[i] = g[i] / pa[i];
        accum_owned(out_slot(0), std::move(ga));
      }
      return;
    }
    case Op::Sigmoid: {
      if (needs(0)) {
        const double* po = n.out.ptr();
        Tensor ga = Tensor::zeros(n.inputs[0].shape);
        double* p = ga.mut();
        for (int64_t i = 0; i < sz; ++i) p[i] = g[i] * po[i] * (1.0 - po[i]);
        accum_owned(out_slot(0), std::move(ga));
      }
      return;
    }
    case Op::Tanh: {
      if (needs(0)) {
        const double* po = n.out.ptr();
        Tensor ga = Tensor::zeros(n.inputs[0].shape);
        double* p = ga.mut();
        for (int64_t i = 0; i < sz; ++i) p[i] = g[i] * (1.0 - po[i] * po[i]);
        accum_owned(out_slot(0), std::move(ga));
      }
      return;
    }
    case Op::Silu: {
      if (needs(0)) {
        const double* pa = n.inputs[0].ptr();
        Tensor ga = Tensor::zeros(n.inputs[0].shape);
        double* p = ga.mut();
        for (int64_t i = 0; i < sz; ++i) {
          double s = stable_sigmoid(pa[i]);
          p[i] = g[i] * s * (1.0 + pa[i] * (1.0 - s));
        }
        accum_owned(out_slot(0), std::move(ga));
      }
      return;
    }
    case Op::Softplus: {
      if (needs(0)) {
        const double* pa = n.inputs[0].ptr();
        Tensor ga = Tensor::zeros(n.inputs[0].shape);
        double* p = ga.mut();
        for (int64_t i = 0; i < sz; ++i) p[i] = g[i] * stable_sigmoid(pa[i]);
        accum_owned(out_slot(0), std::move(ga));
      }
      return;
    }
    case Op::Relu: {
      if (needs(0)) {
        const double* pa = n.inputs[0].ptr();
        Tensor ga = Tensor::zeros(n.inputs[0].shape);
        double* p = ga.mut();
        for (int64_t i = 0; i < sz; ++i) p[i] = pa[i] > 0.0 ? g[i] : 0.0;
        accum_owned(out_slot(0), std::move(ga));
      }
      return;
    }
    case Op::Conv2d: {
      const Tensor& x = n.inputs[0];
      const Tensor& w = n.inputs[1];
      int stride = n.i0;
      ConvDims d = conv_dims(x, w, stride);
      const double* px = x.ptr();
      const double* pw = w.ptr();
      Tensor gx, gw, gb;
      if (needs(0)) gx = Tensor::zeros(x.shape);
      if (needs(1)) gw = Tensor::zeros(w.shape);
      if (needs(2)) gb = Tensor::zeros({d.K});
      for (int nn = 0; nn < d.N; ++nn) {
        for (int k = 0; k < d.K; ++k) {
          const double* gp = g + (size_t(nn) * d.K + k) * d.OH * d.OW;
          if (gb.defined()) {
            double s = 0.0;
            for (int i = 0; i < d.OH * d.OW; ++i) s += gp[i];
            gb.mut()[k] += s;
          }
          for (int c = 0; c < d.C; ++c) {
            const double* xp = px + (size_t(nn) * d.C + c) * d.H * d.W;
            const double* wp = pw + (size_t(k) * d.C + c) * 9;
            double* gxp = gx.defined() ? gx.mut() + (size_t(nn) * d.C + c) * d.H * d.W
                                       : nullptr;
            double* gwp = gw.defined() ? gw.mut() + (size_t(k) * d.C + c) * 9
                                       : nullptr;
            for (int dy = 0; dy < 3; ++dy) {
              int oy_lo, oy_hi;
              tap_range(dy, stride, d.H, d.OH, oy_lo, oy_hi);
              for (int dx = 0; dx < 3; ++dx) {
                int ox_lo, ox_hi;
                tap_range(dx, stride, d.W, d.OW, ox_lo, ox_hi);
                double wv = wp[dy * 3 + dx];
                double wacc = 0.0;
                for (int oy = oy_lo; oy <= oy_hi; ++oy) {
                  int iy = oy * stride + dy - 1;
                  const double* grow = gp + size_t(oy) * d.OW;
                  const double* xrow = xp + size_t(iy) * d.W + (dx - 1);
                  if (gxp) {
                    double* gxrow = gxp + size_t(iy) * d.W + (dx - 1);
                    for (int ox = ox_lo; ox <= ox_hi; ++ox)
                      gxrow[size_t(ox) * stride] += wv * grow[ox];
                  }
                  if (gwp) {
                    for (int ox = ox_lo; ox <= ox_hi; ++ox)
                      wacc += grow[ox] * xrow[size_t(ox) * stride];
                  }
                }
                if (gwp) gwp[dy * 3 + dx] += wacc;
              }
            }
          }
        }
      }
      if (gx.defined()) accum_owned(out_slot(0), std::move(gx));
      if (gw.defined()) accum_owned(out_slot(1), std::move(gw));
      if (gb.defined()) accum_owned(out_slot(2), std::move(gb));
      return;
    }
    case Op::Upsample2x: {
      if (needs(0)) {
        const Tensor& x = n.inputs[0];
        int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
        Tensor gx = Tensor::zeros(x.shape);
        double* p = gx.mut();
        for (int64_t nc = 0; nc < int64_t(N) * C; ++nc) {
          double* ip = p + nc * H * W;
          const double* gp = g + nc * 4 * H * W;
          for (int y = 0; y < H; ++y)
            for (int x2 = 0; x2 < W; ++x2) {
              const double* g0 = gp + size_t(2 * y) * 2 * W + 2 * x2;
              ip[size_t(y) * W + x2] = g0[0] + g0[1] + g0[2 * W] + g0[2 * W + 1];
            }
        }
        accum_owned(out_slot(0), std::move(gx));
      }
      return;
    }
    case Op::BiasNCHW: {
      const Tensor& x = n.inputs[0];
      int N = x.dim(0), C = x.dim(1);
      int64_t hw = int64_t(x.dim(2)) * x.dim(3);
      if (needs(0)) accum_into(out_slot(0), gout);
      if (needs(1)) {
        Tensor ge = Tensor::zeros({N, C});
        double* p = ge.mut();
        for (int64_t nc = 0; nc < int64_t(N) * C; ++nc) {
          const double* gp = g + nc * hw;
          double s = 0.0;
          for (int64_t i = 0; i < hw; ++i) s += gp[i];
          p[nc] = s;
        }
        accum_owned(out_slot(1), std::move(ge));
      }
      return;
    }
    case Op::LstmCell: {
      const Tensor& x = n.inputs[0];
      const Tensor& h = n.inputs[1];
      const Tensor& c = n.inputs[2];
      const Tensor& w_ih = n.inputs[3];
      const Tensor& w_hh = n.inputs[4];
      const Tensor& gates = n.saved[0];
      int nb = x.dim(0), in = x.dim(1), H = h.dim(1);
      // gout = [dh' | dc'], out = [h' | c']
      const double* pg = gates.ptr();
      const double* pc = c.ptr();
      const double* pout = n.out.ptr();
      Tensor dpre = Tensor::zeros({nb, 4 * H});
      Tensor dc_prev = Tensor::zeros({nb, H});
      {
        double* dp = dpre.mut();
        double* dcp = dc_prev.mut();
        for (int r = 0; r < nb; ++r) {
          const double* gr = pg + size_t(r) * 4 * H;
          const double* cr = pc + size_t(r) * H;
          const double* outr = pout + size_t(r) * 2 * H;
          const double* goutr = g + size_t(r) * 2 * H;
          double* dpr = dp + size_t(r) * 4 * H;
          double* dcr = dcp + size_t(r) * H;
          for (int j = 0; j < H; ++j) {
            double gi = gr[j], gf = gr[H + j], gg = gr[2 * H + j], go = gr[3 * H + j];
            double cn = outr[H + j];
            double tc = std::tanh(cn);
            double dh = goutr[j];
            double dcn = goutr[H + j] + dh * go * (1.0 - tc * tc);
            double dgo = dh * tc;
            double dgi = dcn * gg;
            double dgf = dcn * cr[j];
            double dgg = dcn * gi;
            dcr[j] = dcn * gf;
            dpr[j] = dgi * gi * (1.0 - gi);
            dpr[H + j] = dgf * gf * (1.0 - gf);
            dpr[2 * H + j] = dgg * (1.0 - gg * gg);
            dpr[3 * H + j] = dgo * go * (1.0 - go);
          }
        }
      }
      if (needs(0)) {
        Tensor gx = Tensor::zeros(x.shape);
        mm_nt(gx.mut(), dpre.ptr(), w_ih.ptr(), nb, 4 * H, in, false);
        accum_owned(out_slot(0), std::move(gx));
      }
      if (needs(1)) {
        Tensor gh = Tensor::zeros(h.shape);
        mm_nt(gh.mut(), dpre.ptr(), w_hh.ptr(), nb, 4 * H, H, false);
        accum_owned(out_slot(1), std::move(gh));
      }
      if (needs(2)) accum_owned(out_slot(2), std::move(dc_prev));
      if (needs(3)) {
        Tensor gw = Tensor::zeros(w_ih.shape);
        mm_tn(gw.mut(), x.ptr(), dpre.ptr(), in, nb, 4 * H, false);
        accum_owned(out_slot(3), std::move(gw));
      }
      if (needs(4)) {
        Tensor gw = Tensor::zeros(w_hh.shape);
        mm_tn(gw.mut(), h.ptr(), dpre.ptr(), H, nb, 4 * H, false);
        accum_owned(out_slot(4), std::move(gw));
      }
      if (needs(5)) {
        Tensor gb = Tensor::zeros({4 * H});
        double* p = gb.mut();
        const double* dp = dpre.ptr();
        for (int r = 0; r < nb; ++r)
          for (int j = 0; j < 4 * H; ++j) p[j] += dp[size_t(r) * 4 * H + j];
        accum_owned(out_slot(5), std::move(gb));
      }
      return;
    }
    case Op::Custom: {
      std::vector<Tensor> gins(n.inputs.size());
      n.custom->backward(n.inputs, n.out, gout, gins);
      for (size_t i = 0; i < gins.size(); ++i) {
        if (gins[i].defined() && needs(int(i)))
          accum_owned(out_slot(int(i)), std::move(gins[i]));
      }
      return;
    }
  }
}

GradMap Tape::backward(const Tensor& root, const std::vector<Tensor>& stops) {
  if (root.size() != 1) throw ShapeError("backward: root must be scalar");
  Tensor seed = Tensor::full(root.shape, 1.0);
  return backward_seeded(root, seed, stops);
}

GradMap Tape::backward_seeded(const Tensor& root, const Tensor& seed,
                              const std::vector<Tensor>& stops) {
  if (seed.shape != root.shape)
    throw ShapeError("backward_seeded: seed shape must match root");
  std::vector<Tensor> grads(nodes_.size());
  int rid = node_of(root);
  if (rid < 0) return GradMap(this, std::move(grads));

  std::vector<char> stop(nodes_.size(), 0);
  for (const auto& t : stops) {
    int id = node_of(t);
    if (id >= 0) stop[size_t(id)] = 1;
  }
  std::vector<char> reach(nodes_.size(), 0);
  std::vector<int> stack{rid};
  reach[size_t(rid)] = 1;
  while (!stack.empty()) {
    int id = stack.back();
    stack.pop_back();
    if (stop[size_t(id)]) continue;
    for (int j : nodes_[size_t(id)].in)
      if (!reach[size_t(j)]) {
        reach[size_t(j)] = 1;
        stack.push_back(j);
      }
  }

  grads[size_t(rid)] = seed.clone();
  for (int id = rid; id >= 0; --id) {
    if (!reach[size_t(id)] || !grads[size_t(id)].defined()) continue;
    if (stop[size_t(id)]) continue;
    const TapeNode& n = nodes_[size_t(id)];
    if (n.op == Op::Leaf) continue;
    backward_node(n, grads[size_t(id)], grads, nodes_);
    // The cotangent of an interior node is complete once processed; free it
    // unless somebody may still query it (leaves and stop nodes are kept).
    grads[size_t(id)] = Tensor();
  }
  return GradMap(this, std::move(grads));
}

Tensor GradMap::grad(const Tensor& t) const {
  int id = tape_->node_of(t);
  if (id < 0 || !grads_[size_t(id)].defined()) return Tensor::zeros(t.shape);
  return grads_[size_t(id)];
}

bool GradMap::has(const Tensor& t) const {
  int id = tape_->node_of(t);
  return id >= 0 && grads_[size_t(id)].defined();
}

// ---- finite differences ---------------------------------------------------

double finite_difference_check(const std::function<Tensor(const Tensor&)>& f,
                               const Tensor& x, double eps,
                               const std::vector<int64_t>& coords) {
  if (!(eps > 0.0 && eps <= 1e-2))
    throw std::invalid_argument("finite_difference_check: eps must be in (0, 1e-2]");
  Tensor xg = x.clone();
  xg.requires_grad = true;
  Tensor g;
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor y = f(xg);
    if (y.size() != 1) throw ShapeError("finite_difference_check: f must be scalar");
    GradMap gm = tape.backward(y);
    g = gm.grad(xg);
  }
  std::vector<int64_t> idx = coords;
  if (idx.empty()) {
    idx.resize(size_t(x.size()));
    for (int64_t i = 0; i < x.size(); ++i) idx[size_t(i)] = i;
  }
  double worst = 0.0;
  for (int64_t i : idx) {
    Tensor xp = x.clone();
    xp.requires_grad = false;
    xp.mut()[i] += eps;
    Tensor xm = x.clone();
    xm.requires_grad = false;
    xm.mut()[i] -= eps;
    double fp = f(xp).scalar();
    double fm = f(xm).scalar();
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("finite_difference_check: non-finite evaluation");
    double fd = (fp - fm) / (2.0 * eps);
    double ad = g.at(i);
    double err = std::fabs(ad - fd) / std::max(1e-8, std::fabs(ad) + std::fabs(fd));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace fmpl
