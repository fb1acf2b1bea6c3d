#pragma once

#include <array>
#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include "core/tensor.hpp"

namespace fmpl {

class Tape;

enum class Op : uint8_t {
  Leaf,
  Add, Sub, Mul, Div,
  AddS, MulS, RsubS,          // t+s, t*s, s-t
  Matmul, Transpose2d, Reshape, Concat, Slice, BroadcastLead,
  SumAll, MeanAll,
  Abs, Sqrt, Exp, Log, Sigmoid, Tanh, Silu, Softplus, Relu,
  Conv2d, Upsample2x, BiasNCHW,
  LstmCell,
  Custom,
};

// Hook for ops with hand-written adjoints that live outside core (the dose
// deposition operator registers through this).
struct CustomOp {
  virtual ~CustomOp() = default;
  virtual const char* name() const = 0;
  // gout: cotangent of the node output. Fill grads_in (same arity/shapes as
  // the forward inputs); leave a slot undefined to signal "no gradient".
  virtual void backward(const std::vector<Tensor>& inputs, const Tensor& out,
                        const Tensor& gout, std::vector<Tensor>& grads_in) const = 0;
};

struct TapeNode {
  Op op = Op::Leaf;
  std::vector<int> in;        // input node ids (parallel to `inputs`)
  std::vector<Tensor> inputs; // saved input tensors
  Tensor out;                 // saved output (activation)
  std::vector<Tensor> saved;  // op-specific extra activations (LSTM gates, ...)
  double s0 = 0.0;
  int i0 = 0, i1 = 0, i2 = 0; // axis / start / stop / stride as needed
  std::shared_ptr<const CustomOp> custom;
};

// Result of a backward pass: per-node cotangents, addressable by tensor.
class GradMap {
 public:
  GradMap(const Tape* tape, std::vector<Tensor> grads)
      : tape_(tape), grads_(std::move(grads)) {}

  // Gradient of the root w.r.t. `t`. Zero tensor if t never influenced the
  // root (disconnected leaves are not an error).
  Tensor grad(const Tensor& t) const;
  bool has(const Tensor& t) const;

 private:
  const Tape* tape_;
  std::vector<Tensor> grads_;
};

// Reverse-mode tape. Single writer; one tape per thread may record at a
// time (ops look up the thread-local active tape). Distinct tapes may be
// used from distinct threads concurrently.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current();

  size_t num_nodes() const { return nodes_.size(); }

  // Node id of a tensor in this tape, or -1.
  int node_of(const Tensor& t) const;

  // Reverse accumulation from a scalar root. `stops`: node cotangents are
  // accumulated but not propagated past these tensors (used to cut the
  // optimizee gradient out of the meta-graph).
  GradMap backward(const Tensor& root, const std::vector<Tensor>& stops = {});

  // Same, seeding a non-scalar root with an explicit cotangent.
  GradMap backward_seeded(const Tensor& root, const Tensor& seed,
                          const std::vector<Tensor>& stops = {});

  friend class TapeScope;
  friend Tensor record(Op, std::vector<Tensor>, Tensor, double, int, int, int,
                       std::vector<Tensor>, std::shared_ptr<const CustomOp>);

 private:
  int intern(const Tensor& t);  // ensure t has a node (leaf if new)

  std::vector<TapeNode> nodes_;
  std::unordered_map<const void*, int> ids_;  // data block -> node id
};

class TapeScope {
 public:
  explicit TapeScope(Tape& t);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

// ---- ops -------------------------------------------------------------
// All ops validate shapes, compute eagerly, check the result for NaN/Inf
// and record onto the active tape when any input requires grad.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor rsub_scalar(double s, const Tensor& a);  // s - a

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose2d(const Tensor& a);
Tensor reshape(const Tensor& a, std::vector<int> shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, int start, int stop);
// t of shape S -> [n_lead, S...]; the leading-dimension broadcast rule.
Tensor broadcast_lead(const Tensor& a, int n_lead);

Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

Tensor abs_t(const Tensor& a);   // d|x|/dx at 0 defined as 0
Tensor sqrt_t(const Tensor& a);  // d sqrt/dx at 0 defined as 0
Tensor exp_t(const Tensor& a);
Tensor log_t(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh_t(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor relu(const Tensor& a);

// x [N,C,H,W], w [K,C,3,3], b [K]; zero padding 1, stride 1 or 2.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride);
Tensor upsample2x(const Tensor& x);                 // nearest, NCHW
Tensor bias_nchw(const Tensor& x, const Tensor& e); // e [N,C] added per channel

// x [n,in], h [n,H], c [n,H], w_ih [in,4H], w_hh [H,4H], b [4H].
// Gate order i,f,g,o. Returns [n,2H] = concat(h', c') along axis 1.
Tensor lstm_cell(const Tensor& x, const Tensor& h, const Tensor& c,
                 const Tensor& w_ih, const Tensor& w_hh, const Tensor& b);

Tensor apply_custom(std::shared_ptr<const CustomOp> op, std::vector<Tensor> inputs,
                    Tensor out);

// ---- finite differences ----------------------------------------------
// Max over checked coordinates of |g_ad - g_fd| / max(1e-8, |g_ad|+|g_fd|).
// `coords` empty = all coordinates. f must build its graph on the active
// tape provided by the checker.
double finite_difference_check(const std::function<Tensor(const Tensor&)>& f,
                               const Tensor& x, double eps,
                               const std::vector<int64_t>& coords = {});

}  // namespace fmpl
