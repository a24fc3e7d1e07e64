#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace ebg::ad {

// Dense row-major matrix of doubles. Vectors are [n x 1], scalars [1 x 1].
// A Tensor is detached storage; tape-attached values are addressed via Var.
struct Tensor {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, 0.0) {}
  Tensor(int r, int c, std::vector<double> d);

  static Tensor scalar(double v);
  static Tensor vector(std::span<const double> v);  // n x 1
  static Tensor zeros(int r, int c) { return Tensor(r, c); }
  static Tensor full(int r, int c, double v);

  int size() const { return rows * cols; }
  bool is_scalar() const { return rows == 1 && cols == 1; }
  double& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
  double scalar_value() const;
};

class Tape;

// Lightweight handle to a tape node. Trivially copyable; valid as long as the
// owning tape has not been clear()ed.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
};

// Append-only reverse-mode tape of tensor-valued nodes. Evaluation is eager:
// every op computes its forward value on construction, so values are always
// available for control flow. backward() accumulates gradients; repeated
// backward() calls without zero_grad() accumulate (documented contract).
// Not shareable across threads; detached Tensors are.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // -- leaves ---------------------------------------------------------------
  Var leaf(const Tensor& t);
  Var leaf(double v);
  Var leaf_vector(std::span<const double> v);

  // -- elementwise / linear ops ----------------------------------------------
  // Binary ops accept equal shapes, or a 1x1 scalar on either side.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var div(Var a, Var b);
  // y = k*x + m elementwise (constants, not differentiated)
  Var affine(Var x, double k, double m);
  // y = x / c elementwise (constant)
  Var div_const(Var x, double c);
  // [r x c] + [1 x c], broadcast over rows
  Var add_rowvec(Var m, Var row);
  Var matmul(Var a, Var b);
  Var transpose(Var a);
  Var tanh(Var x);
  Var sigmoid(Var x);  // numerically stable branch split at x = 0
  Var exp(Var x);
  Var log(Var x);
  Var sqrt(Var x);  // derivative taken as 0 at x == 0
  Var abs(Var x);   // derivative taken as 0 at x == 0
  // a^b elementwise; b may be 1x1. Requires a >= 0; at a == 0 the value is 0
  // and partials are taken as 0 (exponents are > 1 in all uses here).
  Var pow(Var a, Var b);
  // Pass-through gradient inside [lo, hi], 0 outside. Use +-inf for one-sided.
  Var clamp(Var x, double lo, double hi);
  Var sum(Var x);   // 1x1
  Var mean(Var x);  // 1x1
  Var concat_rows(Var a, Var b);  // vertical stack, same cols
  Var concat_cols(Var a, Var b);  // horizontal stack, same rows
  Var slice_rows(Var x, int r0, int r1);
  Var slice_cols(Var x, int c0, int c1);
  // Row-wise masked softmax. With causal=true entry (i, j) is masked out when
  // j > i (decoder self-attention); masked entries get weight 0.
  Var softmax_rows(Var x, bool causal);
  // Per-row layer norm with learned gain/bias [1 x c].
  Var layer_norm_rows(Var x, Var gain, Var bias, double eps = 1e-8);

  // -- gradients --------------------------------------------------------------
  // loss must be scalar (1x1); throws DataError otherwise. Gradients of all
  // nodes reachable from loss are accumulated; unreachable nodes keep 0.
  void backward(Var loss);
  void zero_grad();
  // Drops all nodes (capacity retained). Outstanding Vars become invalid.
  void clear();

  // -- access -----------------------------------------------------------------
  int node_count() const { return static_cast<int>(nodes_.size()); }
  // Number of nodes processed by the most recent backward() (each visited once).
  int last_backward_visits() const { return last_visits_; }

  std::span<const double> values(Var v) const;
  int rows(Var v) const;
  int cols(Var v) const;
  double value_scalar(Var v) const;
  Tensor value_tensor(Var v) const;
  std::span<const double> grad(Var v) const;
  Tensor grad_tensor(Var v) const;

 private:
  enum class Op : std::uint8_t {
    kLeaf, kAffine, kDivConst, kAdd, kSub, kMul, kDiv, kAddRowVec, kMatMul,
    kTranspose, kTanh, kSigmoid, kExp, kLog, kSqrt, kAbs, kPow, kClamp,
    kSum, kMean, kConcatRows, kConcatCols, kSliceRows, kSliceCols,
    kSoftmaxRows, kLayerNormRows,
  };

  struct Node {
    Op op;
    std::uint8_t flags = 0;
    int a = -1, b = -1, c = -1;  // parents
    int rows = 0, cols = 0;
    std::size_t off = 0;  // offset into the value/grad arenas
    double p0 = 0.0, p1 = 0.0;
    int i0 = 0, i1 = 0;
  };

  static const char* op_name(Op op);
  const Node& node(Var v) const;
  Var push(Op op, int rows, int cols, int a, int b, int c, double p0, double p1,
           int i0, int i1, std::uint8_t flags);
  double* value_ptr(const Node& n) { return values_.data() + n.off; }
  const double* value_ptr(const Node& n) const { return values_.data() + n.off; }
  double* grad_ptr(const Node& n) { return grads_.data() + n.off; }
  void check_same_tape(Var a, Var b) const;
  void check_finite(const Node& n);
  void eval_forward(Node& n);
  void backprop_node(int id);

  std::vector<Node> nodes_;
  std::vector<double> values_;
  std::vector<double> grads_;
  std::vector<std::uint8_t> reach_;
  bool grads_ready_ = false;
  int last_visits_ = 0;
};

// -- operator sugar so numeric code reads like the math -----------------------
inline Var operator+(Var a, Var b) { return a.tape->add(a, b); }
inline Var operator-(Var a, Var b) { return a.tape->sub(a, b); }
inline Var operator*(Var a, Var b) { return a.tape->mul(a, b); }
inline Var operator/(Var a, Var b) { return a.tape->div(a, b); }
inline Var operator+(Var a, double s) { return a.tape->affine(a, 1.0, s); }
inline Var operator+(double s, Var a) { return a.tape->affine(a, 1.0, s); }
inline Var operator-(Var a, double s) { return a.tape->affine(a, 1.0, -s); }
inline Var operator-(double s, Var a) { return a.tape->affine(a, -1.0, s); }
inline Var operator-(Var a) { return a.tape->affine(a, -1.0, 0.0); }
inline Var operator*(Var a, double s) { return a.tape->affine(a, s, 0.0); }
inline Var operator*(double s, Var a) { return a.tape->affine(a, s, 0.0); }
inline Var operator/(Var a, double s) { return a.tape->div_const(a, s); }
inline Var operator/(double s, Var a) { return a.tape->div(a.tape->leaf(s), a); }

inline Var tanh(Var x) { return x.tape->tanh(x); }
inline Var sigmoid(Var x) { return x.tape->sigmoid(x); }
inline Var exp(Var x) { return x.tape->exp(x); }
inline Var log(Var x) { return x.tape->log(x); }
inline Var sqrt(Var x) { return x.tape->sqrt(x); }
inline Var abs(Var x) { return x.tape->abs(x); }
inline Var pow(Var a, Var b) { return a.tape->pow(a, b); }
inline Var pow(Var a, double b) { return a.tape->pow(a, a.tape->leaf(b)); }
inline Var clamp(Var x, double lo, double hi) { return x.tape->clamp(x, lo, hi); }
inline Var max(Var x, double lo) {
  return x.tape->clamp(x, lo, std::numeric_limits<double>::infinity());
}
inline Var min(Var x, double hi) {
  return x.tape->clamp(x, -std::numeric_limits<double>::infinity(), hi);
}

// Uniform value access for code templated over double / Var.
inline double value_of(double v) { return v; }
inline double value_of(Var v) { return v.tape->value_scalar(v); }

// -- gradient checking ---------------------------------------------------------
struct GradCheckReport {
  double max_rel_err = 0.0;
  int worst_tensor = -1;
  int worst_index = -1;
  int coords_checked = 0;
  bool pass = false;
};

using TapeFn = std::function<Var(Tape&, const std::vector<Var>&)>;

// Compares backward() gradients of the scalar function f against central
// finite differences, coordinate by coordinate. Relative error uses a
// max(1, |analytic|) denominator. Requires h in (0, 1e-2).
GradCheckReport grad_check(const TapeFn& f, const std::vector<Tensor>& point,
                           double h, double tol);

// -- detached kernels ------------------------------------------------------------
// Same kernels the tape runs; exposed so tests can assert bit-for-bit parity
// between attached and detached evaluation.
namespace detached {
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
}  // namespace detached

}  // namespace ebg::ad
