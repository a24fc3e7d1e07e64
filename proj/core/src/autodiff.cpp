#include "editfollower/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "editfollower/errors.hpp"

namespace ebg::ad {

namespace {

std::string shape_str(int r, int c) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "[%dx%d]", r, c);
  return buf;
}

double stable_sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// C[m x n] += or = A[m x k] * B[k x n], row-major, ikj order.
void gemm(const double* a, const double* b, double* c, int m, int k, int n,
          bool accumulate) {
  if (!accumulate) std::fill(c, c + static_cast<std::size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<std::size_t>(i) * k;
    double* crow = c + static_cast<std::size_t>(i) * n;
    for (int l = 0; l < k; ++l) {
      const double av = arow[l];
      if (av == 0.0) continue;
      const double* brow = b + static_cast<std::size_t>(l) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(int r, int c, std::vector<double> d) : rows(r), cols(c), data(std::move(d)) {
  if (static_cast<std::size_t>(r) * c != data.size()) {
    throw DataError("tensor init: " + shape_str(r, c) + " does not match data length " +
                    std::to_string(data.size()));
  }
}

Tensor Tensor::scalar(double v) {
  Tensor t(1, 1);
  t.data[0] = v;
  return t;
}

Tensor Tensor::vector(std::span<const double> v) {
  Tensor t(static_cast<int>(v.size()), 1);
  std::copy(v.begin(), v.end(), t.data.begin());
  return t;
}

Tensor Tensor::full(int r, int c, double v) {
  Tensor t(r, c);
  std::fill(t.data.begin(), t.data.end(), v);
  return t;
}

double Tensor::scalar_value() const {
  if (!is_scalar()) throw DataError("scalar_value on non-scalar tensor " + shape_str(rows, cols));
  return data[0];
}

// ---------------------------------------------------------------------------
// Tape plumbing

const char* Tape::op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kAffine: return "affine";
    case Op::kDivConst: return "div_const";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kDiv: return "div";
    case Op::kAddRowVec: return "add_rowvec";
    case Op::kMatMul: return "matmul";
    case Op::kTranspose: return "transpose";
    case Op::kTanh: return "tanh";
    case Op::kSigmoid: return "sigmoid";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kSqrt: return "sqrt";
    case Op::kAbs: return "abs";
    case Op::kPow: return "pow";
    case Op::kClamp: return "clamp";
    case Op::kSum: return "sum";
    case Op::kMean: return "mean";
    case Op::kConcatRows: return "concat_rows";
    case Op::kConcatCols: return "concat_cols";
    case Op::kSliceRows: return "slice_rows";
    case Op::kSliceCols: return "slice_cols";
    case Op::kSoftmaxRows: return "softmax_rows";
    case Op::kLayerNormRows: return "layer_norm_rows";
  }
  return "?";
}

const Tape::Node& Tape::node(Var v) const {
  if (v.tape != this || v.id < 0 || v.id >= static_cast<int>(nodes_.size())) {
    throw DataError("Var does not belong to this tape (or tape was cleared)");
  }
  return nodes_[static_cast<std::size_t>(v.id)];
}

void Tape::check_same_tape(Var a, Var b) const {
  if (a.tape != this || b.tape != this) throw DataError("operands live on different tapes");
}

Var Tape::push(Op op, int rows, int cols, int a, int b, int c, double p0, double p1,
               int i0, int i1, std::uint8_t flags) {
  Node n;
  n.op = op;
  n.flags = flags;
  n.a = a;
  n.b = b;
  n.c = c;
  n.rows = rows;
  n.cols = cols;
  n.p0 = p0;
  n.p1 = p1;
  n.i0 = i0;
  n.i1 = i1;
  n.off = values_.size();
  values_.resize(values_.size() + static_cast<std::size_t>(rows) * cols);
  nodes_.push_back(n);
  eval_forward(nodes_.back());
  check_finite(nodes_.back());
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

void Tape::check_finite(const Node& n) {
  const double* v = value_ptr(n);
  const int len = n.rows * n.cols;
  for (int i = 0; i < len; ++i) {
    if (!std::isfinite(v[i])) {
      throw NumericError(std::string("non-finite value produced by op '") + op_name(n.op) +
                         "' (node " + std::to_string(nodes_.size() - 1) + ")");
    }
  }
}

// ---------------------------------------------------------------------------
// Leaves

Var Tape::leaf(const Tensor& t) {
  if (t.rows <= 0 || t.cols <= 0) throw DataError("leaf: empty tensor");
  const Var v = push(Op::kLeaf, t.rows, t.cols, -1, -1, -1, 0, 0, 0, 0, 0);
  std::copy(t.data.begin(), t.data.end(), value_ptr(nodes_.back()));
  check_finite(nodes_.back());
  return v;
}

Var Tape::leaf(double v) { return leaf(Tensor::scalar(v)); }

Var Tape::leaf_vector(std::span<const double> v) { return leaf(Tensor::vector(v)); }

// ---------------------------------------------------------------------------
// Op builders

namespace {
// Broadcast mode for elementwise binary ops.
enum class BinMode { kEqual, kScalarB, kScalarA };
}  // namespace

static BinMode resolve_bin(int ra, int ca, int rb, int cb, const char* op) {
  if (ra == rb && ca == cb) return BinMode::kEqual;
  if (rb == 1 && cb == 1) return BinMode::kScalarB;
  if (ra == 1 && ca == 1) return BinMode::kScalarA;
  throw DataError(std::string("op ") + op + ": shape mismatch " + shape_str(ra, ca) + " vs " +
                  shape_str(rb, cb));
}

Var Tape::add(Var a, Var b) {
  check_same_tape(a, b);
  const Node& na = node(a);
  const Node& nb = node(b);
  const BinMode m = resolve_bin(na.rows, na.cols, nb.rows, nb.cols, "add");
  const int r = (m == BinMode::kScalarA) ? nb.rows : na.rows;
  const int c = (m == BinMode::kScalarA) ? nb.cols : na.cols;
  return push(Op::kAdd, r, c, a.id, b.id, -1, 0, 0, 0, 0, 0);
}

Var Tape::sub(Var a, Var b) {
  check_same_tape(a, b);
  const Node& na = node(a);
  const Node& nb = node(b);
  const BinMode m = resolve_bin(na.rows, na.cols, nb.rows, nb.cols, "sub");
  const int r = (m == BinMode::kScalarA) ? nb.rows : na.rows;
  const int c = (m == BinMode::kScalarA) ? nb.cols : na.cols;
  return push(Op::kSub, r, c, a.id, b.id, -1, 0, 0, 0, 0, 0);
}

Var Tape::mul(Var a, Var b) {
  check_same_tape(a, b);
  const Node& na = node(a);
  const Node& nb = node(b);
  const BinMode m = resolve_bin(na.rows, na.cols, nb.rows, nb.cols, "mul");
  const int r = (m == BinMode::kScalarA) ? nb.rows : na.rows;
  const int c = (m == BinMode::kScalarA) ? nb.cols : na.cols;
  return push(Op::kMul, r, c, a.id, b.id, -1, 0, 0, 0, 0, 0);
}

Var Tape::div(Var a, Var b) {
  check_same_tape(a, b);
  const Node& na = node(a);
  const Node& nb = node(b);
  const BinMode m = resolve_bin(na.rows, na.cols, nb.rows, nb.cols, "div");
  const int r = (m == BinMode::kScalarA) ? nb.rows : na.rows;
  const int c = (m == BinMode::kScalarA) ? nb.cols : na.cols;
  const double* bv = value_ptr(nb);
  for (int i = 0; i < nb.rows * nb.cols; ++i) {
    if (bv[i] == 0.0) throw NumericError("op div: division by zero");
  }
  return push(Op::kDiv, r, c, a.id, b.id, -1, 0, 0, 0, 0, 0);
}

Var Tape::affine(Var x, double k, double m) {
  const Node& nx = node(x);
  return push(Op::kAffine, nx.rows, nx.cols, x.id, -1, -1, k, m, 0, 0, 0);
}

Var Tape::div_const(Var x, double c) {
  if (c == 0.0) throw NumericError("op div_const: division by zero");
  const Node& nx = node(x);
  return push(Op::kDivConst, nx.rows, nx.cols, x.id, -1, -1, c, 0, 0, 0, 0);
}

Var Tape::add_rowvec(Var m, Var row) {
  check_same_tape(m, row);
  const Node& nm = node(m);
  const Node& nr = node(row);
  if (nr.rows != 1 || nr.cols != nm.cols) {
    throw DataError("op add_rowvec: shape mismatch " + shape_str(nm.rows, nm.cols) + " vs " +
                    shape_str(nr.rows, nr.cols));
  }
  return push(Op::kAddRowVec, nm.rows, nm.cols, m.id, row.id, -1, 0, 0, 0, 0, 0);
}

Var Tape::matmul(Var a, Var b) {
  check_same_tape(a, b);
  const Node& na = node(a);
  const Node& nb = node(b);
  if (na.cols != nb.rows) {
    throw DataError("op matmul: shape mismatch " + shape_str(na.rows, na.cols) + " vs " +
                    shape_str(nb.rows, nb.cols));
  }
  return push(Op::kMatMul, na.rows, nb.cols, a.id, b.id, -1, 0, 0, 0, 0, 0);
}

Var Tape::transpose(Var a) {
  const Node& na = node(a);
  return push(Op::kTranspose, na.cols, na.rows, a.id, -1, -1, 0, 0, 0, 0, 0);
}

Var Tape::tanh(Var x) {
  const Node& nx = node(x);
  return push(Op::kTanh, nx.rows, nx.cols, x.id, -1, -1, 0, 0, 0, 0, 0);
}

Var Tape::sigmoid(Var x) {
  const Node& nx = node(x);
  return push(Op::kSigmoid, nx.rows, nx.cols, x.id, -1, -1, 0, 0, 0, 0, 0);
}

Var Tape::exp(Var x) {
  const Node& nx = node(x);
  return push(Op::kExp, nx.rows, nx.cols, x.id, -1, -1, 0, 0, 0, 0, 0);
}

Var Tape::log(Var x) {
  const Node& nx = node(x);
  const double* v = value_ptr(nx);
  for (int i = 0; i < nx.rows * nx.cols; ++i) {
    if (v[i] <= 0.0) throw NumericError("op log: non-positive argument");
  }
  return push(Op::kLog, nx.rows, nx.cols, x.id, -1, -1, 0, 0, 0, 0, 0);
}

Var Tape::sqrt(Var x) {
  const Node& nx = node(x);
  const double* v = value_ptr(nx);
  for (int i = 0; i < nx.rows * nx.cols; ++i) {
    if (v[i] < 0.0) throw NumericError("op sqrt: negative argument");
  }
  return push(Op::kSqrt, nx.rows, nx.cols, x.id, -1, -1, 0, 0, 0, 0, 0);
}

Var Tape::abs(Var x) {
  const Node& nx = node(x);
  return push(Op::kAbs, nx.rows, nx.cols, x.id, -1, -1, 0, 0, 0, 0, 0);
}

Var Tape::pow(Var a, Var b) {
  check_same_tape(a, b);
  const Node& na = node(a);
  const Node& nb = node(b);
  if (!(nb.rows == 1 && nb.cols == 1) && (na.rows != nb.rows || na.cols != nb.cols)) {
    throw DataError("op pow: shape mismatch " + shape_str(na.rows, na.cols) + " vs " +
                    shape_str(nb.rows, nb.cols));
  }
  const double* av = value_ptr(na);
  for (int i = 0; i < na.rows * na.cols; ++i) {
    if (av[i] < 0.0) throw NumericError("op pow: negative base");
  }
  return push(Op::kPow, na.rows, na.cols, a.id, b.id, -1, 0, 0, 0, 0, 0);
}

Var Tape::clamp(Var x, double lo, double hi) {
  if (!(lo <= hi)) throw DataError("op clamp: lo > hi");
  const Node& nx = node(x);
  return push(Op::kClamp, nx.rows, nx.cols, x.id, -1, -1, lo, hi, 0, 0, 0);
}

Var Tape::sum(Var x) {
  return push(Op::kSum, 1, 1, x.id, -1, -1, 0, 0, 0, 0, 0);
}

Var Tape::mean(Var x) {
  return push(Op::kMean, 1, 1, x.id, -1, -1, 0, 0, 0, 0, 0);
}

Var Tape::concat_rows(Var a, Var b) {
  check_same_tape(a, b);
  const Node& na = node(a);
  const Node& nb = node(b);
  if (na.cols != nb.cols) {
    throw DataError("op concat_rows: shape mismatch " + shape_str(na.rows, na.cols) + " vs " +
                    shape_str(nb.rows, nb.cols));
  }
  return push(Op::kConcatRows, na.rows + nb.rows, na.cols, a.id, b.id, -1, 0, 0, 0, 0, 0);
}

Var Tape::concat_cols(Var a, Var b) {
  check_same_tape(a, b);
  const Node& na = node(a);
  const Node& nb = node(b);
  if (na.rows != nb.rows) {
    throw DataError("op concat_cols: shape mismatch " + shape_str(na.rows, na.cols) + " vs " +
                    shape_str(nb.rows, nb.cols));
  }
  return push(Op::kConcatCols, na.rows, na.cols + nb.cols, a.id, b.id, -1, 0, 0, 0, 0, 0);
}

Var Tape::slice_rows(Var x, int r0, int r1) {
  const Node& nx = node(x);
  if (r0 < 0 || r1 > nx.rows || r0 >= r1) {
    throw DataError("op slice_rows: range [" + std::to_string(r0) + "," + std::to_string(r1) +
                    ") out of " + shape_str(nx.rows, nx.cols));
  }
  return push(Op::kSliceRows, r1 - r0, nx.cols, x.id, -1, -1, 0, 0, r0, r1, 0);
}

Var Tape::slice_cols(Var x, int c0, int c1) {
  const Node& nx = node(x);
  if (c0 < 0 || c1 > nx.cols || c0 >= c1) {
    throw DataError("op slice_cols: range [" + std::to_string(c0) + "," + std::to_string(c1) +
                    ") out of " + shape_str(nx.rows, nx.cols));
  }
  return push(Op::kSliceCols, nx.rows, c1 - c0, x.id, -1, -1, 0, 0, c0, c1, 0);
}

Var Tape::softmax_rows(Var x, bool causal) {
  const Node& nx = node(x);
  if (causal && nx.rows != nx.cols) {
    throw DataError("op softmax_rows: causal mask requires square scores, got " +
                    shape_str(nx.rows, nx.cols));
  }
  return push(Op::kSoftmaxRows, nx.rows, nx.cols, x.id, -1, -1, 0, 0, 0, 0,
              causal ? std::uint8_t{1} : std::uint8_t{0});
}

Var Tape::layer_norm_rows(Var x, Var gain, Var bias, double eps) {
  check_same_tape(x, gain);
  check_same_tape(x, bias);
  const Node& nx = node(x);
  const Node& ng = node(gain);
  const Node& nb = node(bias);
  if (ng.rows != 1 || ng.cols != nx.cols || nb.rows != 1 || nb.cols != nx.cols) {
    throw DataError("op layer_norm_rows: gain/bias must be [1x" + std::to_string(nx.cols) + "]");
  }
  return push(Op::kLayerNormRows, nx.rows, nx.cols, x.id, gain.id, bias.id, eps, 0, 0, 0, 0);
}

// ---------------------------------------------------------------------------
// Forward evaluation

void Tape::eval_forward(Node& n) {
  double* out = value_ptr(n);
  const int len = n.rows * n.cols;
  switch (n.op) {
    case Op::kLeaf:
      break;  // filled by leaf()
    case Op::kAffine: {
      const Node& a = nodes_[n.a];
      const double* x = value_ptr(a);
      for (int i = 0; i < len; ++i) out[i] = n.p0 * x[i] + n.p1;
      break;
    }
    case Op::kDivConst: {
      const Node& a = nodes_[n.a];
      const double* x = value_ptr(a);
      for (int i = 0; i < len; ++i) out[i] = x[i] / n.p0;
      break;
    }
    case Op::kAdd:
    case Op::kSub:
    case Op::kMul:
    case Op::kDiv: {
      const Node& a = nodes_[n.a];
      const Node& b = nodes_[n.b];
      const double* av = value_ptr(a);
      const double* bv = value_ptr(b);
      const bool sa = (a.rows == 1 && a.cols == 1) && len > 1;
      const bool sb = (b.rows == 1 && b.cols == 1) && len > 1;
      for (int i = 0; i < len; ++i) {
        const double x = sa ? av[0] : av[i];
        const double y = sb ? bv[0] : bv[i];
        switch (n.op) {
          case Op::kAdd: out[i] = x + y; break;
          case Op::kSub: out[i] = x - y; break;
          case Op::kMul: out[i] = x * y; break;
          default: out[i] = x / y; break;
        }
      }
      break;
    }
    case Op::kAddRowVec: {
      const Node& a = nodes_[n.a];
      const Node& b = nodes_[n.b];
      const double* av = value_ptr(a);
      const double* bv = value_ptr(b);
      for (int i = 0; i < n.rows; ++i) {
        for (int j = 0; j < n.cols; ++j) {
          out[static_cast<std::size_t>(i) * n.cols + j] =
              av[static_cast<std::size_t>(i) * n.cols + j] + bv[j];
        }
      }
      break;
    }
    case Op::kMatMul: {
      const Node& a = nodes_[n.a];
      const Node& b = nodes_[n.b];
      gemm(value_ptr(a), value_ptr(b), out, a.rows, a.cols, b.cols, false);
      break;
    }
    case Op::kTranspose: {
      const Node& a = nodes_[n.a];
      const double* x = value_ptr(a);
      for (int i = 0; i < a.rows; ++i) {
        for (int j = 0; j < a.cols; ++j) {
          out[static_cast<std::size_t>(j) * n.cols + i] = x[static_cast<std::size_t>(i) * a.cols + j];
        }
      }
      break;
    }
    case Op::kTanh: {
      const double* x = value_ptr(nodes_[n.a]);
      for (int i = 0; i < len; ++i) out[i] = std::tanh(x[i]);
      break;
    }
    case Op::kSigmoid: {
      const double* x = value_ptr(nodes_[n.a]);
      for (int i = 0; i < len; ++i) out[i] = stable_sigmoid(x[i]);
      break;
    }
    case Op::kExp: {
      const double* x = value_ptr(nodes_[n.a]);
      for (int i = 0; i < len; ++i) out[i] = std::exp(x[i]);
      break;
    }
    case Op::kLog: {
      const double* x = value_ptr(nodes_[n.a]);
      for (int i = 0; i < len; ++i) out[i] = std::log(x[i]);
      break;
    }
    case Op::kSqrt: {
      const double* x = value_ptr(nodes_[n.a]);
      for (int i = 0; i < len; ++i) out[i] = std::sqrt(x[i]);
      break;
    }
    case Op::kAbs: {
      const double* x = value_ptr(nodes_[n.a]);
      for (int i = 0; i < len; ++i) out[i] = std::fabs(x[i]);
      break;
    }
    case Op::kPow: {
      const Node& a = nodes_[n.a];
      const Node& b = nodes_[n.b];
      const double* av = value_ptr(a);
      const double* bv = value_ptr(b);
      const bool sb = (b.rows == 1 && b.cols == 1);
      for (int i = 0; i < len; ++i) {
        const double base = av[i];
        const double e = sb ? bv[0] : bv[i];
        out[i] = (base == 0.0) ? 0.0 : std::pow(base, e);
      }
      break;
    }
    case Op::kClamp: {
      const double* x = value_ptr(nodes_[n.a]);
      for (int i = 0; i < len; ++i) out[i] = std::min(std::max(x[i], n.p0), n.p1);
      break;
    }
    case Op::kSum:
    case Op::kMean: {
      const Node& a = nodes_[n.a];
      const double* x = value_ptr(a);
      const int alen = a.rows * a.cols;
      double acc = 0.0;
      for (int i = 0; i < alen; ++i) acc += x[i];
      out[0] = (n.op == Op::kMean) ? acc / static_cast<double>(alen) : acc;
      break;
    }
    case Op::kConcatRows: {
      const Node& a = nodes_[n.a];
      const Node& b = nodes_[n.b];
      const double* av = value_ptr(a);
      const double* bv = value_ptr(b);
      std::copy(av, av + a.rows * a.cols, out);
      std::copy(bv, bv + b.rows * b.cols, out + a.rows * a.cols);
      break;
    }
    case Op::kConcatCols: {
      const Node& a = nodes_[n.a];
      const Node& b = nodes_[n.b];
      const double* av = value_ptr(a);
      const double* bv = value_ptr(b);
      for (int i = 0; i < n.rows; ++i) {
        std::copy(av + static_cast<std::size_t>(i) * a.cols, av + static_cast<std::size_t>(i + 1) * a.cols,
                  out + static_cast<std::size_t>(i) * n.cols);
        std::copy(bv + static_cast<std::size_t>(i) * b.cols, bv + static_cast<std::size_t>(i + 1) * b.cols,
                  out + static_cast<std::size_t>(i) * n.cols + a.cols);
      }
      break;
    }
    case Op::kSliceRows: {
      const Node& a = nodes_[n.a];
      const double* x = value_ptr(a);
      std::copy(x + static_cast<std::size_t>(n.i0) * a.cols, x + static_cast<std::size_t>(n.i1) * a.cols, out);
      break;
    }
    case Op::kSliceCols: {
      const Node& a = nodes_[n.a];
      const double* x = value_ptr(a);
      for (int i = 0; i < n.rows; ++i) {
        std::copy(x + static_cast<std::size_t>(i) * a.cols + n.i0,
                  x + static_cast<std::size_t>(i) * a.cols + n.i1,
                  out + static_cast<std::size_t>(i) * n.cols);
      }
      break;
    }
    case Op::kSoftmaxRows: {
      const Node& a = nodes_[n.a];
      const double* x = value_ptr(a);
      const bool causal = (n.flags & 1) != 0;
      for (int i = 0; i < n.rows; ++i) {
        const double* xr = x + static_cast<std::size_t>(i) * n.cols;
        double* yr = out + static_cast<std::size_t>(i) * n.cols;
        const int valid = causal ? (i + 1) : n.cols;
        double mx = xr[0];
        for (int j = 1; j < valid; ++j) mx = std::max(mx, xr[j]);
        double denom = 0.0;
        for (int j = 0; j < valid; ++j) {
          yr[j] = std::exp(xr[j] - mx);
          denom += yr[j];
        }
        for (int j = 0; j < valid; ++j) yr[j] /= denom;
        for (int j = valid; j < n.cols; ++j) yr[j] = 0.0;
      }
      break;
    }
    case Op::kLayerNormRows: {
      const Node& a = nodes_[n.a];
      const Node& g = nodes_[n.b];
      const Node& b = nodes_[n.c];
      const double* x = value_ptr(a);
      const double* gv = value_ptr(g);
      const double* bv = value_ptr(b);
      for (int i = 0; i < n.rows; ++i) {
        const double* xr = x + static_cast<std::size_t>(i) * n.cols;
        double* yr = out + static_cast<std::size_t>(i) * n.cols;
        double mu = 0.0;
        for (int j = 0; j < n.cols; ++j) mu += xr[j];
        mu /= n.cols;
        double var = 0.0;
        for (int j = 0; j < n.cols; ++j) {
          const double d = xr[j] - mu;
          var += d * d;
        }
        var /= n.cols;
        const double istd = 1.0 / std::sqrt(var + n.p0);
        for (int j = 0; j < n.cols; ++j) yr[j] = gv[j] * ((xr[j] - mu) * istd) + bv[j];
      }
      break;
    }
  }
}

// ---------------------------------------------------------------------------
// Backward

void Tape::backward(Var loss) {
  const Node& ln = node(loss);
  if (ln.rows != 1 || ln.cols != 1) {
    throw DataError("backward: loss must be scalar, got " + shape_str(ln.rows, ln.cols));
  }
  grads_.resize(values_.size(), 0.0);
  grads_ready_ = true;

  // Reachability pass: only nodes feeding the loss are visited.
  reach_.assign(static_cast<std::size_t>(loss.id) + 1, 0);
  reach_[static_cast<std::size_t>(loss.id)] = 1;
  for (int id = loss.id; id >= 0; --id) {
    if (!reach_[static_cast<std::size_t>(id)]) continue;
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.a >= 0) reach_[static_cast<std::size_t>(n.a)] = 1;
    if (n.b >= 0) reach_[static_cast<std::size_t>(n.b)] = 1;
    if (n.c >= 0) reach_[static_cast<std::size_t>(n.c)] = 1;
  }

  grads_[node(loss).off] += 1.0;
  last_visits_ = 0;
  for (int id = loss.id; id >= 0; --id) {
    if (!reach_[static_cast<std::size_t>(id)]) continue;
    backprop_node(id);
    ++last_visits_;
  }
}

void Tape::backprop_node(int id) {
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.op == Op::kLeaf) return;
  const double* dy = grads_.data() + n.off;
  const double* y = value_ptr(n);
  const int len = n.rows * n.cols;

  switch (n.op) {
    case Op::kLeaf:
      break;
    case Op::kAffine: {
      double* dx = grad_ptr(nodes_[n.a]);
      for (int i = 0; i < len; ++i) dx[i] += n.p0 * dy[i];
      break;
    }
    case Op::kDivConst: {
      double* dx = grad_ptr(nodes_[n.a]);
      for (int i = 0; i < len; ++i) dx[i] += dy[i] / n.p0;
      break;
    }
    case Op::kAdd:
    case Op::kSub:
    case Op::kMul:
    case Op::kDiv: {
      const Node& a = nodes_[n.a];
      const Node& b = nodes_[n.b];
      const double* av = value_ptr(a);
      const double* bv = value_ptr(b);
      double* da = grad_ptr(a);
      double* db = grad_ptr(b);
      const bool sa = (a.rows == 1 && a.cols == 1) && len > 1;
      const bool sb = (b.rows == 1 && b.cols == 1) && len > 1;
      for (int i = 0; i < len; ++i) {
        const double x = sa ? av[0] : av[i];
        const double z = sb ? bv[0] : bv[i];
        double ga = 0.0, gb = 0.0;
        switch (n.op) {
          case Op::kAdd: ga = dy[i]; gb = dy[i]; break;
          case Op::kSub: ga = dy[i]; gb = -dy[i]; break;
          case Op::kMul: ga = dy[i] * z; gb = dy[i] * x; break;
          default:  // div: y = x / z
            ga = dy[i] / z;
            gb = -dy[i] * x / (z * z);
            break;
        }
        da[sa ? 0 : i] += ga;
        db[sb ? 0 : i] += gb;
      }
      break;
    }
    case Op::kAddRowVec: {
      double* da = grad_ptr(nodes_[n.a]);
      double* db = grad_ptr(nodes_[n.b]);
      for (int i = 0; i < n.rows; ++i) {
        for (int j = 0; j < n.cols; ++j) {
          const double g = dy[static_cast<std::size_t>(i) * n.cols + j];
          da[static_cast<std::size_t>(i) * n.cols + j] += g;
          db[j] += g;
        }
      }
      break;
    }
    case Op::kMatMul: {
      const Node& a = nodes_[n.a];
      const Node& b = nodes_[n.b];
      const double* av = value_ptr(a);
      const double* bv = value_ptr(b);
      double* da = grad_ptr(a);
      double* db = grad_ptr(b);
      // dA += dY * B^T
      for (int i = 0; i < a.rows; ++i) {
        const double* dyr = dy + static_cast<std::size_t>(i) * n.cols;
        double* dar = da + static_cast<std::size_t>(i) * a.cols;
        for (int l = 0; l < a.cols; ++l) {
          const double* brow = bv + static_cast<std::size_t>(l) * b.cols;
          double acc = 0.0;
          for (int j = 0; j < n.cols; ++j) acc += dyr[j] * brow[j];
          dar[l] += acc;
        }
      }
      // dB += A^T * dY
      for (int i = 0; i < a.rows; ++i) {
        const double* arow = av + static_cast<std::size_t>(i) * a.cols;
        const double* dyr = dy + static_cast<std::size_t>(i) * n.cols;
        for (int l = 0; l < a.cols; ++l) {
          const double x = arow[l];
          if (x == 0.0) continue;
          double* dbr = db + static_cast<std::size_t>(l) * b.cols;
          for (int j = 0; j < n.cols; ++j) dbr[j] += x * dyr[j];
        }
      }
      break;
    }
    case Op::kTranspose: {
      const Node& a = nodes_[n.a];
      double* dx = grad_ptr(a);
      for (int i = 0; i < a.rows; ++i) {
        for (int j = 0; j < a.cols; ++j) {
          dx[static_cast<std::size_t>(i) * a.cols + j] += dy[static_cast<std::size_t>(j) * n.cols + i];
        }
      }
      break;
    }
    case Op::kTanh: {
      double* dx = grad_ptr(nodes_[n.a]);
      for (int i = 0; i < len; ++i) dx[i] += dy[i] * (1.0 - y[i] * y[i]);
      break;
    }
    case Op::kSigmoid: {
      double* dx = grad_ptr(nodes_[n.a]);
      for (int i = 0; i < len; ++i) dx[i] += dy[i] * y[i] * (1.0 - y[i]);
      break;
    }
    case Op::kExp: {
      double* dx = grad_ptr(nodes_[n.a]);
      for (int i = 0; i < len; ++i) dx[i] += dy[i] * y[i];
      break;
    }
    case Op::kLog: {
      const double* x = value_ptr(nodes_[n.a]);
      double* dx = grad_ptr(nodes_[n.a]);
      for (int i = 0; i < len; ++i) dx[i] += dy[i] / x[i];
      break;
    }
    case Op::kSqrt: {
      double* dx = grad_ptr(nodes_[n.a]);
      for (int i = 0; i < len; ++i) {
        if (y[i] != 0.0) dx[i] += dy[i] / (2.0 * y[i]);
      }
      break;
    }
    case Op::kAbs: {
      const double* x = value_ptr(nodes_[n.a]);
      double* dx = grad_ptr(nodes_[n.a]);
      for (int i = 0; i < len; ++i) {
        if (x[i] > 0.0) dx[i] += dy[i];
        else if (x[i] < 0.0) dx[i] -= dy[i];
      }
      break;
    }
    case Op::kPow: {
      const Node& a = nodes_[n.a];
      const Node& b = nodes_[n.b];
      const double* av = value_ptr(a);
      const double* bv = value_ptr(b);
      double* da = grad_ptr(a);
      double* db = grad_ptr(b);
      const bool sb = (b.rows == 1 && b.cols == 1);
      for (int i = 0; i < len; ++i) {
        const double base = av[i];
        if (base == 0.0) continue;  // value and partials defined as 0
        const double e = sb ? bv[0] : bv[i];
        da[i] += dy[i] * e * std::pow(base, e - 1.0);
        db[sb ? 0 : i] += dy[i] * y[i] * std::log(base);
      }
      break;
    }
    case Op::kClamp: {
      const double* x = value_ptr(nodes_[n.a]);
      double* dx = grad_ptr(nodes_[n.a]);
      for (int i = 0; i < len; ++i) {
        if (x[i] >= n.p0 && x[i] <= n.p1) dx[i] += dy[i];
      }
      break;
    }
    case Op::kSum: {
      const Node& a = nodes_[n.a];
      double* dx = grad_ptr(a);
      const int alen = a.rows * a.cols;
      for (int i = 0; i < alen; ++i) dx[i] += dy[0];
      break;
    }
    case Op::kMean: {
      const Node& a = nodes_[n.a];
      double* dx = grad_ptr(a);
      const int alen = a.rows * a.cols;
      const double g = dy[0] / static_cast<double>(alen);
      for (int i = 0; i < alen; ++i) dx[i] += g;
      break;
    }
    case Op::kConcatRows: {
      const Node& a = nodes_[n.a];
      const Node& b = nodes_[n.b];
      double* da = grad_ptr(a);
      double* db = grad_ptr(b);
      const int alen = a.rows * a.cols;
      const int blen = b.rows * b.cols;
      for (int i = 0; i < alen; ++i) da[i] += dy[i];
      for (int i = 0; i < blen; ++i) db[i] += dy[alen + i];
      break;
    }
    case Op::kConcatCols: {
      const Node& a = nodes_[n.a];
      const Node& b = nodes_[n.b];
      double* da = grad_ptr(a);
      double* db = grad_ptr(b);
      for (int i = 0; i < n.rows; ++i) {
        for (int j = 0; j < a.cols; ++j) {
          da[static_cast<std::size_t>(i) * a.cols + j] += dy[static_cast<std::size_t>(i) * n.cols + j];
        }
        for (int j = 0; j < b.cols; ++j) {
          db[static_cast<std::size_t>(i) * b.cols + j] +=
              dy[static_cast<std::size_t>(i) * n.cols + a.cols + j];
        }
      }
      break;
    }
    case Op::kSliceRows: {
      const Node& a = nodes_[n.a];
      double* dx = grad_ptr(a);
      for (int i = 0; i < len; ++i) dx[static_cast<std::size_t>(n.i0) * a.cols + i] += dy[i];
      break;
    }
    case Op::kSliceCols: {
      const Node& a = nodes_[n.a];
      double* dx = grad_ptr(a);
      for (int i = 0; i < n.rows; ++i) {
        for (int j = 0; j < n.cols; ++j) {
          dx[static_cast<std::size_t>(i) * a.cols + n.i0 + j] += dy[static_cast<std::size_t>(i) * n.cols + j];
        }
      }
      break;
    }
    case Op::kSoftmaxRows: {
      double* dx = grad_ptr(nodes_[n.a]);
      const bool causal = (n.flags & 1) != 0;
      for (int i = 0; i < n.rows; ++i) {
        const double* yr = y + static_cast<std::size_t>(i) * n.cols;
        const double* dyr = dy + static_cast<std::size_t>(i) * n.cols;
        double* dxr = dx + static_cast<std::size_t>(i) * n.cols;
        const int valid = causal ? (i + 1) : n.cols;
        double dot = 0.0;
        for (int j = 0; j < valid; ++j) dot += dyr[j] * yr[j];
        for (int j = 0; j < valid; ++j) dxr[j] += yr[j] * (dyr[j] - dot);
      }
      break;
    }
    case Op::kLayerNormRows: {
      const Node& a = nodes_[n.a];
      const Node& g = nodes_[n.b];
      const double* x = value_ptr(a);
      const double* gv = value_ptr(g);
      double* dx = grad_ptr(a);
      double* dg = grad_ptr(g);
      double* db = grad_ptr(nodes_[n.c]);
      const int c = n.cols;
      for (int i = 0; i < n.rows; ++i) {
        const double* xr = x + static_cast<std::size_t>(i) * c;
        const double* dyr = dy + static_cast<std::size_t>(i) * c;
        double mu = 0.0;
        for (int j = 0; j < c; ++j) mu += xr[j];
        mu /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) {
          const double d = xr[j] - mu;
          var += d * d;
        }
        var /= c;
        const double istd = 1.0 / std::sqrt(var + n.p0);
        double mean_dxh = 0.0, mean_dxh_xh = 0.0;
        for (int j = 0; j < c; ++j) {
          const double xh = (xr[j] - mu) * istd;
          const double dxh = dyr[j] * gv[j];
          mean_dxh += dxh;
          mean_dxh_xh += dxh * xh;
          dg[j] += dyr[j] * xh;
          db[j] += dyr[j];
        }
        mean_dxh /= c;
        mean_dxh_xh /= c;
        double* dxr = dx + static_cast<std::size_t>(i) * c;
        for (int j = 0; j < c; ++j) {
          const double xh = (xr[j] - mu) * istd;
          const double dxh = dyr[j] * gv[j];
          dxr[j] += istd * (dxh - mean_dxh - xh * mean_dxh_xh);
        }
      }
      break;
    }
  }
}

void Tape::zero_grad() {
  std::fill(grads_.begin(), grads_.end(), 0.0);
}

void Tape::clear() {
  nodes_.clear();
  values_.clear();
  grads_.clear();
  grads_ready_ = false;
  last_visits_ = 0;
}

// ---------------------------------------------------------------------------
// Access

std::span<const double> Tape::values(Var v) const {
  const Node& n = node(v);
  return {value_ptr(n), static_cast<std::size_t>(n.rows) * n.cols};
}

int Tape::rows(Var v) const { return node(v).rows; }
int Tape::cols(Var v) const { return node(v).cols; }

double Tape::value_scalar(Var v) const {
  const Node& n = node(v);
  if (n.rows != 1 || n.cols != 1) {
    throw DataError("value_scalar on non-scalar node " + shape_str(n.rows, n.cols));
  }
  return *value_ptr(n);
}

Tensor Tape::value_tensor(Var v) const {
  const Node& n = node(v);
  Tensor t(n.rows, n.cols);
  std::copy(value_ptr(n), value_ptr(n) + t.size(), t.data.begin());
  return t;
}

std::span<const double> Tape::grad(Var v) const {
  const Node& n = node(v);
  static const std::vector<double> kEmpty;
  if (!grads_ready_ || n.off + static_cast<std::size_t>(n.rows) * n.cols > grads_.size()) {
    throw DataError("grad requested before backward()");
  }
  return {grads_.data() + n.off, static_cast<std::size_t>(n.rows) * n.cols};
}

Tensor Tape::grad_tensor(Var v) const {
  const Node& n = node(v);
  Tensor t(n.rows, n.cols);
  const auto g = grad(v);
  std::copy(g.begin(), g.end(), t.data.begin());
  return t;
}

// ---------------------------------------------------------------------------
// Gradient checking

GradCheckReport grad_check(const TapeFn& f, const std::vector<Tensor>& point, double h,
                           double tol) {
  if (!(h > 0.0 && h < 1e-2)) throw DataError("grad_check: h must be in (0, 1e-2)");

  const auto eval = [&](const std::vector<Tensor>& pt) -> double {
    Tape tape;
    std::vector<Var> leaves;
    leaves.reserve(pt.size());
    for (const auto& t : pt) leaves.push_back(tape.leaf(t));
    const Var out = f(tape, leaves);
    return tape.value_scalar(out);
  };

  // Analytic gradients in one backward pass.
  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(point.size());
  for (const auto& t : point) leaves.push_back(tape.leaf(t));
  const Var out = f(tape, leaves);
  tape.backward(out);
  std::vector<Tensor> analytic;
  analytic.reserve(leaves.size());
  for (const Var v : leaves) analytic.push_back(tape.grad_tensor(v));

  GradCheckReport report;
  std::vector<Tensor> pt = point;
  for (std::size_t t = 0; t < pt.size(); ++t) {
    for (int i = 0; i < pt[t].size(); ++i) {
      const double orig = pt[t].data[static_cast<std::size_t>(i)];
      pt[t].data[static_cast<std::size_t>(i)] = orig + h;
      const double fp = eval(pt);
      pt[t].data[static_cast<std::size_t>(i)] = orig - h;
      const double fm = eval(pt);
      pt[t].data[static_cast<std::size_t>(i)] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double an = analytic[t].data[static_cast<std::size_t>(i)];
      const double rel = std::fabs(fd - an) / std::max(1.0, std::fabs(an));
      ++report.coords_checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_tensor = static_cast<int>(t);
        report.worst_index = i;
      }
    }
  }
  report.pass = report.max_rel_err < tol;
  return report;
}

// ---------------------------------------------------------------------------
// Detached kernels (same code paths the tape uses)

namespace detached {

namespace {
Tensor binary(const Tensor& a, const Tensor& b, char op) {
  const bool sa = a.is_scalar() && !b.is_scalar();
  const bool sb = b.is_scalar() && !a.is_scalar();
  if (!sa && !sb && (a.rows != b.rows || a.cols != b.cols)) {
    throw DataError(std::string("detached op: shape mismatch ") + shape_str(a.rows, a.cols) +
                    " vs " + shape_str(b.rows, b.cols));
  }
  const Tensor& shape_src = sa ? b : a;
  Tensor out(shape_src.rows, shape_src.cols);
  for (int i = 0; i < out.size(); ++i) {
    const double x = sa ? a.data[0] : a.data[static_cast<std::size_t>(i)];
    const double y = sb ? b.data[0] : b.data[static_cast<std::size_t>(i)];
    switch (op) {
      case '+': out.data[static_cast<std::size_t>(i)] = x + y; break;
      case '-': out.data[static_cast<std::size_t>(i)] = x - y; break;
      case '*': out.data[static_cast<std::size_t>(i)] = x * y; break;
      default: out.data[static_cast<std::size_t>(i)] = x / y; break;
    }
  }
  return out;
}

template <class F>
Tensor unary(const Tensor& x, F f) {
  Tensor out(x.rows, x.cols);
  for (int i = 0; i < x.size(); ++i) out.data[static_cast<std::size_t>(i)] = f(x.data[static_cast<std::size_t>(i)]);
  return out;
}
}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, '+'); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, '-'); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, '*'); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(a, b, '/'); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols != b.rows) {
    throw DataError("detached matmul: shape mismatch " + shape_str(a.rows, a.cols) + " vs " +
                    shape_str(b.rows, b.cols));
  }
  Tensor out(a.rows, b.cols);
  gemm(a.data.data(), b.data.data(), out.data.data(), a.rows, a.cols, b.cols, false);
  return out;
}

Tensor tanh(const Tensor& x) { return unary(x, [](double v) { return std::tanh(v); }); }
Tensor sigmoid(const Tensor& x) { return unary(x, stable_sigmoid); }
Tensor exp(const Tensor& x) { return unary(x, [](double v) { return std::exp(v); }); }
Tensor sqrt(const Tensor& x) { return unary(x, [](double v) { return std::sqrt(v); }); }

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (const double v : x.data) acc += v;
  return Tensor::scalar(acc);
}

Tensor mean(const Tensor& x) {
  double acc = 0.0;
  for (const double v : x.data) acc += v;
  return Tensor::scalar(acc / static_cast<double>(x.size()));
}

}  // namespace detached

}  // namespace ebg::ad
