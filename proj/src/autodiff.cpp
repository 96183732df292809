#include "tidpo/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace tidpo {

namespace {

[[noreturn]] void shape_error(const char* op, const std::string& detail) {
  throw ShapeMismatch(std::string(op) + ": " + detail);
}

std::string shape_str(const Tensor& t) {
  std::string s = "[";
  for (size_t i = 0; i < t.shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(t.shape[i]);
  }
  return s + "]";
}

}  // namespace

Tensor::Tensor(std::vector<int64_t> shape_in, std::vector<double> data_in)
    : shape(std::move(shape_in)), data(std::move(data_in)) {
  if (shape.empty() || shape.size() > 2) {
    throw InvalidArgument("Tensor: rank must be 1 or 2");
  }
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d <= 0) throw InvalidArgument("Tensor: dimensions must be positive");
    n *= d;
  }
  if (n != static_cast<int64_t>(data.size())) {
    throw InvalidArgument("Tensor: data size does not match shape");
  }
}

Tensor Tensor::zeros(std::vector<int64_t> shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return Tensor(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::full(std::vector<int64_t> shape, double v) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return Tensor(std::move(shape), std::vector<double>(n, v));
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

Tensor Tensor::from_vector(std::vector<double> v) {
  const int64_t n = static_cast<int64_t>(v.size());
  return Tensor({n}, std::move(v));
}

Tensor Tensor::from_matrix(int64_t rows, int64_t cols, std::vector<double> v) {
  return Tensor({rows, cols}, std::move(v));
}

bool Tensor::all_finite() const {
  for (double x : data) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

const char* op_kind_name(OpKind k) {
  switch (k) {
    case OpKind::kMatmul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kNeg: return "neg";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kSoftmaxRows: return "softmax_rows";
    case OpKind::kLogSoftmaxRows: return "log_softmax_rows";
    case OpKind::kLayerNormRows: return "layer_norm_rows";
    case OpKind::kLog: return "log";
    case OpKind::kExp: return "exp";
    case OpKind::kRelu: return "relu";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kLogSigmoid: return "log_sigmoid";
    case OpKind::kGatherRows: return "gather_rows";
    case OpKind::kSelect: return "select";
    case OpKind::kSum: return "sum";
    case OpKind::kMaxReduce: return "max_reduce";
  }
  return "?";
}

double stable_sigmoid(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus(double x) {
  // log(1+e^x) = max(x,0) + log1p(e^-|x|); never overflows.
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

double stable_log_sigmoid(double x) { return -softplus(-x); }

ValueId Tape::push_value(Tensor t, const char* op) {
  if (!t.all_finite()) {
    throw NonFinite(std::string(op) + ": produced a non-finite value");
  }
  values_.push_back(std::move(t));
  retained_.push_back(0);
  return static_cast<ValueId>(values_.size() - 1);
}

const Tensor& Tape::checked(ValueId id, const char* op) const {
  if (id < 0 || id >= static_cast<ValueId>(values_.size())) {
    throw InvalidArgument(std::string(op) + ": ValueId out of range");
  }
  return values_[id];
}

ValueId Tape::leaf(Tensor t) {
  const bool retain = t.requires_grad;
  ValueId id = push_value(std::move(t), "leaf");
  retained_[id] = retain ? 1 : 0;
  return id;
}

ValueId Tape::constant(Tensor t) {
  t.requires_grad = false;
  return push_value(std::move(t), "constant");
}

const Tensor& Tape::value(ValueId id) const { return checked(id, "value"); }

ValueId Tape::matmul(ValueId a, ValueId b) {
  const Tensor& ta = checked(a, "matmul");
  const Tensor& tb = checked(b, "matmul");
  if (ta.rank() != 2 || tb.rank() != 2) {
    shape_error("matmul", "both operands must be rank-2, got " +
                              shape_str(ta) + " x " + shape_str(tb));
  }
  const int64_t m = ta.shape[0], k = ta.shape[1], n = tb.shape[1];
  if (tb.shape[0] != k) {
    shape_error("matmul", "inner dimensions differ: " + shape_str(ta) +
                              " x " + shape_str(tb));
  }
  Tensor out = Tensor::zeros({m, n});
  // i-k-j order: streams through rows of b, good cache behaviour.
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t kk = 0; kk < k; ++kk) {
      const double aik = ta.data[i * k + kk];
      if (aik == 0.0) continue;
      const double* brow = &tb.data[kk * n];
      double* orow = &out.data[i * n];
      for (int64_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
    }
  }
  ValueId id = push_value(std::move(out), "matmul");
  nodes_.push_back({OpKind::kMatmul, a, b, id, 0.0, {}, {}});
  return id;
}

namespace {

// Shape contract shared by add/sub/mul: equal shapes, or [m,n] op [n].
enum class BroadcastMode { kSame, kRowVector };

BroadcastMode binary_mode(const Tensor& a, const Tensor& b, const char* op) {
  if (a.same_shape(b)) return BroadcastMode::kSame;
  if (a.rank() == 2 && b.rank() == 1 && b.shape[0] == a.shape[1]) {
    return BroadcastMode::kRowVector;
  }
  shape_error(op, "incompatible shapes " + shape_str(a) + " vs " +
                      shape_str(b));
}

}  // namespace

ValueId Tape::add(ValueId a, ValueId b) {
  const Tensor& ta = checked(a, "add");
  const Tensor& tb = checked(b, "add");
  const BroadcastMode mode = binary_mode(ta, tb, "add");
  Tensor out = ta;
  out.requires_grad = false;
  if (mode == BroadcastMode::kSame) {
    for (int64_t i = 0; i < out.size(); ++i) out.data[i] += tb.data[i];
  } else {
    const int64_t n = ta.shape[1];
    for (int64_t i = 0; i < ta.shape[0]; ++i)
      for (int64_t j = 0; j < n; ++j) out.data[i * n + j] += tb.data[j];
  }
  ValueId id = push_value(std::move(out), "add");
  nodes_.push_back({OpKind::kAdd, a, b, id, 0.0, {}, {}});
  return id;
}

ValueId Tape::sub(ValueId a, ValueId b) {
  const Tensor& ta = checked(a, "sub");
  const Tensor& tb = checked(b, "sub");
  const BroadcastMode mode = binary_mode(ta, tb, "sub");
  Tensor out = ta;
  out.requires_grad = false;
  if (mode == BroadcastMode::kSame) {
    for (int64_t i = 0; i < out.size(); ++i) out.data[i] -= tb.data[i];
  } else {
    const int64_t n = ta.shape[1];
    for (int64_t i = 0; i < ta.shape[0]; ++i)
      for (int64_t j = 0; j < n; ++j) out.data[i * n + j] -= tb.data[j];
  }
  ValueId id = push_value(std::move(out), "sub");
  nodes_.push_back({OpKind::kSub, a, b, id, 0.0, {}, {}});
  return id;
}

ValueId Tape::mul(ValueId a, ValueId b) {
  const Tensor& ta = checked(a, "mul");
  const Tensor& tb = checked(b, "mul");
  const BroadcastMode mode = binary_mode(ta, tb, "mul");
  Tensor out = ta;
  out.requires_grad = false;
  if (mode == BroadcastMode::kSame) {
    for (int64_t i = 0; i < out.size(); ++i) out.data[i] *= tb.data[i];
  } else {
    const int64_t n = ta.shape[1];
    for (int64_t i = 0; i < ta.shape[0]; ++i)
      for (int64_t j = 0; j < n; ++j) out.data[i * n + j] *= tb.data[j];
  }
  ValueId id = push_value(std::move(out), "mul");
  nodes_.push_back({OpKind::kMul, a, b, id, 0.0, {}, {}});
  return id;
}

ValueId Tape::scale(ValueId a, double s) {
  if (!std::isfinite(s)) throw NonFinite("scale: factor is not finite");
  const Tensor& ta = checked(a, "scale");
  Tensor out = ta;
  out.requires_grad = false;
  for (double& x : out.data) x *= s;
  ValueId id = push_value(std::move(out), "scale");
  nodes_.push_back({OpKind::kScale, a, kNoValue, id, s, {}, {}});
  return id;
}

ValueId Tape::neg(ValueId a) {
  const Tensor& ta = checked(a, "neg");
  Tensor out = ta;
  out.requires_grad = false;
  for (double& x : out.data) x = -x;
  ValueId id = push_value(std::move(out), "neg");
  nodes_.push_back({OpKind::kNeg, a, kNoValue, id, 0.0, {}, {}});
  return id;
}

ValueId Tape::transpose(ValueId a) {
  const Tensor& ta = checked(a, "transpose");
  if (ta.rank() != 2) shape_error("transpose", "requires rank-2");
  const int64_t m = ta.shape[0], n = ta.shape[1];
  Tensor out = Tensor::zeros({n, m});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out.data[j * m + i] = ta.data[i * n + j];
  ValueId id = push_value(std::move(out), "transpose");
  nodes_.push_back({OpKind::kTranspose, a, kNoValue, id, 0.0, {}, {}});
  return id;
}

namespace {

// Row-wise softmax with max subtraction. Masked entries at -1e30 underflow
// to an exact 0 probability instead of producing NaN.
void softmax_row(const double* x, double* y, int64_t n) {
  double mx = x[0];
  for (int64_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
  double s = 0.0;
  for (int64_t j = 0; j < n; ++j) {
    y[j] = std::exp(x[j] - mx);
    s += y[j];
  }
  for (int64_t j = 0; j < n; ++j) y[j] /= s;
}

void log_softmax_row(const double* x, double* y, int64_t n) {
  double mx = x[0];
  for (int64_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
  double s = 0.0;
  for (int64_t j = 0; j < n; ++j) s += std::exp(x[j] - mx);
  const double lse = mx + std::log(s);
  for (int64_t j = 0; j < n; ++j) y[j] = x[j] - lse;
}

}  // namespace

ValueId Tape::softmax_rows(ValueId a) {
  const Tensor& ta = checked(a, "softmax_rows");
  Tensor out = ta;
  out.requires_grad = false;
  const int64_t r = ta.rows(), c = ta.cols();
  for (int64_t i = 0; i < r; ++i)
    softmax_row(&ta.data[i * c], &out.data[i * c], c);
  ValueId id = push_value(std::move(out), "softmax_rows");
  nodes_.push_back({OpKind::kSoftmaxRows, a, kNoValue, id, 0.0, {}, {}});
  return id;
}

ValueId Tape::log_softmax_rows(ValueId a) {
  const Tensor& ta = checked(a, "log_softmax_rows");
  Tensor out = ta;
  out.requires_grad = false;
  const int64_t r = ta.rows(), c = ta.cols();
  for (int64_t i = 0; i < r; ++i)
    log_softmax_row(&ta.data[i * c], &out.data[i * c], c);
  ValueId id = push_value(std::move(out), "log_softmax_rows");
  nodes_.push_back({OpKind::kLogSoftmaxRows, a, kNoValue, id, 0.0, {}, {}});
  return id;
}

ValueId Tape::layer_norm_rows(ValueId a) {
  const Tensor& ta = checked(a, "layer_norm_rows");
  Tensor out = ta;
  out.requires_grad = false;
  const int64_t r = ta.rows(), c = ta.cols();
  for (int64_t i = 0; i < r; ++i) {
    const double* x = &ta.data[i * c];
    double* y = &out.data[i * c];
    double mean = 0.0;
    for (int64_t j = 0; j < c; ++j) mean += x[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (int64_t j = 0; j < c; ++j) var += (x[j] - mean) * (x[j] - mean);
    var /= static_cast<double>(c);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    for (int64_t j = 0; j < c; ++j) y[j] = (x[j] - mean) * inv;
  }
  ValueId id = push_value(std::move(out), "layer_norm_rows");
  nodes_.push_back({OpKind::kLayerNormRows, a, kNoValue, id, 0.0, {}, {}});
  return id;
}

ValueId Tape::log(ValueId a) {
  const Tensor& ta = checked(a, "log");
  Tensor out = ta;
  out.requires_grad = false;
  for (double& x : out.data) x = std::log(x);
  ValueId id = push_value(std::move(out), "log");
  nodes_.push_back({OpKind::kLog, a, kNoValue, id, 0.0, {}, {}});
  return id;
}

ValueId Tape::exp(ValueId a) {
  const Tensor& ta = checked(a, "exp");
  Tensor out = ta;
  out.requires_grad = false;
  for (double& x : out.data) x = std::exp(x);
  ValueId id = push_value(std::move(out), "exp");
  nodes_.push_back({OpKind::kExp, a, kNoValue, id, 0.0, {}, {}});
  return id;
}

ValueId Tape::relu(ValueId a) {
  const Tensor& ta = checked(a, "relu");
  Tensor out = ta;
  out.requires_grad = false;
  for (double& x : out.data) x = x > 0.0 ? x : 0.0;
  ValueId id = push_value(std::move(out), "relu");
  nodes_.push_back({OpKind::kRelu, a, kNoValue, id, 0.0, {}, {}});
  return id;
}

ValueId Tape::sigmoid(ValueId a) {
  const Tensor& ta = checked(a, "sigmoid");
  Tensor out = ta;
  out.requires_grad = false;
  for (double& x : out.data) x = stable_sigmoid(x);
  ValueId id = push_value(std::move(out), "sigmoid");
  nodes_.push_back({OpKind::kSigmoid, a, kNoValue, id, 0.0, {}, {}});
  return id;
}

ValueId Tape::log_sigmoid(ValueId a) {
  const Tensor& ta = checked(a, "log_sigmoid");
  Tensor out = ta;
  out.requires_grad = false;
  for (double& x : out.data) x = stable_log_sigmoid(x);
  ValueId id = push_value(std::move(out), "log_sigmoid");
  nodes_.push_back({OpKind::kLogSigmoid, a, kNoValue, id, 0.0, {}, {}});
  return id;
}

ValueId Tape::gather_rows(ValueId a, std::vector<int64_t> rows) {
  const Tensor& ta = checked(a, "gather_rows");
  if (ta.rank() != 2) shape_error("gather_rows", "requires rank-2");
  if (rows.empty()) throw InvalidArgument("gather_rows: empty index list");
  const int64_t r = ta.shape[0], c = ta.shape[1];
  for (int64_t idx : rows) {
    if (idx < 0 || idx >= r) {
      throw InvalidArgument("gather_rows: row index " + std::to_string(idx) +
                            " out of range [0," + std::to_string(r) + ")");
    }
  }
  Tensor out = Tensor::zeros({static_cast<int64_t>(rows.size()), c});
  for (size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(&ta.data[rows[i] * c], c, &out.data[i * c]);
  }
  ValueId id = push_value(std::move(out), "gather_rows");
  nodes_.push_back(
      {OpKind::kGatherRows, a, kNoValue, id, 0.0, std::move(rows), {}});
  return id;
}

ValueId Tape::select(ValueId a,
                     std::vector<std::pair<int64_t, int64_t>> cells) {
  const Tensor& ta = checked(a, "select");
  if (ta.rank() != 2) shape_error("select", "requires rank-2");
  if (cells.empty()) throw InvalidArgument("select: empty cell list");
  const int64_t r = ta.shape[0], c = ta.shape[1];
  Tensor out = Tensor::zeros({static_cast<int64_t>(cells.size())});
  for (size_t i = 0; i < cells.size(); ++i) {
    const auto [ri, ci] = cells[i];
    if (ri < 0 || ri >= r || ci < 0 || ci >= c) {
      throw InvalidArgument("select: cell (" + std::to_string(ri) + "," +
                            std::to_string(ci) + ") out of range");
    }
    out.data[i] = ta.data[ri * c + ci];
  }
  ValueId id = push_value(std::move(out), "select");
  nodes_.push_back(
      {OpKind::kSelect, a, kNoValue, id, 0.0, {}, std::move(cells)});
  return id;
}

ValueId Tape::sum(ValueId a) {
  const Tensor& ta = checked(a, "sum");
  double s = 0.0;
  for (double x : ta.data) s += x;
  ValueId id = push_value(Tensor::scalar(s), "sum");
  nodes_.push_back({OpKind::kSum, a, kNoValue, id, 0.0, {}, {}});
  return id;
}

ValueId Tape::max_reduce(ValueId a) {
  const Tensor& ta = checked(a, "max_reduce");
  double best = ta.data[0];
  for (int64_t i = 1; i < ta.size(); ++i) best = std::max(best, ta.data[i]);
  ValueId id = push_value(Tensor::scalar(best), "max_reduce");
  nodes_.push_back({OpKind::kMaxReduce, a, kNoValue, id, 0.0, {}, {}});
  return id;
}

ValueId Tape::apply(OpKind kind, const std::vector<ValueId>& inputs) {
  auto need = [&](size_t n) {
    if (inputs.size() != n) {
      throw InvalidArgument(std::string("apply(") + op_kind_name(kind) +
                            "): expected " + std::to_string(n) + " inputs");
    }
  };
  switch (kind) {
    case OpKind::kMatmul: need(2); return matmul(inputs[0], inputs[1]);
    case OpKind::kAdd: need(2); return add(inputs[0], inputs[1]);
    case OpKind::kSub: need(2); return sub(inputs[0], inputs[1]);
    case OpKind::kMul: need(2); return mul(inputs[0], inputs[1]);
    case OpKind::kNeg: need(1); return neg(inputs[0]);
    case OpKind::kTranspose: need(1); return transpose(inputs[0]);
    case OpKind::kSoftmaxRows: need(1); return softmax_rows(inputs[0]);
    case OpKind::kLogSoftmaxRows: need(1); return log_softmax_rows(inputs[0]);
    case OpKind::kLayerNormRows: need(1); return layer_norm_rows(inputs[0]);
    case OpKind::kLog: need(1); return log(inputs[0]);
    case OpKind::kExp: need(1); return exp(inputs[0]);
    case OpKind::kRelu: need(1); return relu(inputs[0]);
    case OpKind::kSigmoid: need(1); return sigmoid(inputs[0]);
    case OpKind::kLogSigmoid: need(1); return log_sigmoid(inputs[0]);
    case OpKind::kSum: need(1); return sum(inputs[0]);
    case OpKind::kMaxReduce: need(1); return max_reduce(inputs[0]);
    case OpKind::kScale:
    case OpKind::kGatherRows:
    case OpKind::kSelect:
      throw InvalidArgument(std::string("apply(") + op_kind_name(kind) +
                            "): kind needs explicit arguments; use the "
                            "typed method");
  }
  throw InvalidArgument("apply: unknown op kind");
}

std::map<ValueId, Tensor> Tape::backward(ValueId root) const {
  const Tensor& rv = checked(root, "backward");
  if (rv.size() != 1) {
    throw NotScalarRoot("backward: root must be a scalar, got shape " +
                        shape_str(rv));
  }

  // grads[i] empty <=> value i not (yet) reached from the root.
  std::vector<Tensor> grads(values_.size());
  grads[root] = Tensor::full(rv.shape, 1.0);

  auto ensure = [&](ValueId id) -> Tensor& {
    if (grads[id].data.empty()) grads[id] = Tensor::zeros(values_[id].shape);
    return grads[id];
  };

  for (int64_t ni = static_cast<int64_t>(nodes_.size()) - 1; ni >= 0; --ni) {
    const Node& nd = nodes_[ni];
    if (grads[nd.out].data.empty()) continue;
    const Tensor& g = grads[nd.out];
    const Tensor& va = values_[nd.a];
    const Tensor& vout = values_[nd.out];

    switch (nd.kind) {
      case OpKind::kMatmul: {
        const Tensor& vb = values_[nd.b];
        const int64_t m = va.shape[0], k = va.shape[1], n = vb.shape[1];
        Tensor& ga = ensure(nd.a);
        Tensor& gb = ensure(nd.b);
        // dA = g . B^T ; dB = A^T . g
        for (int64_t i = 0; i < m; ++i) {
          for (int64_t j = 0; j < n; ++j) {
            const double gij = g.data[i * n + j];
            if (gij == 0.0) continue;
            const double* brow = &vb.data[0];
            for (int64_t kk = 0; kk < k; ++kk) {
              ga.data[i * k + kk] += gij * brow[kk * n + j];
            }
          }
        }
        for (int64_t kk = 0; kk < k; ++kk) {
          for (int64_t i = 0; i < m; ++i) {
            const double aik = va.data[i * k + kk];
            if (aik == 0.0) continue;
            const double* grow = &g.data[i * n];
            double* gbrow = &gb.data[kk * n];
            for (int64_t j = 0; j < n; ++j) gbrow[j] += aik * grow[j];
          }
        }
        break;
      }
      case OpKind::kAdd:
      case OpKind::kSub: {
        const Tensor& vb = values_[nd.b];
        const double sign = nd.kind == OpKind::kAdd ? 1.0 : -1.0;
        Tensor& ga = ensure(nd.a);
        for (int64_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i];
        Tensor& gb = ensure(nd.b);
        if (va.same_shape(vb)) {
          for (int64_t i = 0; i < g.size(); ++i)
            gb.data[i] += sign * g.data[i];
        } else {  // [m,n] op [n]
          const int64_t n = va.shape[1];
          for (int64_t i = 0; i < va.shape[0]; ++i)
            for (int64_t j = 0; j < n; ++j)
              gb.data[j] += sign * g.data[i * n + j];
        }
        break;
      }
      case OpKind::kMul: {
        const Tensor& vb = values_[nd.b];
        Tensor& ga = ensure(nd.a);
        Tensor& gb = ensure(nd.b);
        if (va.same_shape(vb)) {
          for (int64_t i = 0; i < g.size(); ++i) {
            ga.data[i] += g.data[i] * vb.data[i];
            gb.data[i] += g.data[i] * va.data[i];
          }
        } else {  // [m,n] * [n]
          const int64_t n = va.shape[1];
          for (int64_t i = 0; i < va.shape[0]; ++i) {
            for (int64_t j = 0; j < n; ++j) {
              ga.data[i * n + j] += g.data[i * n + j] * vb.data[j];
              gb.data[j] += g.data[i * n + j] * va.data[i * n + j];
            }
          }
        }
        break;
      }
      case OpKind::kScale: {
        Tensor& ga = ensure(nd.a);
        for (int64_t i = 0; i < g.size(); ++i)
          ga.data[i] += nd.scalar * g.data[i];
        break;
      }
      case OpKind::kNeg: {
        Tensor& ga = ensure(nd.a);
        for (int64_t i = 0; i < g.size(); ++i) ga.data[i] -= g.data[i];
        break;
      }
      case OpKind::kTranspose: {
        const int64_t m = va.shape[0], n = va.shape[1];
        Tensor& ga = ensure(nd.a);
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < n; ++j)
            ga.data[i * n + j] += g.data[j * m + i];
        break;
      }
      case OpKind::kSoftmaxRows: {
        // dX_j = S_j * (g_j - sum_k g_k S_k), per row.
        const int64_t r = vout.rows(), c = vout.cols();
        Tensor& ga = ensure(nd.a);
        for (int64_t i = 0; i < r; ++i) {
          const double* s = &vout.data[i * c];
          const double* gr = &g.data[i * c];
          double dot = 0.0;
          for (int64_t j = 0; j < c; ++j) dot += gr[j] * s[j];
          for (int64_t j = 0; j < c; ++j)
            ga.data[i * c + j] += s[j] * (gr[j] - dot);
        }
        break;
      }
      case OpKind::kLogSoftmaxRows: {
        // dX_j = g_j - softmax_j * sum_k g_k, per row.
        const int64_t r = vout.rows(), c = vout.cols();
        Tensor& ga = ensure(nd.a);
        for (int64_t i = 0; i < r; ++i) {
          const double* y = &vout.data[i * c];
          const double* gr = &g.data[i * c];
          double gsum = 0.0;
          for (int64_t j = 0; j < c; ++j) gsum += gr[j];
          for (int64_t j = 0; j < c; ++j)
            ga.data[i * c + j] += gr[j] - std::exp(y[j]) * gsum;
        }
        break;
      }
      case OpKind::kLayerNormRows: {
        // dx = inv * (g - mean(g) - xhat * mean(g * xhat)), per row.
        const int64_t r = va.rows(), c = va.cols();
        Tensor& ga = ensure(nd.a);
        for (int64_t i = 0; i < r; ++i) {
          const double* x = &va.data[i * c];
          const double* xhat = &vout.data[i * c];
          const double* gr = &g.data[i * c];
          double mean = 0.0;
          for (int64_t j = 0; j < c; ++j) mean += x[j];
          mean /= static_cast<double>(c);
          double var = 0.0;
          for (int64_t j = 0; j < c; ++j) var += (x[j] - mean) * (x[j] - mean);
          var /= static_cast<double>(c);
          const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
          double gmean = 0.0, gxmean = 0.0;
          for (int64_t j = 0; j < c; ++j) {
            gmean += gr[j];
            gxmean += gr[j] * xhat[j];
          }
          gmean /= static_cast<double>(c);
          gxmean /= static_cast<double>(c);
          for (int64_t j = 0; j < c; ++j)
            ga.data[i * c + j] += inv * (gr[j] - gmean - xhat[j] * gxmean);
        }
        break;
      }
      case OpKind::kLog: {
        Tensor& ga = ensure(nd.a);
        for (int64_t i = 0; i < g.size(); ++i)
          ga.data[i] += g.data[i] / va.data[i];
        break;
      }
      case OpKind::kExp: {
        Tensor& ga = ensure(nd.a);
        for (int64_t i = 0; i < g.size(); ++i)
          ga.data[i] += g.data[i] * vout.data[i];
        break;
      }
      case OpKind::kRelu: {
        Tensor& ga = ensure(nd.a);
        for (int64_t i = 0; i < g.size(); ++i)
          if (va.data[i] > 0.0) ga.data[i] += g.data[i];
        break;
      }
      case OpKind::kSigmoid: {
        Tensor& ga = ensure(nd.a);
        for (int64_t i = 0; i < g.size(); ++i) {
          const double s = vout.data[i];
          ga.data[i] += g.data[i] * s * (1.0 - s);
        }
        break;
      }
      case OpKind::kLogSigmoid: {
        // d/dx log sigmoid(x) = sigmoid(-x).
        Tensor& ga = ensure(nd.a);
        for (int64_t i = 0; i < g.size(); ++i)
          ga.data[i] += g.data[i] * stable_sigmoid(-va.data[i]);
        break;
      }
      case OpKind::kGatherRows: {
        const int64_t c = va.shape[1];
        Tensor& ga = ensure(nd.a);
        for (size_t i = 0; i < nd.rows.size(); ++i)
          for (int64_t j = 0; j < c; ++j)
            ga.data[nd.rows[i] * c + j] += g.data[i * c + j];
        break;
      }
      case OpKind::kSelect: {
        const int64_t c = va.shape[1];
        Tensor& ga = ensure(nd.a);
        for (size_t i = 0; i < nd.cells.size(); ++i)
          ga.data[nd.cells[i].first * c + nd.cells[i].second] += g.data[i];
        break;
      }
      case OpKind::kSum: {
        Tensor& ga = ensure(nd.a);
        for (int64_t i = 0; i < ga.size(); ++i) ga.data[i] += g.data[0];
        break;
      }
      case OpKind::kMaxReduce: {
        // Subgradient goes to the first occurrence of the max.
        int64_t arg = 0;
        for (int64_t i = 1; i < va.size(); ++i)
          if (va.data[i] > va.data[arg]) arg = i;
        ensure(nd.a).data[arg] += g.data[0];
        break;
      }
    }
  }

  std::map<ValueId, Tensor> out;
  for (ValueId id = 0; id < static_cast<ValueId>(values_.size()); ++id) {
    if (!retained_[id]) continue;
    if (grads[id].data.empty()) {
      out.emplace(id, Tensor::zeros(values_[id].shape));
    } else {
      out.emplace(id, std::move(grads[id]));
    }
  }
  return out;
}

}  // namespace tidpo
