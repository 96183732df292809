#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "tidpo/errors.hpp"

namespace tidpo {

// Dense row-major tensor of doubles, rank 1 or 2. All math in this project
// runs in 64-bit floats; there is no float path.
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<double> data;
  bool requires_grad = false;

  Tensor() = default;
  Tensor(std::vector<int64_t> shape_in, std::vector<double> data_in);

  static Tensor zeros(std::vector<int64_t> shape);
  static Tensor full(std::vector<int64_t> shape, double v);
  static Tensor scalar(double v);
  static Tensor from_vector(std::vector<double> v);
  static Tensor from_matrix(int64_t rows, int64_t cols, std::vector<double> v);

  int64_t size() const { return static_cast<int64_t>(data.size()); }
  int64_t rank() const { return static_cast<int64_t>(shape.size()); }
  // Rank-1 tensors are treated as a single row where a matrix is expected.
  int64_t rows() const { return rank() == 2 ? shape[0] : 1; }
  int64_t cols() const { return rank() == 2 ? shape[1] : shape[0]; }

  double& at(int64_t r, int64_t c) { return data[r * cols() + c]; }
  double at(int64_t r, int64_t c) const { return data[r * cols() + c]; }
  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool all_finite() const;
};

// Handle to a value on a Tape. Plain index; cheap to copy.
using ValueId = int32_t;
constexpr ValueId kNoValue = -1;

enum class OpKind {
  kMatmul,
  kAdd,
  kSub,
  kMul,
  kScale,
  kNeg,
  kTranspose,
  kSoftmaxRows,
  kLogSoftmaxRows,
  kLayerNormRows,
  kLog,
  kExp,
  kRelu,
  kSigmoid,
  kLogSigmoid,
  kGatherRows,
  kSelect,
  kSum,
  kMaxReduce,
};

const char* op_kind_name(OpKind k);

// Epsilon inside the layer-norm variance sqrt.
constexpr double kLayerNormEps = 1e-5;

// Append-only record of a forward computation. Values are stored on the
// tape; ops push new values and remember enough to run reverse-mode
// backprop. One tape = one forward graph; tapes are never mutated after
// the fact, only appended to.
class Tape {
 public:
  // Registers an input. Leaves with requires_grad=true receive gradients
  // from backward(); constants never do.
  ValueId leaf(Tensor t);
  ValueId constant(Tensor t);

  ValueId matmul(ValueId a, ValueId b);
  ValueId add(ValueId a, ValueId b);   // equal shapes, or [m,n] + [n]
  ValueId sub(ValueId a, ValueId b);   // equal shapes, or [m,n] - [n]
  ValueId mul(ValueId a, ValueId b);   // elementwise; [m,n] * [n] broadcasts
  ValueId scale(ValueId a, double s);
  ValueId neg(ValueId a);
  ValueId transpose(ValueId a);
  ValueId softmax_rows(ValueId a);
  ValueId log_softmax_rows(ValueId a);
  ValueId layer_norm_rows(ValueId a);  // normalize only; affine is separate
  ValueId log(ValueId a);
  ValueId exp(ValueId a);
  ValueId relu(ValueId a);
  ValueId sigmoid(ValueId a);
  ValueId log_sigmoid(ValueId a);
  ValueId gather_rows(ValueId a, std::vector<int64_t> rows);
  ValueId select(ValueId a, std::vector<std::pair<int64_t, int64_t>> cells);
  ValueId sum(ValueId a);         // -> scalar [1]
  ValueId max_reduce(ValueId a);  // -> scalar [1]; first max wins ties

  // Generic dispatch for ops that take no extra arguments. Kinds needing
  // an index list or scalar argument (scale/gather/select) must go through
  // their typed method and raise InvalidArgument here.
  ValueId apply(OpKind kind, const std::vector<ValueId>& inputs);

  const Tensor& value(ValueId id) const;
  int64_t num_values() const { return static_cast<int64_t>(values_.size()); }
  int64_t num_ops() const { return static_cast<int64_t>(nodes_.size()); }

  // Reverse-mode sweep from a scalar root. Returns a gradient tensor for
  // every requires_grad leaf; leaves the root does not depend on get a
  // zero tensor of their shape. The tape itself is untouched (const), so
  // several backward passes from different roots can share one forward.
  std::map<ValueId, Tensor> backward(ValueId root) const;

 private:
  struct Node {
    OpKind kind;
    ValueId a = kNoValue;
    ValueId b = kNoValue;
    ValueId out = kNoValue;
    double scalar = 0.0;                              // kScale
    std::vector<int64_t> rows;                        // kGatherRows
    std::vector<std::pair<int64_t, int64_t>> cells;   // kSelect
  };

  ValueId push_value(Tensor t, const char* op);
  const Tensor& checked(ValueId id, const char* op) const;

  std::vector<Tensor> values_;
  std::vector<uint8_t> retained_;  // 1 = requires_grad leaf
  std::vector<Node> nodes_;
};

// Curated numeric kernels shared between tape ops and scalar code paths,
// so that e.g. the loss on a tape and the loss recomputed by hand agree
// bit for bit.
double stable_sigmoid(double x);
double softplus(double x);        // log(1 + e^x) without overflow
double stable_log_sigmoid(double x);

}  // namespace tidpo
