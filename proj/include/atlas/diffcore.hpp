#pragma once

// Reverse-mode differentiation over dense row-major matrices.
//
// A Tape records a graph of primitive operations. forward() evaluates every
// node in insertion order and caches the values; backward() walks the nodes in
// reverse and accumulates adjoints. Parameters live in a ParamStore and are
// referenced by slot, so gradients land in a flat array aligned with the store.
//
// Conventions: ReLU'(0) = 0; max-pool ties route the gradient to the lowest
// row index.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "atlas/error.hpp"

namespace atlas::diff {

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) throw InvalidArgument("Matrix: data size does not match shape");
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  double* row(std::size_t r) { return data_.data() + r * cols_; }
  const double* row(std::size_t r) const { return data_.data() + r * cols_; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Placement of one named parameter inside ParamStore::values().
struct ParamSlot {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t size() const { return rows * cols; }
  friend bool operator==(const ParamSlot&, const ParamSlot&) = default;
};

/// Flat parameter vector. Every slot is a disjoint contiguous slice and the
/// slots tile the value array in registration order.
class ParamStore {
 public:
  /// Registers a rows×cols parameter initialised to zero; returns its slot id.
  std::size_t add(std::string name, std::size_t rows, std::size_t cols) {
    if (index_.contains(name)) throw InvalidArgument("ParamStore: duplicate parameter name '" + name + "'");
    const std::size_t id = layout_.size();
    index_.emplace(name, id);
    layout_.push_back(ParamSlot{std::move(name), values_.size(), rows, cols});
    values_.resize(values_.size() + rows * cols, 0.0);
    return id;
  }

  /// Rebuilds a store from a serialized layout. Throws unless the slots tile
  /// `values` exactly.
  static ParamStore from_layout(std::vector<ParamSlot> layout, std::vector<double> values) {
    ParamStore s;
    std::size_t offset = 0;
    for (const auto& slot : layout) {
      if (slot.offset != offset) throw InvalidArgument("ParamStore: slot '" + slot.name + "' is not contiguous");
      offset += slot.size();
      if (s.index_.contains(slot.name)) throw InvalidArgument("ParamStore: duplicate parameter name '" + slot.name + "'");
      s.index_.emplace(slot.name, s.index_.size());
    }
    if (offset != values.size()) throw InvalidArgument("ParamStore: layout does not cover the value array");
    s.layout_ = std::move(layout);
    s.values_ = std::move(values);
    return s;
  }

  std::size_t find(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw InvalidArgument("ParamStore: unknown parameter '" + std::string(name) + "'");
    return it->second;
  }
  bool contains(std::string_view name) const { return index_.contains(std::string(name)); }

  const ParamSlot& slot(std::size_t id) const { return layout_.at(id); }
  const std::vector<ParamSlot>& layout() const { return layout_; }
  std::size_t size() const { return values_.size(); }

  std::span<double> view(std::size_t id) {
    const auto& s = layout_.at(id);
    return {values_.data() + s.offset, s.size()};
  }
  std::span<const double> view(std::size_t id) const {
    const auto& s = layout_.at(id);
    return {values_.data() + s.offset, s.size()};
  }
  Matrix matrix(std::size_t id) const {
    auto v = view(id);
    return Matrix(layout_[id].rows, layout_[id].cols, std::vector<double>(v.begin(), v.end()));
  }

  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    return a.layout_ == b.layout_ && a.values_ == b.values_;
  }

 private:
  std::vector<ParamSlot> layout_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<double> values_;
};

/// Gradient aligned with ParamStore::values().
struct Grad {
  std::vector<double> d_values;
};

/// Per-layer batch-norm statistics used in eval mode.
struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.9;
  double eps = 1e-5;

  explicit BatchNormState(std::size_t channels = 0)
      : running_mean(channels, 0.0), running_var(channels, 1.0) {}
};

/// User-defined node. Must be a pure function of its inputs within one
/// forward/backward pair; it may cache whatever backward() needs.
class CustomOp {
 public:
  virtual ~CustomOp() = default;
  virtual std::string_view name() const = 0;
  virtual Matrix forward(std::span<const Matrix* const> inputs) = 0;
  /// Accumulates (adds) into d_inputs, which are pre-shaped and may be non-zero.
  virtual void backward(std::span<const Matrix* const> inputs, const Matrix& output, const Matrix& d_output,
                        std::span<Matrix* const> d_inputs) = 0;
};

struct NodeId {
  std::size_t index = 0;
  friend bool operator==(NodeId, NodeId) = default;
};

enum class Op {
  kInput,
  kConstant,
  kParam,
  kMatMul,
  kAdd,
  kRelu,
  kTanh,
  kConcatCols,
  kMaxPoolRows,
  kBatchNorm,
  kGatherRows,
  kSqDistRows,
  kSum,
  kScale,
  kCustom,
};

inline std::string_view op_name(Op op) {
  switch (op) {
    case Op::kInput: return "input";
    case Op::kConstant: return "constant";
    case Op::kParam: return "param";
    case Op::kMatMul: return "matmul";
    case Op::kAdd: return "add";
    case Op::kRelu: return "relu";
    case Op::kTanh: return "tanh";
    case Op::kConcatCols: return "concat";
    case Op::kMaxPoolRows: return "max-pool";
    case Op::kBatchNorm: return "batchnorm";
    case Op::kGatherRows: return "gather";
    case Op::kSqDistRows: return "squared-distance";
    case Op::kSum: return "sum";
    case Op::kScale: return "scale";
    case Op::kCustom: return "custom";
  }
  return "?";
}

namespace detail {

// out (n×m) += a (n×k) · b (k×m)
inline void gemm_acc(const Matrix& a, const Matrix& b, Matrix& out) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  for (std::size_t i = 0; i < n; ++i) {
    double* o = out.row(i);
    const double* ar = a.row(i);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ar[p];
      if (av == 0.0) continue;
      const double* br = b.row(p);
      for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
    }
  }
}

// out (n×k) += a (n×m) · bᵀ where b is k×m
inline void gemm_abt_acc(const Matrix& a, const Matrix& b, Matrix& out) {
  const std::size_t n = a.rows(), m = a.cols(), k = b.rows();
  for (std::size_t i = 0; i < n; ++i) {
    const double* ar = a.row(i);
    double* o = out.row(i);
    for (std::size_t p = 0; p < k; ++p) {
      const double* br = b.row(p);
      double s = 0.0;
      for (std::size_t j = 0; j < m; ++j) s += ar[j] * br[j];
      o[p] += s;
    }
  }
}

// out (k×m) += aᵀ · b where a is n×k and b is n×m
inline void gemm_atb_acc(const Matrix& a, const Matrix& b, Matrix& out) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  for (std::size_t i = 0; i < n; ++i) {
    const double* ar = a.row(i);
    const double* br = b.row(i);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ar[p];
      if (av == 0.0) continue;
      double* o = out.row(p);
      for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
    }
  }
}

}  // namespace detail

/// Recorded computation graph. Build with the node constructors, then call
/// forward() and backward(). The last node added is the output.
class Tape {
 public:
  NodeId input(std::size_t rows, std::size_t cols) {
    Node n{Op::kInput};
    n.rows = rows;
    n.cols = cols;
    n.slot = input_count_++;
    return push(std::move(n));
  }
  NodeId constant(Matrix m) {
    Node n{Op::kConstant};
    n.value = std::move(m);
    return push(std::move(n));
  }
  NodeId param(std::size_t slot) {
    Node n{Op::kParam};
    n.slot = slot;
    return push(std::move(n));
  }
  NodeId matmul(NodeId a, NodeId b) { return push(binary(Op::kMatMul, a, b)); }
  /// Elementwise sum; `b` may also be a 1×cols row broadcast over the rows of `a`.
  NodeId add(NodeId a, NodeId b) { return push(binary(Op::kAdd, a, b)); }
  NodeId relu(NodeId a) { return push(unary(Op::kRelu, a)); }
  NodeId tanh(NodeId a) { return push(unary(Op::kTanh, a)); }
  NodeId concat_cols(NodeId a, NodeId b) { return push(binary(Op::kConcatCols, a, b)); }
  /// Column-wise max over rows: n×c → 1×c.
  NodeId max_pool_rows(NodeId a) { return push(unary(Op::kMaxPoolRows, a)); }
  /// Batch normalization over rows. In training mode statistics come from the
  /// batch and `state` (if given) gets its running averages updated.
  NodeId batch_norm(NodeId x, NodeId gamma, NodeId beta, BatchNormState* state, bool training) {
    Node n{Op::kBatchNorm};
    n.inputs = {x.index, gamma.index, beta.index};
    n.bn_state = state;
    n.training = training;
    if (!training && state == nullptr) throw InvalidArgument("batch_norm: eval mode needs running statistics");
    return push(std::move(n));
  }
  /// Selects rows of `a` by index (repeats allowed).
  NodeId gather_rows(NodeId a, std::vector<std::size_t> rows) {
    Node n = unary(Op::kGatherRows, a);
    n.indices = std::move(rows);
    return push(std::move(n));
  }
  /// Row-wise squared Euclidean distance: n×c, n×c → n×1.
  NodeId sq_dist_rows(NodeId a, NodeId b) { return push(binary(Op::kSqDistRows, a, b)); }
  /// Sum of all entries → 1×1.
  NodeId sum(NodeId a) { return push(unary(Op::kSum, a)); }
  NodeId scale(NodeId a, double s) {
    Node n = unary(Op::kScale, a);
    n.scalar = s;
    return push(std::move(n));
  }
  NodeId custom(std::vector<NodeId> inputs, std::shared_ptr<CustomOp> op) {
    Node n{Op::kCustom};
    for (auto id : inputs) n.inputs.push_back(check(id));
    n.custom = std::move(op);
    return push(std::move(n));
  }

  std::size_t node_count() const { return nodes_.size(); }
  NodeId output() const {
    if (nodes_.empty()) throw InvalidArgument("Tape: empty tape has no output");
    return NodeId{nodes_.size() - 1};
  }
  Op op(NodeId id) const { return nodes_.at(id.index).op; }

  /// Evaluates every node; `inputs` bind the input() placeholders in creation
  /// order. Returns the output node's value.
  const Matrix& forward(const ParamStore& params, std::span<const Matrix> inputs = {}) {
    if (nodes_.empty()) throw InvalidArgument("Tape: forward on an empty tape");
    if (inputs.size() != input_count_)
      throw InvalidArgument("Tape: expected " + std::to_string(input_count_) + " inputs, got " +
                            std::to_string(inputs.size()));
    for (std::size_t i = 0; i < nodes_.size(); ++i) eval(i, params, inputs);
    forwarded_ = true;
    return nodes_.back().value;
  }

  /// Propagates `seed` (shaped like the output) back through the tape.
  /// Returns ∂(seed·output)/∂θ; adjoint() exposes non-parameter gradients.
  Grad backward(const ParamStore& params, const Matrix& seed) {
    if (!forwarded_) throw InvalidArgument("Tape: backward called before forward");
    const Node& out = nodes_.back();
    if (!seed.same_shape(out.value))
      throw ShapeError(nodes_.size() - 1, std::string(op_name(out.op)), "seed shape does not match output");
    adjoints_.assign(nodes_.size(), Matrix{});
    adjoints_.back() = seed;
    Grad grad{std::vector<double>(params.size(), 0.0)};
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      if (adjoints_[i].size() == 0 && nodes_[i].value.size() != 0) continue;  // unreached
      propagate(i, params, grad);
    }
    return grad;
  }

  /// Convenience for scalar outputs: backward with seed 1.
  Grad backward(const ParamStore& params) { return backward(params, Matrix(1, 1, 1.0)); }

  const Matrix& value(NodeId id) const { return nodes_.at(id.index).value; }

  /// Adjoint of any node after backward(); zero-shaped if the node was unreached.
  const Matrix& adjoint(NodeId id) const { return adjoints_.at(id.index); }

 private:
  struct Node {
    Op op;
    std::vector<std::size_t> inputs{};
    Matrix value{};
    std::size_t rows = 0, cols = 0;  // input placeholders
    std::size_t slot = 0;            // param slot or input ordinal
    double scalar = 1.0;
    std::vector<std::size_t> indices{};  // gather rows; max-pool argmax
    BatchNormState* bn_state = nullptr;
    bool training = true;
    std::vector<double> saved{};  // batchnorm: per-channel inverse std
    std::shared_ptr<CustomOp> custom{};
  };

  std::size_t check(NodeId id) const {
    if (id.index >= nodes_.size()) throw InvalidArgument("Tape: node id out of range");
    return id.index;
  }
  Node unary(Op op, NodeId a) {
    Node n{op};
    n.inputs = {check(a)};
    return n;
  }
  Node binary(Op op, NodeId a, NodeId b) {
    Node n{op};
    n.inputs = {check(a), check(b)};
    return n;
  }
  NodeId push(Node n) {
    nodes_.push_back(std::move(n));
    forwarded_ = false;
    return NodeId{nodes_.size() - 1};
  }

  [[noreturn]] void fail(std::size_t i, const std::string& what) const {
    throw ShapeError(i, std::string(op_name(nodes_[i].op)), what);
  }
  static std::string shape(const Matrix& m) { return std::to_string(m.rows()) + "x" + std::to_string(m.cols()); }

  void eval(std::size_t i, const ParamStore& params, std::span<const Matrix> inputs) {
    Node& n = nodes_[i];
    auto in = [&](std::size_t k) -> const Matrix& { return nodes_[n.inputs[k]].value; };
    switch (n.op) {
      case Op::kInput: {
        const Matrix& m = inputs[n.slot];
        if (m.rows() != n.rows || m.cols() != n.cols)
          fail(i, "input shape " + shape(m) + " does not match declared " + std::to_string(n.rows) + "x" +
                      std::to_string(n.cols));
        n.value = m;
        break;
      }
      case Op::kConstant:
        break;
      case Op::kParam:
        if (n.slot >= params.layout().size()) fail(i, "parameter slot out of range");
        n.value = params.matrix(n.slot);
        break;
      case Op::kMatMul: {
        const Matrix &a = in(0), &b = in(1);
        if (a.cols() != b.rows()) fail(i, "inner dimension mismatch " + shape(a) + " * " + shape(b));
        n.value = Matrix(a.rows(), b.cols());
        detail::gemm_acc(a, b, n.value);
        break;
      }
      case Op::kAdd: {
        const Matrix &a = in(0), &b = in(1);
        n.value = a;
        if (a.same_shape(b)) {
          for (std::size_t k = 0; k < a.size(); ++k) n.value.data()[k] += b.data()[k];
        } else if (b.rows() == 1 && b.cols() == a.cols()) {
          for (std::size_t r = 0; r < a.rows(); ++r) {
            double* o = n.value.row(r);
            for (std::size_t c = 0; c < a.cols(); ++c) o[c] += b.data()[c];
          }
        } else {
          fail(i, "cannot add " + shape(a) + " and " + shape(b));
        }
        break;
      }
      case Op::kRelu:
        n.value = in(0);
        for (double& v : n.value.data()) v = v < 0.0 ? 0.0 : v;  // NaN passes through
        break;
      case Op::kTanh:
        n.value = in(0);
        for (double& v : n.value.data()) v = std::tanh(v);
        break;
      case Op::kConcatCols: {
        const Matrix &a = in(0), &b = in(1);
        if (a.rows() != b.rows()) fail(i, "row mismatch " + shape(a) + " | " + shape(b));
        n.value = Matrix(a.rows(), a.cols() + b.cols());
        for (std::size_t r = 0; r < a.rows(); ++r) {
          std::copy(a.row(r), a.row(r) + a.cols(), n.value.row(r));
          std::copy(b.row(r), b.row(r) + b.cols(), n.value.row(r) + a.cols());
        }
        break;
      }
      case Op::kMaxPoolRows: {
        const Matrix& a = in(0);
        if (a.rows() == 0) fail(i, "max-pool over zero rows");
        n.value = Matrix(1, a.cols());
        n.indices.assign(a.cols(), 0);
        for (std::size_t c = 0; c < a.cols(); ++c) n.value(0, c) = a(0, c);
        for (std::size_t r = 1; r < a.rows(); ++r) {
          const double* ar = a.row(r);
          for (std::size_t c = 0; c < a.cols(); ++c) {
            if (ar[c] > n.value(0, c)) {
              n.value(0, c) = ar[c];
              n.indices[c] = r;
            }
          }
        }
        break;
      }
      case Op::kBatchNorm:
        eval_batch_norm(i);
        break;
      case Op::kGatherRows: {
        const Matrix& a = in(0);
        n.value = Matrix(n.indices.size(), a.cols());
        for (std::size_t r = 0; r < n.indices.size(); ++r) {
          if (n.indices[r] >= a.rows()) fail(i, "gather index " + std::to_string(n.indices[r]) + " out of range");
          std::copy(a.row(n.indices[r]), a.row(n.indices[r]) + a.cols(), n.value.row(r));
        }
        break;
      }
      case Op::kSqDistRows: {
        const Matrix &a = in(0), &b = in(1);
        if (!a.same_shape(b)) fail(i, "shape mismatch " + shape(a) + " vs " + shape(b));
        n.value = Matrix(a.rows(), 1);
        for (std::size_t r = 0; r < a.rows(); ++r) {
          double s = 0.0;
          for (std::size_t c = 0; c < a.cols(); ++c) {
            const double d = a(r, c) - b(r, c);
            s += d * d;
          }
          n.value(r, 0) = s;
        }
        break;
      }
      case Op::kSum: {
        double s = 0.0;
        for (double v : in(0).data()) s += v;
        n.value = Matrix(1, 1, s);
        break;
      }
      case Op::kScale:
        n.value = in(0);
        for (double& v : n.value.data()) v *= n.scalar;
        break;
      case Op::kCustom: {
        std::vector<const Matrix*> ptrs;
        for (auto k : n.inputs) ptrs.push_back(&nodes_[k].value);
        n.value = n.custom->forward(ptrs);
        break;
      }
    }
  }

  void eval_batch_norm(std::size_t i) {
    Node& n = nodes_[i];
    const Matrix& x = nodes_[n.inputs[0]].value;
    const Matrix& gamma = nodes_[n.inputs[1]].value;
    const Matrix& beta = nodes_[n.inputs[2]].value;
    const std::size_t rows = x.rows(), c = x.cols();
    if (gamma.size() != c || beta.size() != c) fail(i, "gamma/beta size does not match channel count");
    if (rows == 0) fail(i, "batch-norm over zero rows");
    const double eps = n.bn_state ? n.bn_state->eps : 1e-5;
    if (n.bn_state && n.bn_state->running_mean.size() != c) fail(i, "running statistics size mismatch");
    std::vector<double> mean(c, 0.0), var(c, 0.0);
    if (n.training) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t k = 0; k < c; ++k) mean[k] += x(r, k);
      for (auto& m : mean) m /= static_cast<double>(rows);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t k = 0; k < c; ++k) {
          const double d = x(r, k) - mean[k];
          var[k] += d * d;
        }
      for (auto& v : var) v /= static_cast<double>(rows);
      if (n.bn_state) {
        const double mom = n.bn_state->momentum;
        for (std::size_t k = 0; k < c; ++k) {
          n.bn_state->running_mean[k] = mom * n.bn_state->running_mean[k] + (1.0 - mom) * mean[k];
          n.bn_state->running_var[k] = mom * n.bn_state->running_var[k] + (1.0 - mom) * var[k];
        }
      }
    } else {
      mean = n.bn_state->running_mean;
      var = n.bn_state->running_var;
    }
    n.saved.resize(2 * c);
    for (std::size_t k = 0; k < c; ++k) {
      n.saved[k] = 1.0 / std::sqrt(var[k] + eps);
      n.saved[c + k] = mean[k];
    }
    n.value = Matrix(rows, c);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t k = 0; k < c; ++k)
        n.value(r, k) = gamma.data()[k] * (x(r, k) - mean[k]) * n.saved[k] + beta.data()[k];
  }

  Matrix& adj(std::size_t k) {
    Matrix& a = adjoints_[k];
    if (a.size() == 0) a = Matrix(nodes_[k].value.rows(), nodes_[k].value.cols());
    return a;
  }

  void propagate(std::size_t i, const ParamStore& params, Grad& grad) {
    Node& n = nodes_[i];
    const Matrix& d = adjoints_[i];
    auto in = [&](std::size_t k) -> const Matrix& { return nodes_[n.inputs[k]].value; };
    switch (n.op) {
      case Op::kInput:
      case Op::kConstant:
        break;
      case Op::kParam: {
        const auto& s = params.slot(n.slot);
        for (std::size_t k = 0; k < s.size(); ++k) grad.d_values[s.offset + k] += d.data()[k];
        break;
      }
      case Op::kMatMul: {
        detail::gemm_abt_acc(d, in(1), adj(n.inputs[0]));
        detail::gemm_atb_acc(in(0), d, adj(n.inputs[1]));
        break;
      }
      case Op::kAdd: {
        Matrix& da = adj(n.inputs[0]);
        for (std::size_t k = 0; k < d.size(); ++k) da.data()[k] += d.data()[k];
        Matrix& db = adj(n.inputs[1]);
        if (db.size() == d.size()) {
          for (std::size_t k = 0; k < d.size(); ++k) db.data()[k] += d.data()[k];
        } else {
          for (std::size_t r = 0; r < d.rows(); ++r)
            for (std::size_t c = 0; c < d.cols(); ++c) db.data()[c] += d(r, c);
        }
        break;
      }
      case Op::kRelu: {
        Matrix& da = adj(n.inputs[0]);
        const Matrix& x = in(0);
        for (std::size_t k = 0; k < d.size(); ++k)
          if (!(x.data()[k] <= 0.0)) da.data()[k] += d.data()[k];
        break;
      }
      case Op::kTanh: {
        Matrix& da = adj(n.inputs[0]);
        for (std::size_t k = 0; k < d.size(); ++k) {
          const double y = n.value.data()[k];
          da.data()[k] += d.data()[k] * (1.0 - y * y);
        }
        break;
      }
      case Op::kConcatCols: {
        Matrix& da = adj(n.inputs[0]);
        Matrix& db = adj(n.inputs[1]);
        const std::size_t ca = da.cols(), cb = db.cols();
        for (std::size_t r = 0; r < d.rows(); ++r) {
          for (std::size_t c = 0; c < ca; ++c) da(r, c) += d(r, c);
          for (std::size_t c = 0; c < cb; ++c) db(r, c) += d(r, ca + c);
        }
        break;
      }
      case Op::kMaxPoolRows: {
        Matrix& da = adj(n.inputs[0]);
        for (std::size_t c = 0; c < d.cols(); ++c) da(n.indices[c], c) += d(0, c);
        break;
      }
      case Op::kBatchNorm:
        propagate_batch_norm(i);
        break;
      case Op::kGatherRows: {
        Matrix& da = adj(n.inputs[0]);
        for (std::size_t r = 0; r < n.indices.size(); ++r)
          for (std::size_t c = 0; c < d.cols(); ++c) da(n.indices[r], c) += d(r, c);
        break;
      }
      case Op::kSqDistRows: {
        Matrix& da = adj(n.inputs[0]);
        Matrix& db = adj(n.inputs[1]);
        const Matrix &a = in(0), &b = in(1);
        for (std::size_t r = 0; r < a.rows(); ++r)
          for (std::size_t c = 0; c < a.cols(); ++c) {
            const double g = 2.0 * (a(r, c) - b(r, c)) * d(r, 0);
            da(r, c) += g;
            db(r, c) -= g;
          }
        break;
      }
      case Op::kSum: {
        Matrix& da = adj(n.inputs[0]);
        for (double& v : da.data()) v += d(0, 0);
        break;
      }
      case Op::kScale: {
        Matrix& da = adj(n.inputs[0]);
        for (std::size_t k = 0; k < d.size(); ++k) da.data()[k] += n.scalar * d.data()[k];
        break;
      }
      case Op::kCustom: {
        std::vector<const Matrix*> ins;
        std::vector<Matrix*> dins;
        for (auto k : n.inputs) {
          ins.push_back(&nodes_[k].value);
          dins.push_back(&adj(k));
        }
        n.custom->backward(ins, n.value, d, dins);
        break;
      }
    }
  }

  void propagate_batch_norm(std::size_t i) {
    Node& n = nodes_[i];
    const Matrix& d = adjoints_[i];
    const Matrix& x = nodes_[n.inputs[0]].value;
    const Matrix& gamma = nodes_[n.inputs[1]].value;
    const std::size_t rows = x.rows(), c = x.cols();
    Matrix& dx = adj(n.inputs[0]);
    Matrix& dg = adj(n.inputs[1]);
    Matrix& db = adj(n.inputs[2]);
    const double* inv_std = n.saved.data();
    const double* mean = n.saved.data() + c;
    for (std::size_t k = 0; k < c; ++k) {
      double sum_d = 0.0, sum_dx_hat = 0.0;
      for (std::size_t r = 0; r < rows; ++r) {
        const double xhat = (x(r, k) - mean[k]) * inv_std[k];
        sum_d += d(r, k);
        sum_dx_hat += d(r, k) * xhat;
      }
      dg.data()[k] += sum_dx_hat;
      db.data()[k] += sum_d;
      const double g = gamma.data()[k];
      if (n.training) {
        const double m = static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r) {
          const double xhat = (x(r, k) - mean[k]) * inv_std[k];
          dx(r, k) += g * inv_std[k] / m * (m * d(r, k) - sum_d - xhat * sum_dx_hat);
        }
      } else {
        for (std::size_t r = 0; r < rows; ++r) dx(r, k) += g * inv_std[k] * d(r, k);
      }
    }
  }

  std::vector<Node> nodes_;
  std::vector<Matrix> adjoints_;
  std::size_t input_count_ = 0;
  bool forwarded_ = false;
};

/// Central-difference gradient of `loss` at `params`, one evaluation pair per
/// coordinate. Test oracle for backward().
inline Grad finite_diff_grad(const std::function<double(const ParamStore&)>& loss, const ParamStore& params,
                             double h) {
  if (!(h > 0.0)) throw InvalidArgument("finite_diff_grad: h must be positive");
  Grad g{std::vector<double>(params.size(), 0.0)};
  ParamStore work = params;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const double orig = work.values()[k];
    work.values()[k] = orig + h;
    const double up = loss(work);
    work.values()[k] = orig - h;
    const double down = loss(work);
    work.values()[k] = orig;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw NumericError("finite_diff_grad: non-finite loss at coordinate " + std::to_string(k));
    g.d_values[k] = (up - down) / (2.0 * h);
  }
  return g;
}

}  // namespace atlas::diff
