// Dense tensors (rank 0..2) templated on scalar, with reverse-mode
// differentiation. Ops are free functions that append nodes to an implicit
// tape; backward() walks the recorded graph in reverse creation order.
//
// Precision is a compile-time property: a graph is Tensor<float> or
// Tensor<double> throughout, never mixed.
#pragma once

#include "quartf/common.hpp"

#include <algorithm>
#include <atomic>
#include <functional>
#include <memory>
#include <unordered_set>

namespace quartf {

namespace detail {
inline std::uint64_t next_node_seq() {
  static std::atomic<std::uint64_t> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed);
}
}  // namespace detail

template <typename Scalar>
struct TensorNode {
  Shape shape;             // logical shape, rank 0..2
  Matrix<Scalar> value;    // rank0 -> 1x1, rank1 {n} -> 1xn, rank2 {r,c} -> rxc
  Matrix<Scalar> grad;     // empty until touched; same storage dims as value
  bool requires_grad = false;
  std::uint64_t seq = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode<Scalar>>> parents;
  std::function<void(TensorNode<Scalar>&)> backward_fn;

  bool is_leaf() const { return parents.empty(); }

  Matrix<Scalar>& ensure_grad() {
    if (grad.size() == 0) grad = Matrix<Scalar>::Zero(value.rows(), value.cols());
    return grad;
  }
};

template <typename Scalar>
class Tensor {
 public:
  Tensor() = default;

  static Tensor from_value(Shape shape, Matrix<Scalar> value, bool requires_grad = false) {
    check_storage(shape, value);
    auto n = std::make_shared<TensorNode<Scalar>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    n->seq = detail::next_node_seq();
    Tensor t;
    t.n_ = std::move(n);
    t.check_finite("leaf");
    return t;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto [r, c] = storage_dims(shape);
    return from_value(std::move(shape), Matrix<Scalar>::Zero(r, c), requires_grad);
  }

  static Tensor full(Shape shape, Scalar v, bool requires_grad = false) {
    auto [r, c] = storage_dims(shape);
    return from_value(std::move(shape), Matrix<Scalar>::Constant(r, c, v), requires_grad);
  }

  static Tensor scalar(Scalar v, bool requires_grad = false) { return full({}, v, requires_grad); }

  static Tensor row(const std::vector<Scalar>& v, bool requires_grad = false) {
    Matrix<Scalar> m(1, static_cast<Index>(v.size()));
    for (Index i = 0; i < m.cols(); ++i) m(0, i) = v[static_cast<size_t>(i)];
    return from_value({static_cast<Index>(v.size())}, std::move(m), requires_grad);
  }

  bool valid() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  Index rank() const { return static_cast<Index>(n_->shape.size()); }
  Index numel() const { return shape_numel(n_->shape); }
  bool is_scalar() const { return n_->shape.empty(); }
  Index rows() const { return n_->value.rows(); }
  Index cols() const { return n_->value.cols(); }

  const Matrix<Scalar>& value() const { return n_->value; }
  // In-place mutation of a leaf (optimizer steps, finite differences).
  // Graphs recorded before the mutation are stale and must be rebuilt.
  Matrix<Scalar>& mutable_value() { return n_->value; }

  bool requires_grad() const { return n_->requires_grad; }
  bool has_grad() const { return n_->grad.size() != 0; }
  const Matrix<Scalar>& grad() const {
    if (!has_grad()) throw ContractError("grad read before any backward pass");
    return n_->grad;
  }
  void zero_grad() { n_->grad = Matrix<Scalar>::Zero(n_->value.rows(), n_->value.cols()); }

  Scalar item() const {
    if (!is_scalar()) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
    return n_->value(0, 0);
  }

  Scalar operator()(Index i) const { return n_->value(0, i); }
  Scalar operator()(Index i, Index j) const { return n_->value(i, j); }

  // Copies the value into a fresh leaf with no graph history.
  Tensor detach() const { return from_value(n_->shape, n_->value, false); }

  std::shared_ptr<TensorNode<Scalar>> node() const { return n_; }

  static std::pair<Index, Index> storage_dims(const Shape& s) {
    if (s.size() > 2) throw DimensionError("compute tensors are rank <= 2, got " + shape_str(s));
    if (s.empty()) return {1, 1};
    if (s.size() == 1) return {1, s[0]};
    return {s[0], s[1]};
  }

  void check_finite(const char* op) const {
    if (!n_->value.allFinite())
      throw ContractError(std::string("non-finite values produced by op '") + op + "'");
  }

  static Tensor make_op(const char* op, Shape shape, Matrix<Scalar> value,
                        std::vector<Tensor> inputs,
                        std::function<void(TensorNode<Scalar>&)> backward_fn,
                        bool allow_nonfinite = false) {
    check_storage(shape, value);
    auto n = std::make_shared<TensorNode<Scalar>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->op = op;
    n->seq = detail::next_node_seq();
    for (auto& in : inputs) {
      n->requires_grad = n->requires_grad || in.n_->requires_grad;
      n->parents.push_back(in.n_);
    }
    if (n->requires_grad) n->backward_fn = std::move(backward_fn);
    Tensor t;
    t.n_ = std::move(n);
    if (!allow_nonfinite) t.check_finite(op);
    return t;
  }

 private:
  static void check_storage(const Shape& shape, const Matrix<Scalar>& value) {
    auto [r, c] = storage_dims(shape);
    if (value.rows() != r || value.cols() != c)
      throw DimensionError("storage " + std::to_string(value.rows()) + "x" + std::to_string(value.cols()) +
                           " does not match shape " + shape_str(shape));
  }

  std::shared_ptr<TensorNode<Scalar>> n_;
};

// Ordered op record view of the graph below a root, for inspection/tests.
struct GraphRecord {
  std::uint64_t seq;
  std::string op;
  std::vector<std::uint64_t> inputs;
  Shape shape;
};

template <typename Scalar>
std::vector<GraphRecord> collect_graph(const Tensor<Scalar>& root) {
  std::vector<std::shared_ptr<TensorNode<Scalar>>> nodes;
  std::unordered_set<const TensorNode<Scalar>*> seen;
  std::vector<std::shared_ptr<TensorNode<Scalar>>> stack{root.node()};
  while (!stack.empty()) {
    auto n = stack.back();
    stack.pop_back();
    if (!seen.insert(n.get()).second) continue;
    nodes.push_back(n);
    for (auto& p : n->parents) stack.push_back(p);
  }
  std::sort(nodes.begin(), nodes.end(), [](const auto& a, const auto& b) { return a->seq < b->seq; });
  std::vector<GraphRecord> out;
  out.reserve(nodes.size());
  for (auto& n : nodes) {
    GraphRecord r;
    r.seq = n->seq;
    r.op = n->op;
    for (auto& p : n->parents) r.inputs.push_back(p->seq);
    r.shape = n->shape;
    out.push_back(std::move(r));
  }
  return out;
}

// Reverse pass from a scalar loss. Visits the recorded subgraph in exact
// reverse creation order (a reverse topological order by construction).
// Leaf grads accumulate additively across calls; callers zero between steps.
template <typename Scalar>
void backward(const Tensor<Scalar>& loss) {
  if (!loss.is_scalar()) throw ContractError("backward requires a scalar loss, got " + shape_str(loss.shape()));
  auto root = loss.node();
  if (!root->requires_grad) return;

  std::vector<std::shared_ptr<TensorNode<Scalar>>> nodes;
  std::unordered_set<const TensorNode<Scalar>*> seen;
  std::vector<std::shared_ptr<TensorNode<Scalar>>> stack{root};
  while (!stack.empty()) {
    auto n = stack.back();
    stack.pop_back();
    if (!n->requires_grad) continue;
    if (!seen.insert(n.get()).second) continue;
    nodes.push_back(n);
    for (auto& p : n->parents) stack.push_back(p);
  }
  std::sort(nodes.begin(), nodes.end(), [](const auto& a, const auto& b) { return a->seq > b->seq; });

  for (auto& n : nodes) {
    if (!n->is_leaf()) n->grad = Matrix<Scalar>::Zero(n->value.rows(), n->value.cols());
  }
  root->ensure_grad();
  root->grad(0, 0) += Scalar(1);

  for (auto& n : nodes) {
    if (n->backward_fn) n->backward_fn(*n);
  }
}

}  // namespace quartf
