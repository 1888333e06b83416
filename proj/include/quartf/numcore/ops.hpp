// Differentiable operations over Tensor<Scalar>. Each op validates shapes,
// computes the forward value eagerly and registers its gradient rule.
//
// Conventions: no implicit broadcasting except scalar-constant * tensor
// (scale). Row vectors are rank-1 tensors stored 1xN. Reductions drop the
// reduced axis.
#pragma once

#include "quartf/numcore/tensor.hpp"

#include <limits>

namespace quartf {

// Every op with a registered gradient rule. The numcore property suite keys
// its finite-difference coverage off this list.
inline constexpr const char* kRegisteredOps[] = {
    "matmul",    "add",        "sub",        "mul",       "scale",
    "log",       "exp",        "relu",       "xlogx",     "softmax",
    "sum_axis",  "sum_all",    "mean_axis",  "mean_all",  "max_axis",
    "concat",    "transpose",  "reshape",    "slice_rows", "gather_cols",
    "embedding_lookup", "add_row_vector", "masked_fill", "layer_norm",
    "cross_entropy_mean",
};

namespace detail {

template <typename Scalar>
void require_same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* op) {
  if (!same_shape(a.shape(), b.shape()))
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename Scalar>
void require_rank2(const Tensor<Scalar>& a, const char* op) {
  if (a.rank() != 2) throw DimensionError(std::string(op) + ": expected rank-2 tensor, got " + shape_str(a.shape()));
}

}  // namespace detail

// -------------------------------------------------------------------------
// Linear algebra
// -------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  if (a.shape()[1] != b.shape()[0])
    throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Matrix<Scalar> v = a.value() * b.value();
  return Tensor<Scalar>::make_op(
      "matmul", {a.shape()[0], b.shape()[1]}, std::move(v), {a, b}, [](TensorNode<Scalar>& self) {
        const auto& g = self.grad;
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) pa.ensure_grad() += g * pb.value.transpose();
        if (pb.requires_grad) pb.ensure_grad() += pa.value.transpose() * g;
      });
}

template <typename Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& a) {
  detail::require_rank2(a, "transpose");
  Matrix<Scalar> v = a.value().transpose();
  return Tensor<Scalar>::make_op("transpose", {a.shape()[1], a.shape()[0]}, std::move(v), {a},
                                 [](TensorNode<Scalar>& self) {
                                   auto& p = *self.parents[0];
                                   if (p.requires_grad) p.ensure_grad() += self.grad.transpose();
                                 });
}

// -------------------------------------------------------------------------
// Elementwise
// -------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a, b, "add");
  Matrix<Scalar> v = a.value() + b.value();
  return Tensor<Scalar>::make_op("add", a.shape(), std::move(v), {a, b}, [](TensorNode<Scalar>& self) {
    for (int i = 0; i < 2; ++i) {
      auto& p = *self.parents[static_cast<size_t>(i)];
      if (p.requires_grad) p.ensure_grad() += self.grad;
    }
  });
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a, b, "sub");
  Matrix<Scalar> v = a.value() - b.value();
  return Tensor<Scalar>::make_op("sub", a.shape(), std::move(v), {a, b}, [](TensorNode<Scalar>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) pa.ensure_grad() += self.grad;
    if (pb.requires_grad) pb.ensure_grad() -= self.grad;
  });
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a, b, "mul");
  Matrix<Scalar> v = a.value().cwiseProduct(b.value());
  return Tensor<Scalar>::make_op("mul", a.shape(), std::move(v), {a, b}, [](TensorNode<Scalar>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) pa.ensure_grad() += self.grad.cwiseProduct(pb.value);
    if (pb.requires_grad) pb.ensure_grad() += self.grad.cwiseProduct(pa.value);
  });
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar c) {
  Matrix<Scalar> v = a.value() * c;
  return Tensor<Scalar>::make_op("scale", a.shape(), std::move(v), {a}, [c](TensorNode<Scalar>& self) {
    auto& p = *self.parents[0];
    if (p.requires_grad) p.ensure_grad() += self.grad * c;
  });
}

template <typename Scalar>
Tensor<Scalar> log(const Tensor<Scalar>& a) {
  if ((a.value().array() <= Scalar(0)).any()) throw DomainError("log: input must be strictly positive");
  Matrix<Scalar> v = a.value().array().log().matrix();
  return Tensor<Scalar>::make_op("log", a.shape(), std::move(v), {a}, [](TensorNode<Scalar>& self) {
    auto& p = *self.parents[0];
    if (p.requires_grad) p.ensure_grad() += self.grad.cwiseQuotient(p.value);
  });
}

template <typename Scalar>
Tensor<Scalar> exp(const Tensor<Scalar>& a) {
  Matrix<Scalar> v = a.value().unaryExpr([](Scalar x) { return std::exp(x); });
  return Tensor<Scalar>::make_op("exp", a.shape(), std::move(v), {a}, [](TensorNode<Scalar>& self) {
    auto& p = *self.parents[0];
    if (p.requires_grad) p.ensure_grad() += self.grad.cwiseProduct(self.value);
  });
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& a) {
  Matrix<Scalar> v = a.value().cwiseMax(Scalar(0));
  return Tensor<Scalar>::make_op("relu", a.shape(), std::move(v), {a}, [](TensorNode<Scalar>& self) {
    auto& p = *self.parents[0];
    if (p.requires_grad)
      p.ensure_grad() += self.grad.cwiseProduct((p.value.array() > Scalar(0)).template cast<Scalar>().matrix());
  });
}

// x*log(x) with the 0*log(0) := 0 convention (and gradient 0 at x == 0),
// as required by the entropy regularizer on one-hot inputs.
template <typename Scalar>
Tensor<Scalar> xlogx(const Tensor<Scalar>& a) {
  if ((a.value().array() < Scalar(0)).any()) throw DomainError("xlogx: input must be non-negative");
  Matrix<Scalar> v = a.value();
  for (Index i = 0; i < v.rows(); ++i)
    for (Index j = 0; j < v.cols(); ++j) v(i, j) = v(i, j) > Scalar(0) ? v(i, j) * std::log(v(i, j)) : Scalar(0);
  return Tensor<Scalar>::make_op("xlogx", a.shape(), std::move(v), {a}, [](TensorNode<Scalar>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.ensure_grad();
    for (Index i = 0; i < g.rows(); ++i)
      for (Index j = 0; j < g.cols(); ++j) {
        const Scalar x = p.value(i, j);
        if (x > Scalar(0)) g(i, j) += self.grad(i, j) * (std::log(x) + Scalar(1));
      }
  });
}

// -------------------------------------------------------------------------
// Softmax (max-subtraction for stability)
// -------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& a, int axis) {
  const Index rank = a.rank();
  if (rank == 0 || (rank == 1 && axis != 0) || (rank == 2 && axis != 0 && axis != 1) || rank > 2)
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for shape " + shape_str(a.shape()));
  const bool over_cols = (rank == 1) || axis == 1;
  Matrix<Scalar> v = a.value();
  auto normalize = [](auto&& vec) {
    const Scalar m = vec.maxCoeff();
    // Scalar std::exp so that extreme logits underflow to exact zero.
    vec = vec.unaryExpr([m](Scalar x) { return std::exp(x - m); });
    vec /= vec.sum();
  };
  if (over_cols) {
    for (Index i = 0; i < v.rows(); ++i) {
      auto row = v.row(i);
      normalize(row);
    }
  } else {
    for (Index j = 0; j < v.cols(); ++j) {
      auto col = v.col(j);
      normalize(col);
    }
  }
  return Tensor<Scalar>::make_op("softmax", a.shape(), std::move(v), {a},
                                 [over_cols](TensorNode<Scalar>& self) {
                                   auto& p = *self.parents[0];
                                   if (!p.requires_grad) return;
                                   auto& g = p.ensure_grad();
                                   const auto& y = self.value;
                                   const auto& gy = self.grad;
                                   if (over_cols) {
                                     for (Index i = 0; i < y.rows(); ++i) {
                                       const Scalar dot = gy.row(i).cwiseProduct(y.row(i)).sum();
                                       g.row(i) += y.row(i).cwiseProduct((gy.row(i).array() - dot).matrix());
                                     }
                                   } else {
                                     for (Index j = 0; j < y.cols(); ++j) {
                                       const Scalar dot = gy.col(j).cwiseProduct(y.col(j)).sum();
                                       g.col(j) += y.col(j).cwiseProduct((gy.col(j).array() - dot).matrix());
                                     }
                                   }
                                 });
}

// -------------------------------------------------------------------------
// Reductions (drop the reduced axis)
// -------------------------------------------------------------------------

namespace detail {

template <typename Scalar>
std::pair<Shape, bool> reduce_shape(const Tensor<Scalar>& a, int axis, const char* op) {
  const Index rank = a.rank();
  if (rank == 1) {
    if (axis != 0) throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for rank-1");
    return {Shape{}, true};  // over cols of the 1xn storage
  }
  if (rank == 2) {
    if (axis == 0) return {Shape{a.shape()[1]}, false};
    if (axis == 1) return {Shape{a.shape()[0]}, true};
  }
  throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for shape " + shape_str(a.shape()));
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& a, int axis) {
  auto [shape, over_cols] = detail::reduce_shape(a, axis, "sum_axis");
  Matrix<Scalar> v;
  if (over_cols)
    v = a.value().rowwise().sum().transpose();  // 1 x rows
  else
    v = a.value().colwise().sum();  // 1 x cols
  return Tensor<Scalar>::make_op("sum_axis", shape, std::move(v), {a}, [over_cols](TensorNode<Scalar>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.ensure_grad();
    if (over_cols) {
      for (Index i = 0; i < g.rows(); ++i) g.row(i).array() += self.grad(0, i);
    } else {
      for (Index j = 0; j < g.cols(); ++j) g.col(j).array() += self.grad(0, j);
    }
  });
}

template <typename Scalar>
Tensor<Scalar> sum_all(const Tensor<Scalar>& a) {
  Matrix<Scalar> v(1, 1);
  v(0, 0) = a.value().sum();
  return Tensor<Scalar>::make_op("sum_all", {}, std::move(v), {a}, [](TensorNode<Scalar>& self) {
    auto& p = *self.parents[0];
    if (p.requires_grad) p.ensure_grad().array() += self.grad(0, 0);
  });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& a, int axis) {
  auto [shape, over_cols] = detail::reduce_shape(a, axis, "mean_axis");
  const Scalar count = static_cast<Scalar>(over_cols ? a.value().cols() : a.value().rows());
  Matrix<Scalar> v;
  if (over_cols)
    v = (a.value().rowwise().sum() / count).transpose();
  else
    v = a.value().colwise().sum() / count;
  return Tensor<Scalar>::make_op("mean_axis", shape, std::move(v), {a},
                                 [over_cols, count](TensorNode<Scalar>& self) {
                                   auto& p = *self.parents[0];
                                   if (!p.requires_grad) return;
                                   auto& g = p.ensure_grad();
                                   if (over_cols) {
                                     for (Index i = 0; i < g.rows(); ++i) g.row(i).array() += self.grad(0, i) / count;
                                   } else {
                                     for (Index j = 0; j < g.cols(); ++j) g.col(j).array() += self.grad(0, j) / count;
                                   }
                                 });
}

template <typename Scalar>
Tensor<Scalar> mean_all(const Tensor<Scalar>& a) {
  const Scalar count = static_cast<Scalar>(a.value().size());
  Matrix<Scalar> v(1, 1);
  v(0, 0) = a.value().sum() / count;
  return Tensor<Scalar>::make_op("mean_all", {}, std::move(v), {a}, [count](TensorNode<Scalar>& self) {
    auto& p = *self.parents[0];
    if (p.requires_grad) p.ensure_grad().array() += self.grad(0, 0) / count;
  });
}

// Max over an axis; gradient routes to the first maximal element per slice.
template <typename Scalar>
Tensor<Scalar> max(const Tensor<Scalar>& a, int axis) {
  auto [shape, over_cols] = detail::reduce_shape(a, axis, "max_axis");
  const Index n = over_cols ? a.value().rows() : a.value().cols();
  Matrix<Scalar> v(1, n);
  std::vector<Index> argmax(static_cast<size_t>(n));
  for (Index s = 0; s < n; ++s) {
    Index best = 0;
    if (over_cols)
      v(0, s) = a.value().row(s).maxCoeff(&best);
    else
      v(0, s) = a.value().col(s).maxCoeff(&best);
    argmax[static_cast<size_t>(s)] = best;
  }
  return Tensor<Scalar>::make_op("max_axis", shape, std::move(v), {a},
                                 [over_cols, argmax](TensorNode<Scalar>& self) {
                                   auto& p = *self.parents[0];
                                   if (!p.requires_grad) return;
                                   auto& g = p.ensure_grad();
                                   for (Index s = 0; s < self.grad.cols(); ++s) {
                                     const Index k = argmax[static_cast<size_t>(s)];
                                     if (over_cols)
                                       g(s, k) += self.grad(0, s);
                                     else
                                       g(k, s) += self.grad(0, s);
                                   }
                                 });
}

// -------------------------------------------------------------------------
// Shape surgery
// -------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  for (const auto& p : parts) detail::require_rank2(p, "concat");
  if (axis != 0 && axis != 1) throw DimensionError("concat: axis must be 0 or 1");
  const Index fixed = axis == 0 ? parts[0].shape()[1] : parts[0].shape()[0];
  Index total = 0;
  for (const auto& p : parts) {
    const Index f = axis == 0 ? p.shape()[1] : p.shape()[0];
    if (f != fixed)
      throw DimensionError("concat: shape " + shape_str(p.shape()) + " incompatible with " +
                           shape_str(parts[0].shape()));
    total += axis == 0 ? p.shape()[0] : p.shape()[1];
  }
  Shape shape = axis == 0 ? Shape{total, fixed} : Shape{fixed, total};
  Matrix<Scalar> v(shape[0], shape[1]);
  std::vector<Index> extents;
  Index at = 0;
  for (const auto& p : parts) {
    const Index e = axis == 0 ? p.shape()[0] : p.shape()[1];
    if (axis == 0)
      v.middleRows(at, e) = p.value();
    else
      v.middleCols(at, e) = p.value();
    extents.push_back(e);
    at += e;
  }
  return Tensor<Scalar>::make_op("concat", std::move(shape), std::move(v), parts,
                                 [axis, extents](TensorNode<Scalar>& self) {
                                   Index at = 0;
                                   for (size_t i = 0; i < self.parents.size(); ++i) {
                                     auto& p = *self.parents[i];
                                     const Index e = extents[i];
                                     if (p.requires_grad) {
                                       if (axis == 0)
                                         p.ensure_grad() += self.grad.middleRows(at, e);
                                       else
                                         p.ensure_grad() += self.grad.middleCols(at, e);
                                     }
                                     at += e;
                                   }
                                 });
}

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape) + " changes element count");
  auto [r, c] = Tensor<Scalar>::storage_dims(shape);
  // Row-major storage: a reshape is a flat copy.
  Matrix<Scalar> v(r, c);
  Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>(v.data(), v.size()) =
      Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>(a.value().data(), a.value().size());
  return Tensor<Scalar>::make_op("reshape", std::move(shape), std::move(v), {a}, [](TensorNode<Scalar>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.ensure_grad();
    Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>(g.data(), g.size()) +=
        Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>(self.grad.data(), self.grad.size());
  });
}

template <typename Scalar>
Tensor<Scalar> slice_rows(const Tensor<Scalar>& a, Index begin, Index end) {
  detail::require_rank2(a, "slice_rows");
  if (begin < 0 || end < begin || end > a.shape()[0])
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") invalid for " + shape_str(a.shape()));
  Matrix<Scalar> v = a.value().middleRows(begin, end - begin);
  return Tensor<Scalar>::make_op("slice_rows", {end - begin, a.shape()[1]}, std::move(v), {a},
                                 [begin](TensorNode<Scalar>& self) {
                                   auto& p = *self.parents[0];
                                   if (p.requires_grad)
                                     p.ensure_grad().middleRows(begin, self.grad.rows()) += self.grad;
                                 });
}

template <typename Scalar>
Tensor<Scalar> gather_cols(const Tensor<Scalar>& a, const std::vector<Index>& idx) {
  detail::require_rank2(a, "gather_cols");
  for (Index j : idx)
    if (j < 0 || j >= a.shape()[1]) throw InputError("gather_cols: index " + std::to_string(j) + " out of range");
  Matrix<Scalar> v(a.shape()[0], static_cast<Index>(idx.size()));
  for (size_t k = 0; k < idx.size(); ++k) v.col(static_cast<Index>(k)) = a.value().col(idx[k]);
  return Tensor<Scalar>::make_op("gather_cols", {a.shape()[0], static_cast<Index>(idx.size())}, std::move(v), {a},
                                 [idx](TensorNode<Scalar>& self) {
                                   auto& p = *self.parents[0];
                                   if (!p.requires_grad) return;
                                   auto& g = p.ensure_grad();
                                   for (size_t k = 0; k < idx.size(); ++k)
                                     g.col(idx[k]) += self.grad.col(static_cast<Index>(k));
                                 });
}

template <typename Scalar>
Tensor<Scalar> embedding_lookup(const Tensor<Scalar>& table, const std::vector<int>& ids) {
  detail::require_rank2(table, "embedding_lookup");
  for (int id : ids)
    if (id < 0 || id >= table.shape()[0]) throw InputError("embedding_lookup: id " + std::to_string(id) + " out of range");
  Matrix<Scalar> v(static_cast<Index>(ids.size()), table.shape()[1]);
  for (size_t k = 0; k < ids.size(); ++k) v.row(static_cast<Index>(k)) = table.value().row(ids[k]);
  return Tensor<Scalar>::make_op("embedding_lookup", {static_cast<Index>(ids.size()), table.shape()[1]}, std::move(v),
                                 {table}, [ids](TensorNode<Scalar>& self) {
                                   auto& p = *self.parents[0];
                                   if (!p.requires_grad) return;
                                   auto& g = p.ensure_grad();
                                   for (size_t k = 0; k < ids.size(); ++k)
                                     g.row(ids[k]) += self.grad.row(static_cast<Index>(k));
                                 });
}

// Adds a rank-1 vector to every row of a rank-2 tensor (explicit broadcast).
template <typename Scalar>
Tensor<Scalar> add_row_vector(const Tensor<Scalar>& a, const Tensor<Scalar>& v) {
  detail::require_rank2(a, "add_row_vector");
  if (v.rank() != 1 || v.shape()[0] != a.shape()[1])
    throw DimensionError("add_row_vector: vector " + shape_str(v.shape()) + " vs matrix " + shape_str(a.shape()));
  Matrix<Scalar> out = a.value();
  out.rowwise() += v.value().row(0);
  return Tensor<Scalar>::make_op("add_row_vector", a.shape(), std::move(out), {a, v},
                                 [](TensorNode<Scalar>& self) {
                                   auto& pa = *self.parents[0];
                                   auto& pv = *self.parents[1];
                                   if (pa.requires_grad) pa.ensure_grad() += self.grad;
                                   if (pv.requires_grad) pv.ensure_grad() += self.grad.colwise().sum();
                                 });
}

// Replaces entries where keep == 0 with fill (a constant); gradient flows
// only through kept entries. Used for causal masks and padded-token masks.
template <typename Scalar>
Tensor<Scalar> masked_fill(const Tensor<Scalar>& a, const Matrix<Scalar>& keep, Scalar fill) {
  if (keep.rows() != a.value().rows() || keep.cols() != a.value().cols())
    throw DimensionError("masked_fill: mask " + std::to_string(keep.rows()) + "x" + std::to_string(keep.cols()) +
                         " vs " + shape_str(a.shape()));
  Matrix<Scalar> v = a.value();
  for (Index i = 0; i < v.rows(); ++i)
    for (Index j = 0; j < v.cols(); ++j)
      if (keep(i, j) == Scalar(0)) v(i, j) = fill;
  return Tensor<Scalar>::make_op("masked_fill", a.shape(), std::move(v), {a}, [keep](TensorNode<Scalar>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.ensure_grad();
    for (Index i = 0; i < g.rows(); ++i)
      for (Index j = 0; j < g.cols(); ++j)
        if (keep(i, j) != Scalar(0)) g(i, j) += self.grad(i, j);
  });
}

// -------------------------------------------------------------------------
// Fused neural-net ops
// -------------------------------------------------------------------------

// Row-wise layer normalization with learned gain/bias.
template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gain, const Tensor<Scalar>& bias,
                          Scalar eps = Scalar(1e-5)) {
  detail::require_rank2(x, "layer_norm");
  const Index r = x.shape()[0];
  const Index c = x.shape()[1];
  if (gain.rank() != 1 || gain.shape()[0] != c || bias.rank() != 1 || bias.shape()[0] != c)
    throw DimensionError("layer_norm: gain/bias must be rank-1 of width " + std::to_string(c));
  Matrix<Scalar> xhat(r, c);
  Eigen::Array<Scalar, Eigen::Dynamic, 1> inv_sigma(r);
  for (Index i = 0; i < r; ++i) {
    const Scalar mu = x.value().row(i).mean();
    const Scalar var = (x.value().row(i).array() - mu).square().mean();
    const Scalar inv = Scalar(1) / std::sqrt(var + eps);
    inv_sigma(i) = inv;
    xhat.row(i) = ((x.value().row(i).array() - mu) * inv).matrix();
  }
  Matrix<Scalar> v = xhat;
  for (Index i = 0; i < r; ++i)
    v.row(i) = v.row(i).cwiseProduct(gain.value().row(0)) + bias.value().row(0);
  return Tensor<Scalar>::make_op(
      "layer_norm", x.shape(), std::move(v), {x, gain, bias},
      [xhat, inv_sigma](TensorNode<Scalar>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        const auto& gy = self.grad;
        const Index r = gy.rows();
        const Scalar c = static_cast<Scalar>(gy.cols());
        if (pb.requires_grad) pb.ensure_grad() += gy.colwise().sum();
        if (pg.requires_grad) pg.ensure_grad() += gy.cwiseProduct(xhat).colwise().sum();
        if (px.requires_grad) {
          auto& gx = px.ensure_grad();
          for (Index i = 0; i < r; ++i) {
            const auto dxhat = gy.row(i).cwiseProduct(pg.value.row(0));
            const Scalar m1 = dxhat.sum() / c;
            const Scalar m2 = dxhat.cwiseProduct(xhat.row(i)).sum() / c;
            gx.row(i) += (inv_sigma(i) * (dxhat.array() - m1 - xhat.row(i).array() * m2)).matrix();
          }
        }
      });
}

// Mean over positions of -log softmax(logits)[target]: the autoregressive
// cross-entropy. Targets are token ids, one per logits row.
template <typename Scalar>
Tensor<Scalar> cross_entropy_mean(const Tensor<Scalar>& logits, const std::vector<int>& targets) {
  detail::require_rank2(logits, "cross_entropy_mean");
  const Index t_count = logits.shape()[0];
  const Index vocab = logits.shape()[1];
  if (t_count == 0 || static_cast<Index>(targets.size()) != t_count)
    throw InputError("cross_entropy_mean: need one target per logits row");
  for (int t : targets)
    if (t < 0 || t >= vocab) throw InputError("cross_entropy_mean: target id " + std::to_string(t) + " >= vocab");
  Matrix<Scalar> probs(t_count, vocab);
  Scalar total = 0;
  for (Index i = 0; i < t_count; ++i) {
    const Scalar m = logits.value().row(i).maxCoeff();
    probs.row(i) = logits.value().row(i).unaryExpr([m](Scalar x) { return std::exp(x - m); });
    const Scalar z = probs.row(i).sum();
    probs.row(i) /= z;
    total += m + std::log(z) - logits.value()(i, targets[static_cast<size_t>(i)]);
  }
  Matrix<Scalar> v(1, 1);
  v(0, 0) = total / static_cast<Scalar>(t_count);
  return Tensor<Scalar>::make_op("cross_entropy_mean", {}, std::move(v), {logits},
                                 [probs, targets](TensorNode<Scalar>& self) {
                                   auto& p = *self.parents[0];
                                   if (!p.requires_grad) return;
                                   auto& g = p.ensure_grad();
                                   const Scalar scale = self.grad(0, 0) / static_cast<Scalar>(probs.rows());
                                   for (Index i = 0; i < probs.rows(); ++i) {
                                     g.row(i) += probs.row(i) * scale;
                                     g(i, targets[static_cast<size_t>(i)]) -= scale;
                                   }
                                 });
}

// -------------------------------------------------------------------------
// Non-differentiable helpers
// -------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> randn(Rng& rng, Shape shape, Scalar stddev, bool requires_grad = false) {
  auto [r, c] = Tensor<Scalar>::storage_dims(shape);
  Matrix<Scalar> m(r, c);
  for (Index i = 0; i < r; ++i)
    for (Index j = 0; j < c; ++j) m(i, j) = static_cast<Scalar>(rng.normal()) * stddev;
  return Tensor<Scalar>::from_value(std::move(shape), std::move(m), requires_grad);
}

}  // namespace quartf
