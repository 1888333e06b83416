// Query-conditioned cross-modal gating: multi-head attention between the
// query and the concatenated token matrix, a learned relevance projection
// producing one scalar per token, and fusion into a single context vector.
// A raw mode passes the token matrix through unweighted for the baseline
// comparison.
#pragma once

#include "quartf/numcore/ops.hpp"
#include "quartf/streams/encoder.hpp"

#include <optional>

namespace quartf::quart {

using streams::Assembled;
using streams::TokenSequence;

enum class ContextMode { raw, gated };
enum class AlphaPool { mean, last, max };

inline const char* context_mode_name(ContextMode m) { return m == ContextMode::raw ? "raw" : "gated"; }

inline ContextMode context_mode_from_name(const std::string& s) {
  if (s == "raw") return ContextMode::raw;
  if (s == "gated") return ContextMode::gated;
  throw ConfigError("unknown context mode '" + s + "'");
}

inline AlphaPool alpha_pool_from_name(const std::string& s) {
  if (s == "mean") return AlphaPool::mean;
  if (s == "last") return AlphaPool::last;
  if (s == "max") return AlphaPool::max;
  throw ConfigError("unknown alpha pool '" + s + "'");
}

struct QuartConfig {
  Index embed_dim = 32;  // E
  Index heads = 2;       // H; head width d_k = E / H
  std::array<Index, 3> block_len = {8, 6, 4};  // video, audio, sensor
  AlphaPool pool = AlphaPool::mean;

  Index head_dim() const { return embed_dim / heads; }
  Index total_tokens() const { return block_len[0] + block_len[1] + block_len[2]; }

  void validate() const {
    if (heads < 1 || embed_dim < 1) throw ConfigError("quart: heads and embed_dim must be positive");
    if (embed_dim % heads != 0)
      throw ConfigError("quart: H*d_k == E requires embed_dim divisible by heads, got E=" +
                        std::to_string(embed_dim) + " H=" + std::to_string(heads));
    for (Index b : block_len)
      if (b < 1) throw ConfigError("quart: block lengths must be positive");
  }
};

template <typename Scalar>
struct QuartParams {
  QuartConfig config;
  std::vector<Tensor<Scalar>> wq, wk, wv;  // per head, E x d_k
  Tensor<Scalar> wo;                       // (H*d_k) x E
  Tensor<Scalar> wr;                       // E x L, the relevance projection head

  static QuartParams init(const QuartConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    QuartParams p;
    p.config = cfg;
    Rng rng(seed);
    const Scalar s = Scalar(1) / std::sqrt(static_cast<Scalar>(cfg.embed_dim));
    for (Index h = 0; h < cfg.heads; ++h) {
      p.wq.push_back(randn<Scalar>(rng, {cfg.embed_dim, cfg.head_dim()}, s, true));
      p.wk.push_back(randn<Scalar>(rng, {cfg.embed_dim, cfg.head_dim()}, s, true));
      p.wv.push_back(randn<Scalar>(rng, {cfg.embed_dim, cfg.head_dim()}, s, true));
    }
    p.wo = randn<Scalar>(rng, {cfg.embed_dim, cfg.embed_dim}, s, true);
    p.wr = randn<Scalar>(rng, {cfg.embed_dim, cfg.total_tokens()}, s, true);
    return p;
  }
};

// Per-head attention weights captured for diagnostics and the separation
// property test (alpha must be able to change while these stay bit-equal).
template <typename Scalar>
struct AttendTrace {
  std::vector<Matrix<Scalar>> attention;  // per head, L_q x L
};

// M = softmax(Q K^T / sqrt(d_k)) V per head, heads concatenated and projected.
template <typename Scalar>
Tensor<Scalar> attend(const Tensor<Scalar>& zq, const Tensor<Scalar>& z, const QuartParams<Scalar>& params,
                      AttendTrace<Scalar>* trace = nullptr) {
  if (zq.rank() != 2 || zq.shape()[0] == 0) throw InputError("attend: query must have at least one row");
  if (zq.shape()[1] != params.config.embed_dim || z.shape()[1] != params.config.embed_dim)
    throw DimensionError("attend: embedding width mismatch");
  const Scalar inv_sqrt_dk = Scalar(1) / std::sqrt(static_cast<Scalar>(params.config.head_dim()));
  std::vector<Tensor<Scalar>> heads;
  for (Index h = 0; h < params.config.heads; ++h) {
    auto q = matmul(zq, params.wq[static_cast<size_t>(h)]);
    auto k = matmul(z, params.wk[static_cast<size_t>(h)]);
    auto v = matmul(z, params.wv[static_cast<size_t>(h)]);
    auto weights = softmax(scale(matmul(q, transpose(k)), inv_sqrt_dk), 1);
    if (trace) trace->attention.push_back(weights.value());
    heads.push_back(matmul(weights, v));
  }
  return matmul(concat<Scalar>(heads, 1), params.wo);
}

template <typename Scalar>
struct RelevanceScores {
  Tensor<Scalar> alpha;              // rank-1, length L, on the probability simplex
  std::array<Index, 3> block_len{};  // modality partition boundaries
};

// alpha = softmax over all L tokens of the pooled relevance logits
// S = M . W^R[:, positions]. Column lookup is keyed by each row's global
// position, and padded rows are forced to -inf before the softmax.
template <typename Scalar>
RelevanceScores<Scalar> relevance(const Tensor<Scalar>& m, const Tensor<Scalar>& wr,
                                  const std::vector<Index>& positions, const std::vector<Scalar>& valid,
                                  AlphaPool pool, const std::array<Index, 3>& block_len) {
  if (m.shape()[1] != wr.shape()[0])
    throw DimensionError("relevance: attention width " + shape_str(m.shape()) + " vs W^R " + shape_str(wr.shape()));
  if (positions.size() != valid.size())
    throw DimensionError("relevance: positions and validity mask lengths disagree");
  auto scores = matmul(m, gather_cols(wr, positions));  // L_q x L
  Tensor<Scalar> pooled;
  switch (pool) {
    case AlphaPool::mean: pooled = mean(scores, 0); break;
    case AlphaPool::last: pooled = reshape(slice_rows(scores, scores.shape()[0] - 1, scores.shape()[0]),
                                           {scores.shape()[1]}); break;
    case AlphaPool::max: pooled = max(scores, 0); break;
  }
  bool any_masked = false;
  for (Scalar v : valid) any_masked = any_masked || v == Scalar(0);
  if (any_masked) {
    Matrix<Scalar> keep(1, static_cast<Index>(valid.size()));
    for (size_t i = 0; i < valid.size(); ++i) keep(0, static_cast<Index>(i)) = valid[i];
    pooled = masked_fill(pooled, keep, Scalar(-1e30));
  }
  RelevanceScores<Scalar> out;
  out.alpha = softmax(pooled, 0);
  out.block_len = block_len;
  return out;
}

template <typename Scalar>
void check_simplex(const Matrix<Scalar>& alpha, double tol = 1e-6) {
  if (alpha.minCoeff() < Scalar(0)) throw ContractError("alpha has negative entries");
  if (std::abs(static_cast<double>(alpha.sum()) - 1.0) > tol)
    throw ContractError("alpha does not sum to 1 within tolerance");
}

template <typename Scalar>
struct FusedContext {
  Tensor<Scalar> c;  // rank-1, length E
  RelevanceScores<Scalar> scores;
};

// C = sum_j alpha_j Z_j, a convex combination of token rows.
template <typename Scalar>
FusedContext<Scalar> fuse(const RelevanceScores<Scalar>& scores, const Tensor<Scalar>& z) {
  if (scores.alpha.shape()[0] != z.shape()[0])
    throw DimensionError("fuse: alpha length " + shape_str(scores.alpha.shape()) + " vs Z " + shape_str(z.shape()));
  check_simplex(scores.alpha.value());
  FusedContext<Scalar> out;
  out.c = reshape(matmul(reshape(scores.alpha, {1, scores.alpha.shape()[0]}), z), {z.shape()[1]});
  out.scores = scores;
  return out;
}

template <typename Scalar>
struct ForwardResult {
  Tensor<Scalar> context;  // 1 x E fused row (gated) or L x E token matrix (raw)
  std::optional<RelevanceScores<Scalar>> alpha;  // present in gated mode
  Assembled<Scalar> assembled;
};

template <typename Scalar>
ForwardResult<Scalar> forward(const TokenSequence<Scalar>& zq, const TokenSequence<Scalar>& zv,
                              const TokenSequence<Scalar>& za, const TokenSequence<Scalar>& zs,
                              const QuartParams<Scalar>& params, ContextMode mode,
                              AttendTrace<Scalar>* trace = nullptr) {
  params.config.validate();
  ForwardResult<Scalar> out;
  out.assembled = streams::assemble(zv, za, zs, params.config.block_len);
  if (mode == ContextMode::raw) {
    out.context = out.assembled.z;
    return out;
  }
  auto m = attend(zq.tokens, out.assembled.z, params, trace);
  auto scores = relevance(m, params.wr, out.assembled.positions, out.assembled.valid, params.config.pool,
                          out.assembled.block_len);
  auto fused = fuse(scores, out.assembled.z);
  out.context = reshape(fused.c, {Index(1), params.config.embed_dim});
  out.alpha = std::move(fused.scores);
  return out;
}

// Block sums of alpha per modality; the relevance-mass diagnostic.
template <typename Scalar>
std::array<double, 3> modality_mass(const Matrix<Scalar>& alpha, const std::array<Index, 3>& block_len) {
  if (alpha.size() != block_len[0] + block_len[1] + block_len[2])
    throw DimensionError("modality_mass: boundaries do not partition alpha");
  std::array<double, 3> mass{};
  Index at = 0;
  for (int b = 0; b < 3; ++b) {
    double s = 0;
    for (Index i = 0; i < block_len[static_cast<size_t>(b)]; ++i) s += static_cast<double>(alpha(0, at + i));
    mass[static_cast<size_t>(b)] = s;
    at += block_len[static_cast<size_t>(b)];
  }
  return mass;
}

}  // namespace quartf::quart
