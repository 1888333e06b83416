// Tiny decoder-only autoregressive model conditioned on the fused context
// (one prefix row in gated mode, L rows in raw mode), plus the training
// losses and LoRA adapters for the later stages.
#pragma once

#include "quartf/numcore/ops.hpp"
#include "quartf/streams/generator.hpp"
#include "quartf/streams/encoder.hpp"

namespace quartf::decoder {

struct DecoderConfig {
  Index layers = 2;
  Index heads = 2;
  Index embed_dim = 32;  // E
  Index vocab = 64;      // V
  Index max_answer_len = 4;

  Index head_dim() const { return embed_dim / heads; }
  Index mlp_hidden() const { return 4 * embed_dim; }

  void validate() const {
    if (layers < 1 || heads < 1 || embed_dim < 1) throw ConfigError("decoder: dims must be positive");
    if (embed_dim % heads != 0) throw ConfigError("decoder: embed_dim must be divisible by heads");
    if (vocab < streams::vocab::kMinVocab)
      throw ConfigError("decoder: vocab must be >= " + std::to_string(streams::vocab::kMinVocab));
    if (max_answer_len < 1) throw ConfigError("decoder: max_answer_len must be >= 1");
  }
};

template <typename Scalar>
struct DecoderLayer {
  Tensor<Scalar> ln1_gain, ln1_bias;
  Tensor<Scalar> wq, wk, wv, wo;  // E x E
  Tensor<Scalar> ln2_gain, ln2_bias;
  Tensor<Scalar> mlp_w1;  // E x 4E
  Tensor<Scalar> mlp_w2;  // 4E x E
};

template <typename Scalar>
struct DecoderParams {
  DecoderConfig config;
  Tensor<Scalar> embedding;  // V x E
  std::vector<DecoderLayer<Scalar>> layers;
  Tensor<Scalar> final_gain, final_bias;
  Tensor<Scalar> head;  // E x V

  static DecoderParams init(const DecoderConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    DecoderParams p;
    p.config = cfg;
    Rng rng(seed);
    const Scalar s = Scalar(1) / std::sqrt(static_cast<Scalar>(cfg.embed_dim));
    p.embedding = randn<Scalar>(rng, {cfg.vocab, cfg.embed_dim}, s, true);
    for (Index l = 0; l < cfg.layers; ++l) {
      DecoderLayer<Scalar> layer;
      layer.ln1_gain = Tensor<Scalar>::full({cfg.embed_dim}, Scalar(1), true);
      layer.ln1_bias = Tensor<Scalar>::zeros({cfg.embed_dim}, true);
      layer.wq = randn<Scalar>(rng, {cfg.embed_dim, cfg.embed_dim}, s, true);
      layer.wk = randn<Scalar>(rng, {cfg.embed_dim, cfg.embed_dim}, s, true);
      layer.wv = randn<Scalar>(rng, {cfg.embed_dim, cfg.embed_dim}, s, true);
      layer.wo = randn<Scalar>(rng, {cfg.embed_dim, cfg.embed_dim}, s, true);
      layer.ln2_gain = Tensor<Scalar>::full({cfg.embed_dim}, Scalar(1), true);
      layer.ln2_bias = Tensor<Scalar>::zeros({cfg.embed_dim}, true);
      layer.mlp_w1 = randn<Scalar>(rng, {cfg.embed_dim, cfg.mlp_hidden()}, s, true);
      layer.mlp_w2 = randn<Scalar>(rng, {cfg.mlp_hidden(), cfg.embed_dim},
                                   Scalar(1) / std::sqrt(static_cast<Scalar>(cfg.mlp_hidden())), true);
      p.layers.push_back(std::move(layer));
    }
    p.final_gain = Tensor<Scalar>::full({cfg.embed_dim}, Scalar(1), true);
    p.final_bias = Tensor<Scalar>::zeros({cfg.embed_dim}, true);
    p.head = randn<Scalar>(rng, {cfg.embed_dim, cfg.vocab}, s, true);
    return p;
  }
};

// Low-rank additive adapter: adapted(x) = x W + scaling * (x A) B.
// B starts at zero so adaptation is exactly neutral until trained.
template <typename Scalar>
struct LoraAdapter {
  Tensor<Scalar> a;  // in x r
  Tensor<Scalar> b;  // r x out
  Index rank = 0;
  Scalar scaling = Scalar(0);

  static LoraAdapter init(Index in, Index out, Index rank, std::uint64_t seed) {
    if (rank < 1 || rank > std::min(in, out)) throw ConfigError("lora: rank must be in [1, min(in, out)]");
    Rng rng(seed);
    LoraAdapter ad;
    ad.rank = rank;
    ad.scaling = Scalar(1) / static_cast<Scalar>(rank);
    ad.a = randn<Scalar>(rng, {in, rank}, Scalar(1) / std::sqrt(static_cast<Scalar>(in)), true);
    ad.b = Tensor<Scalar>::zeros({rank, out}, true);
    return ad;
  }
};

// Adapters for the four attention projections of every decoder layer.
template <typename Scalar>
struct LoraSet {
  std::vector<std::array<LoraAdapter<Scalar>, 4>> layers;  // q, k, v, o
  Index rank = 0;

  static LoraSet init(const DecoderConfig& cfg, Index rank, std::uint64_t seed) {
    LoraSet set;
    set.rank = rank;
    for (Index l = 0; l < cfg.layers; ++l) {
      std::array<LoraAdapter<Scalar>, 4> ads;
      for (int k = 0; k < 4; ++k)
        ads[static_cast<size_t>(k)] = LoraAdapter<Scalar>::init(
            cfg.embed_dim, cfg.embed_dim, rank, derive_seed(seed, "lora", static_cast<std::uint64_t>(l), k));
      set.layers.push_back(std::move(ads));
    }
    return set;
  }
};

template <typename Scalar>
Tensor<Scalar> adapted_matmul(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const LoraAdapter<Scalar>* ad) {
  auto base = matmul(x, w);
  if (!ad) return base;
  return add(base, scale(matmul(matmul(x, ad->a), ad->b), ad->scaling));
}

// merged = base + scaling * A B; inference with the merged matrix matches the
// adapter path.
template <typename Scalar>
Matrix<Scalar> lora_merge(const Tensor<Scalar>& base, const LoraAdapter<Scalar>& ad) {
  return base.value() + ad.scaling * (ad.a.value() * ad.b.value());
}

namespace detail {

template <typename Scalar>
Tensor<Scalar> causal_block(const Tensor<Scalar>& x, const DecoderLayer<Scalar>& layer, const DecoderConfig& cfg,
                            const std::array<const LoraAdapter<Scalar>*, 4>& ads, const Matrix<Scalar>& causal_keep) {
  auto h = layer_norm(x, layer.ln1_gain, layer.ln1_bias);
  auto q = adapted_matmul(h, layer.wq, ads[0]);
  auto k = adapted_matmul(h, layer.wk, ads[1]);
  auto v = adapted_matmul(h, layer.wv, ads[2]);
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(cfg.head_dim()));
  std::vector<Tensor<Scalar>> heads;
  for (Index hd = 0; hd < cfg.heads; ++hd) {
    std::vector<Index> cols(static_cast<size_t>(cfg.head_dim()));
    for (Index j = 0; j < cfg.head_dim(); ++j) cols[static_cast<size_t>(j)] = hd * cfg.head_dim() + j;
    auto qh = gather_cols(q, cols);
    auto kh = gather_cols(k, cols);
    auto vh = gather_cols(v, cols);
    auto scores = masked_fill(scale(matmul(qh, transpose(kh)), inv_sqrt), causal_keep, Scalar(-1e30));
    heads.push_back(matmul(softmax(scores, 1), vh));
  }
  auto attn = adapted_matmul(concat<Scalar>(heads, 1), layer.wo, ads[3]);
  auto x1 = add(x, attn);
  auto m = layer_norm(x1, layer.ln2_gain, layer.ln2_bias);
  auto mlp = matmul(relu(matmul(m, layer.mlp_w1)), layer.mlp_w2);
  return add(x1, mlp);
}

}  // namespace detail

// Causal logits at answer positions. Input layout is
//   [context row(s)] ++ [query embeddings] ++ [answer prefix embeddings]
// and the returned rows correspond one-to-one to the prefix positions, so a
// prefix of [BOA, y_1 .. y_{T-1}] yields T rows predicting y_1 .. y_T.
template <typename Scalar>
Tensor<Scalar> decode_logits(const Tensor<Scalar>& context, const std::vector<int>& query_tokens,
                             const std::vector<int>& answer_prefix, const DecoderParams<Scalar>& params,
                             const LoraSet<Scalar>* adapters = nullptr) {
  params.config.validate();
  if (context.rank() != 2 || context.shape()[1] != params.config.embed_dim)
    throw DimensionError("decode_logits: context must be rows of width E, got " + shape_str(context.shape()));
  if (answer_prefix.empty())
    return Tensor<Scalar>::zeros({0, params.config.vocab});
  if (adapters && static_cast<Index>(adapters->layers.size()) != params.config.layers)
    throw ConfigError("decode_logits: adapter set does not cover every decoder layer");

  std::vector<Tensor<Scalar>> rows{context};
  if (!query_tokens.empty()) rows.push_back(embedding_lookup(params.embedding, query_tokens));
  rows.push_back(embedding_lookup(params.embedding, answer_prefix));
  auto x0 = concat<Scalar>(rows, 0);
  const Index total = x0.shape()[0];
  auto pe = Tensor<Scalar>::from_value({total, params.config.embed_dim},
                                       streams::sinusoidal_positions<Scalar>(total, params.config.embed_dim));
  auto x = add(x0, pe);

  Matrix<Scalar> causal_keep = Matrix<Scalar>::Zero(total, total);
  for (Index i = 0; i < total; ++i)
    for (Index j = 0; j <= i; ++j) causal_keep(i, j) = Scalar(1);

  for (Index l = 0; l < params.config.layers; ++l) {
    std::array<const LoraAdapter<Scalar>*, 4> ads{nullptr, nullptr, nullptr, nullptr};
    if (adapters)
      for (int k = 0; k < 4; ++k) ads[static_cast<size_t>(k)] = &adapters->layers[static_cast<size_t>(l)][static_cast<size_t>(k)];
    x = detail::causal_block(x, params.layers[static_cast<size_t>(l)], params.config, ads, causal_keep);
  }
  x = layer_norm(x, params.final_gain, params.final_bias);
  auto logits = matmul(x, params.head);
  const Index prefix_len = static_cast<Index>(answer_prefix.size());
  return slice_rows(logits, total - prefix_len, total);
}

// L_QuART = -(1/T) sum log p(y_t | y_<t, C): autoregressive cross-entropy.
template <typename Scalar>
Tensor<Scalar> loss_quart(const Tensor<Scalar>& logits, const std::vector<int>& targets) {
  if (targets.empty()) throw InputError("loss_quart: needs at least one target");
  return cross_entropy_mean(logits, targets);
}

// L_reg = sum_j alpha_j log alpha_j, with 0 log 0 := 0. Value lies in
// [-log L, 0] for simplex input.
template <typename Scalar>
Tensor<Scalar> loss_reg(const Tensor<Scalar>& alpha) {
  if (alpha.rank() != 1) throw DimensionError("loss_reg: alpha must be rank-1");
  if (alpha.value().minCoeff() < Scalar(0)) throw ContractError("loss_reg: alpha has negative entries");
  if (std::abs(static_cast<double>(alpha.value().sum()) - 1.0) > 1e-6)
    throw ContractError("loss_reg: alpha must sum to 1");
  return sum_all(xlogx(alpha));
}

enum class RegSign { as_written, sparsity };

inline RegSign reg_sign_from_name(const std::string& s) {
  if (s == "as_written") return RegSign::as_written;
  if (s == "sparsity") return RegSign::sparsity;
  throw ConfigError("unknown reg_sign '" + s + "'");
}

inline const char* reg_sign_name(RegSign s) { return s == RegSign::as_written ? "as_written" : "sparsity"; }

// Total objective: L_QuART + lambda * sign * L_reg. The printed formula is
// sign = +1 (as_written); sparsity flips it so minimization sharpens alpha.
template <typename Scalar>
Tensor<Scalar> loss_total(const Tensor<Scalar>& lq, const Tensor<Scalar>& lreg, Scalar lambda,
                          RegSign sign = RegSign::as_written) {
  if (lambda < Scalar(0)) throw ContractError("loss_total: lambda must be >= 0");
  const Scalar signed_lambda = sign == RegSign::as_written ? lambda : -lambda;
  return add(lq, scale(lreg, signed_lambda));
}

// Greedy decoding: iterative argmax with ties broken toward the lowest token
// id; stops at the end-of-answer token or max_len.
template <typename Scalar>
std::vector<int> greedy_decode(const Tensor<Scalar>& context, const std::vector<int>& query_tokens,
                               const DecoderParams<Scalar>& params, Index max_len,
                               const LoraSet<Scalar>* adapters = nullptr) {
  if (max_len < 1) throw InputError("greedy_decode: max_len must be >= 1");
  std::vector<int> prefix{streams::vocab::kBoa};
  std::vector<int> out;
  while (static_cast<Index>(out.size()) < max_len) {
    auto logits = decode_logits(context, query_tokens, prefix, params, adapters);
    Index best = 0;
    logits.value().row(logits.rows() - 1).maxCoeff(&best);  // first max = lowest id
    const int token = static_cast<int>(best);
    out.push_back(token);
    if (token == streams::vocab::kEoa) break;
    prefix.push_back(token);
  }
  return out;
}

}  // namespace quartf::decoder
