// Frozen lightweight encoders and trainable projection heads, standing in for
// the pretrained per-modality encoders and their projections. Encoding
// windows a raw stream into L_m chunks and applies a fixed random linear+relu
// map; projection is a trainable two-layer MLP into the shared width E.
#pragma once

#include "quartf/numcore/ops.hpp"
#include "quartf/streams/generator.hpp"

namespace quartf::streams {

enum class SeqTag { video = 0, audio = 1, sensor = 2, query = 3 };

inline SeqTag tag_of(Modality m) { return static_cast<SeqTag>(static_cast<int>(m)); }

// One modality's token matrix plus its global positions in the concatenated
// sequence. Rows at or beyond valid_len are padding.
template <typename Scalar>
struct TokenSequence {
  SeqTag tag{};
  Tensor<Scalar> tokens;           // L x E
  std::vector<Index> positions;    // length L
  Index valid_len = 0;
};

template <typename Scalar>
struct EncoderParams {
  Modality modality{};
  Tensor<Scalar> weight;  // D_m x enc_dim, frozen after init
  Tensor<Scalar> bias;    // enc_dim, frozen

  static EncoderParams init(Modality m, Index native_dim, Index enc_dim, std::uint64_t seed) {
    Rng rng(seed);
    EncoderParams p;
    p.modality = m;
    p.weight = randn<Scalar>(rng, {native_dim, enc_dim}, Scalar(1) / std::sqrt(Scalar(native_dim)), false);
    p.bias = Tensor<Scalar>::zeros({enc_dim}, false);
    return p;
  }
};

template <typename Scalar>
struct ProjectionParams {
  Tensor<Scalar> w1;  // enc_dim x hidden
  Tensor<Scalar> b1;  // hidden
  Tensor<Scalar> w2;  // hidden x E
  Tensor<Scalar> b2;  // E
  bool trainable = true;

  static ProjectionParams init(Index enc_dim, Index hidden, Index embed_dim, std::uint64_t seed) {
    Rng rng(seed);
    ProjectionParams p;
    p.w1 = randn<Scalar>(rng, {enc_dim, hidden}, Scalar(1) / std::sqrt(Scalar(enc_dim)), true);
    p.b1 = Tensor<Scalar>::zeros({hidden}, true);
    p.w2 = randn<Scalar>(rng, {hidden, embed_dim}, Scalar(1) / std::sqrt(Scalar(hidden)), true);
    p.b2 = Tensor<Scalar>::zeros({embed_dim}, true);
    return p;
  }
};

// Uniformly windows the stream into L_m chunks (mean pool per window) and
// applies the frozen linear+relu encoder. Output is a constant leaf: no
// gradient ever flows into encoders.
template <typename Scalar>
Tensor<Scalar> encode(const RawStream& stream, const EncoderParams<Scalar>& params, Index out_tokens) {
  if (stream.modality != params.modality)
    throw InputError(std::string("encode: stream modality ") + modality_name(stream.modality) +
                     " does not match encoder " + modality_name(params.modality));
  const Index t_frames = stream.frames.rows();
  if (t_frames < out_tokens)
    throw InputError("encode: stream of " + std::to_string(t_frames) + " frames is shorter than " +
                     std::to_string(out_tokens) + " windows");
  const Index d = stream.frames.cols();
  if (d != params.weight.shape()[0])
    throw DimensionError("encode: native dim " + std::to_string(d) + " vs encoder input " +
                         std::to_string(params.weight.shape()[0]));
  // Row-at-a-time so identical windows produce bit-identical tokens.
  Matrix<Scalar> encoded(out_tokens, params.weight.shape()[1]);
  for (Index i = 0; i < out_tokens; ++i) {
    const Index begin = i * t_frames / out_tokens;
    const Index end = (i + 1) * t_frames / out_tokens;
    Eigen::Matrix<Scalar, 1, Eigen::Dynamic> pooled =
        stream.frames.middleRows(begin, end - begin).colwise().mean().template cast<Scalar>();
    encoded.row(i) = (pooled * params.weight.value() + params.bias.value().row(0)).cwiseMax(Scalar(0));
  }
  return Tensor<Scalar>::from_value({out_tokens, params.weight.shape()[1]}, std::move(encoded), false);
}

// tokens = relu(encoded . W1 + b1) . W2 + b2. Gradient reaches the projection
// parameters iff the trainable flag is set.
template <typename Scalar>
TokenSequence<Scalar> project(const Tensor<Scalar>& encoded, const ProjectionParams<Scalar>& params, SeqTag tag) {
  const Tensor<Scalar> w1 = params.trainable ? params.w1 : params.w1.detach();
  const Tensor<Scalar> b1 = params.trainable ? params.b1 : params.b1.detach();
  const Tensor<Scalar> w2 = params.trainable ? params.w2 : params.w2.detach();
  const Tensor<Scalar> b2 = params.trainable ? params.b2 : params.b2.detach();
  auto hidden = relu(add_row_vector(matmul(encoded, w1), b1));
  auto tokens = add_row_vector(matmul(hidden, w2), b2);
  TokenSequence<Scalar> seq;
  seq.tag = tag;
  seq.tokens = tokens;
  seq.valid_len = tokens.shape()[0];
  seq.positions.resize(static_cast<size_t>(seq.valid_len));
  for (Index i = 0; i < seq.valid_len; ++i) seq.positions[static_cast<size_t>(i)] = i;
  return seq;
}

// Sinusoidal positional encodings: PE(pos, 2i) = sin(pos / 10000^(2i/E)),
// PE(pos, 2i+1) = cos(pos / 10000^(2i/E)).
template <typename Scalar>
Matrix<Scalar> sinusoidal_positions(Index length, Index width) {
  Matrix<Scalar> pe(length, width);
  for (Index pos = 0; pos < length; ++pos) {
    for (Index j = 0; j < width; ++j) {
      const double exponent = static_cast<double>(2 * (j / 2)) / static_cast<double>(width);
      const double angle = static_cast<double>(pos) / std::pow(10000.0, exponent);
      pe(pos, j) = static_cast<Scalar>((j % 2 == 0) ? std::sin(angle) : std::cos(angle));
    }
  }
  return pe;
}

template <typename Scalar>
struct Assembled {
  Tensor<Scalar> z;                   // L x E, positional encodings added
  std::vector<Index> positions;       // global positions, length L
  std::array<Index, 3> block_len{};   // video, audio, sensor row counts
  std::vector<Scalar> valid;          // 1 = real token, 0 = padding, length L
};

// Concatenates video | audio | sensor rows into Z in that order and adds
// global sinusoidal positional encodings. Positions run over the whole
// concatenated sequence (no per-modality restart).
template <typename Scalar>
Assembled<Scalar> assemble(const TokenSequence<Scalar>& zv, const TokenSequence<Scalar>& za,
                           const TokenSequence<Scalar>& zs, const std::array<Index, 3>& expected_len) {
  const TokenSequence<Scalar>* seqs[3] = {&zv, &za, &zs};
  const SeqTag tags[3] = {SeqTag::video, SeqTag::audio, SeqTag::sensor};
  const Index width = zv.tokens.shape()[1];
  Assembled<Scalar> out;
  Index total = 0;
  for (int i = 0; i < 3; ++i) {
    if (seqs[i]->tag != tags[i]) throw ConfigError("assemble: sequences must arrive in video, audio, sensor order");
    const Index len = seqs[i]->tokens.shape()[0];
    if (len != expected_len[static_cast<size_t>(i)])
      throw ConfigError("assemble: block length " + std::to_string(len) + " does not match configured " +
                        std::to_string(expected_len[static_cast<size_t>(i)]));
    if (seqs[i]->tokens.shape()[1] != width) throw DimensionError("assemble: embedding widths disagree");
    out.block_len[static_cast<size_t>(i)] = len;
    total += len;
  }
  auto z0 = concat<Scalar>({zv.tokens, za.tokens, zs.tokens}, 0);
  auto pe = Tensor<Scalar>::from_value({total, width}, sinusoidal_positions<Scalar>(total, width));
  out.z = add(z0, pe);
  out.positions.resize(static_cast<size_t>(total));
  for (Index i = 0; i < total; ++i) out.positions[static_cast<size_t>(i)] = i;
  out.valid.assign(static_cast<size_t>(total), Scalar(1));
  Index at = 0;
  for (int i = 0; i < 3; ++i) {
    for (Index r = seqs[i]->valid_len; r < seqs[i]->tokens.shape()[0]; ++r)
      out.valid[static_cast<size_t>(at + r)] = Scalar(0);
    at += seqs[i]->tokens.shape()[0];
  }
  return out;
}

}  // namespace quartf::streams
