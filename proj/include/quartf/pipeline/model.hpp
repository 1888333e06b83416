// The full desk-scale model: frozen encoders, trainable projections, the
// gating module, the tiny decoder and its LoRA adapters, addressable as named
// parameter groups for freezing, optimization and checkpointing.
#pragma once

#include "quartf/decoder/decoder.hpp"
#include "quartf/quart/quart.hpp"
#include "quartf/streams/dataset.hpp"

#include <json.hpp>

namespace quartf::pipeline {

using streams::Modality;
using streams::MultimodalSample;

inline const std::vector<std::string>& parameter_groups() {
  static const std::vector<std::string> groups{"enc_video",  "enc_audio",  "enc_sensor",
                                               "proj_video", "proj_audio", "proj_sensor",
                                               "quart",      "decoder",    "lora"};
  return groups;
}

struct ModelConfig {
  streams::StreamConfig stream;
  Index enc_dim = 16;
  Index proj_hidden = 32;
  Index embed_dim = 32;
  Index quart_heads = 2;
  quart::AlphaPool alpha_pool = quart::AlphaPool::mean;
  Index dec_layers = 2;
  Index dec_heads = 2;
  Index vocab = 64;
  Index max_answer_len = 4;
  Index lora_rank = 8;
  decoder::RegSign reg_sign = decoder::RegSign::as_written;

  quart::QuartConfig quart_config() const {
    quart::QuartConfig q;
    q.embed_dim = embed_dim;
    q.heads = quart_heads;
    q.block_len = {stream.video.tokens, stream.audio.tokens, stream.sensor.tokens};
    q.pool = alpha_pool;
    return q;
  }

  decoder::DecoderConfig decoder_config() const {
    decoder::DecoderConfig d;
    d.layers = dec_layers;
    d.heads = dec_heads;
    d.embed_dim = embed_dim;
    d.vocab = vocab;
    d.max_answer_len = max_answer_len;
    return d;
  }

  void validate() const {
    stream.validate();
    quart_config().validate();
    decoder_config().validate();
    if (enc_dim < 1 || proj_hidden < 1) throw ConfigError("model: enc_dim/proj_hidden must be positive");
    if (lora_rank < 1 || lora_rank > embed_dim) throw ConfigError("model: lora_rank must be in [1, E]");
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["stream"] = streams::stream_config_to_json(stream);
    j["enc_dim"] = enc_dim;
    j["proj_hidden"] = proj_hidden;
    j["embed_dim"] = embed_dim;
    j["quart_heads"] = quart_heads;
    j["alpha_pool"] = alpha_pool == quart::AlphaPool::mean ? "mean"
                      : alpha_pool == quart::AlphaPool::last ? "last" : "max";
    j["dec_layers"] = dec_layers;
    j["dec_heads"] = dec_heads;
    j["vocab"] = vocab;
    j["max_answer_len"] = max_answer_len;
    j["lora_rank"] = lora_rank;
    j["reg_sign"] = decoder::reg_sign_name(reg_sign);
    return j;
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.stream = streams::stream_config_from_json(j.at("stream"));
    c.enc_dim = j.at("enc_dim").get<Index>();
    c.proj_hidden = j.at("proj_hidden").get<Index>();
    c.embed_dim = j.at("embed_dim").get<Index>();
    c.quart_heads = j.at("quart_heads").get<Index>();
    c.alpha_pool = quart::alpha_pool_from_name(j.at("alpha_pool").get<std::string>());
    c.dec_layers = j.at("dec_layers").get<Index>();
    c.dec_heads = j.at("dec_heads").get<Index>();
    c.vocab = j.at("vocab").get<Index>();
    c.max_answer_len = j.at("max_answer_len").get<Index>();
    c.lora_rank = j.at("lora_rank").get<Index>();
    c.reg_sign = decoder::reg_sign_from_name(j.at("reg_sign").get<std::string>());
    return c;
  }
};

template <typename Scalar>
struct NamedParam {
  std::string group;
  std::string name;
  Tensor<Scalar> tensor;
};

template <typename Scalar>
struct Model {
  ModelConfig config;
  std::array<streams::EncoderParams<Scalar>, 3> encoders;
  std::array<streams::ProjectionParams<Scalar>, 3> projections;
  quart::QuartParams<Scalar> gating;
  decoder::DecoderParams<Scalar> dec;
  decoder::LoraSet<Scalar> lora;

  static Model init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Model m;
    m.config = cfg;
    for (Modality mod : streams::kModalities) {
      const auto mi = static_cast<size_t>(mod);
      m.encoders[mi] = streams::EncoderParams<Scalar>::init(mod, cfg.stream.dims(mod).native_dim, cfg.enc_dim,
                                                            derive_seed(seed, "encoder", mi));
      m.projections[mi] = streams::ProjectionParams<Scalar>::init(cfg.enc_dim, cfg.proj_hidden, cfg.embed_dim,
                                                                  derive_seed(seed, "projection", mi));
    }
    m.gating = quart::QuartParams<Scalar>::init(cfg.quart_config(), derive_seed(seed, "quart"));
    m.dec = decoder::DecoderParams<Scalar>::init(cfg.decoder_config(), derive_seed(seed, "decoder"));
    m.lora = decoder::LoraSet<Scalar>::init(cfg.decoder_config(), cfg.lora_rank, derive_seed(seed, "lora"));
    return m;
  }

  // Deterministically ordered registry of every parameter tensor.
  std::vector<NamedParam<Scalar>> named_params() {
    std::vector<NamedParam<Scalar>> out;
    for (Modality mod : streams::kModalities) {
      const auto mi = static_cast<size_t>(mod);
      const std::string mn = streams::modality_name(mod);
      out.push_back({"enc_" + mn, "enc." + mn + ".weight", encoders[mi].weight});
      out.push_back({"enc_" + mn, "enc." + mn + ".bias", encoders[mi].bias});
      out.push_back({"proj_" + mn, "proj." + mn + ".w1", projections[mi].w1});
      out.push_back({"proj_" + mn, "proj." + mn + ".b1", projections[mi].b1});
      out.push_back({"proj_" + mn, "proj." + mn + ".w2", projections[mi].w2});
      out.push_back({"proj_" + mn, "proj." + mn + ".b2", projections[mi].b2});
    }
    for (Index h = 0; h < config.quart_heads; ++h) {
      const std::string hs = std::to_string(h);
      out.push_back({"quart", "quart.wq" + hs, gating.wq[static_cast<size_t>(h)]});
      out.push_back({"quart", "quart.wk" + hs, gating.wk[static_cast<size_t>(h)]});
      out.push_back({"quart", "quart.wv" + hs, gating.wv[static_cast<size_t>(h)]});
    }
    out.push_back({"quart", "quart.wo", gating.wo});
    out.push_back({"quart", "quart.wr", gating.wr});
    out.push_back({"decoder", "dec.embedding", dec.embedding});
    for (Index l = 0; l < config.dec_layers; ++l) {
      auto& layer = dec.layers[static_cast<size_t>(l)];
      const std::string p = "dec.layer" + std::to_string(l) + ".";
      out.push_back({"decoder", p + "ln1_gain", layer.ln1_gain});
      out.push_back({"decoder", p + "ln1_bias", layer.ln1_bias});
      out.push_back({"decoder", p + "wq", layer.wq});
      out.push_back({"decoder", p + "wk", layer.wk});
      out.push_back({"decoder", p + "wv", layer.wv});
      out.push_back({"decoder", p + "wo", layer.wo});
      out.push_back({"decoder", p + "ln2_gain", layer.ln2_gain});
      out.push_back({"decoder", p + "ln2_bias", layer.ln2_bias});
      out.push_back({"decoder", p + "mlp_w1", layer.mlp_w1});
      out.push_back({"decoder", p + "mlp_w2", layer.mlp_w2});
    }
    out.push_back({"decoder", "dec.final_gain", dec.final_gain});
    out.push_back({"decoder", "dec.final_bias", dec.final_bias});
    out.push_back({"decoder", "dec.head", dec.head});
    for (size_t l = 0; l < lora.layers.size(); ++l) {
      static const char* kSlots[4] = {"q", "k", "v", "o"};
      for (int k = 0; k < 4; ++k) {
        const std::string p = "lora.layer" + std::to_string(l) + "." + kSlots[k] + ".";
        out.push_back({"lora", p + "a", lora.layers[l][static_cast<size_t>(k)].a});
        out.push_back({"lora", p + "b", lora.layers[l][static_cast<size_t>(k)].b});
      }
    }
    return out;
  }

  void set_projection_trainable(bool video, bool audio, bool sensor) {
    projections[0].trainable = video;
    projections[1].trainable = audio;
    projections[2].trainable = sensor;
  }
};

// ---------------------------------------------------------------------------
// Shared forward paths
// ---------------------------------------------------------------------------

enum class Conditioning { on_z, on_c };

inline const char* conditioning_name(Conditioning c) { return c == Conditioning::on_z ? "on_Z" : "on_C"; }

inline Conditioning conditioning_from_name(const std::string& s) {
  if (s == "on_Z") return Conditioning::on_z;
  if (s == "on_C") return Conditioning::on_c;
  throw ConfigError("unknown conditioning '" + s + "'");
}

struct ForwardOptions {
  quart::ContextMode mode = quart::ContextMode::gated;
  Conditioning conditioning = Conditioning::on_c;
  std::set<Modality> masked;      // modalities replaced by zero tokens pre-assembly
  bool renormalize_alpha = true;  // masked blocks excluded from the alpha softmax
};

template <typename Scalar>
struct QaForward {
  Tensor<Scalar> context;  // decoder conditioning rows
  std::optional<quart::RelevanceScores<Scalar>> alpha;
  std::array<Index, 3> block_len{};
};

template <typename Scalar>
QaForward<Scalar> qa_forward(Model<Scalar>& model, const MultimodalSample& sample, const ForwardOptions& opt) {
  if (opt.mode == quart::ContextMode::raw && opt.conditioning == Conditioning::on_c)
    throw ConfigError("raw context mode cannot condition on C");
  std::array<streams::TokenSequence<Scalar>, 3> seqs;
  for (Modality m : streams::kModalities) {
    const auto mi = static_cast<size_t>(m);
    auto encoded = streams::encode(sample.stream(m), model.encoders[mi], model.config.stream.dims(m).tokens);
    seqs[mi] = streams::project(encoded, model.projections[mi], streams::tag_of(m));
    if (opt.masked.count(m)) {
      seqs[mi].tokens = Tensor<Scalar>::zeros(seqs[mi].tokens.shape());
      if (opt.renormalize_alpha) seqs[mi].valid_len = 0;
    }
  }
  streams::TokenSequence<Scalar> zq;
  zq.tag = streams::SeqTag::query;
  zq.tokens = embedding_lookup(model.dec.embedding, sample.query_tokens);
  zq.valid_len = static_cast<Index>(sample.query_tokens.size());

  auto fwd = quart::forward(zq, seqs[0], seqs[1], seqs[2], model.gating, opt.mode);
  QaForward<Scalar> out;
  out.block_len = fwd.assembled.block_len;
  out.alpha = std::move(fwd.alpha);
  out.context = opt.conditioning == Conditioning::on_c ? fwd.context : fwd.assembled.z;
  return out;
}

template <typename Scalar>
struct LossBreakdown {
  Tensor<Scalar> total;
  Tensor<Scalar> lq;
  Tensor<Scalar> lr;
  std::optional<Matrix<Scalar>> alpha;  // detached values for metrics
  std::array<Index, 3> block_len{};
};

template <typename Scalar>
LossBreakdown<Scalar> qa_loss(Model<Scalar>& model, const MultimodalSample& sample, const ForwardOptions& opt,
                              Scalar lambda, decoder::RegSign sign) {
  auto fwd = qa_forward(model, sample, opt);
  std::vector<int> prefix{streams::vocab::kBoa};
  prefix.insert(prefix.end(), sample.answer_tokens.begin(), sample.answer_tokens.end() - 1);
  auto logits = decoder::decode_logits(fwd.context, sample.query_tokens, prefix, model.dec, &model.lora);
  LossBreakdown<Scalar> out;
  out.block_len = fwd.block_len;
  out.lq = decoder::loss_quart(logits, sample.answer_tokens);
  if (fwd.alpha) {
    out.lr = decoder::loss_reg(fwd.alpha->alpha);
    out.alpha = fwd.alpha->alpha.value();
  } else {
    if (lambda != Scalar(0)) throw ContractError("lambda > 0 requires gated mode (no alpha available)");
    out.lr = Tensor<Scalar>::scalar(Scalar(0));
  }
  out.total = decoder::loss_total(out.lq, out.lr, lambda, sign);
  return out;
}

// Stage I supervision: caption the single modality's planted class through
// the frozen decoder, conditioning on that modality's projected tokens.
template <typename Scalar>
Tensor<Scalar> caption_loss(Model<Scalar>& model, const MultimodalSample& sample, Modality m) {
  const auto mi = static_cast<size_t>(m);
  auto encoded = streams::encode(sample.stream(m), model.encoders[mi], model.config.stream.dims(m).tokens);
  auto seq = streams::project(encoded, model.projections[mi], streams::tag_of(m));
  const int class_token = streams::vocab::kClassBase + sample.planted_class[mi];
  std::vector<int> query{streams::vocab::kQDescribe};
  std::vector<int> targets{class_token, streams::vocab::kEoa};
  std::vector<int> prefix{streams::vocab::kBoa, class_token};
  auto logits = decoder::decode_logits(seq.tokens, query, prefix, model.dec);
  return decoder::loss_quart(logits, targets);
}

}  // namespace quartf::pipeline
