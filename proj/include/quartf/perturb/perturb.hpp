// Cross-modal mismatch generation: per modality an independent fair coin,
// then an op drawn uniformly from that modality's published set (which
// includes NoPerturbation). Ground-truth labels are never touched.
#pragma once

#include "quartf/streams/generator.hpp"

#include <optional>

namespace quartf::perturb {

using streams::Modality;
using streams::MultimodalSample;
using streams::RawStream;

enum class Op {
  no_perturbation = 0,
  add_noise = 1,
  reverse = 2,
  replace_with_irrelevant = 3,
  add_jitter = 4,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::no_perturbation: return "NoPerturbation";
    case Op::add_noise: return "AddNoise";
    case Op::reverse: return "Reverse";
    case Op::replace_with_irrelevant: return "ReplaceWithIrrelevant";
    case Op::add_jitter: return "AddJitter";
  }
  return "?";
}

inline Op op_from_name(const std::string& s) {
  for (Op op : {Op::no_perturbation, Op::add_noise, Op::reverse, Op::replace_with_irrelevant, Op::add_jitter})
    if (s == op_name(op)) return op;
  throw ConfigError("unknown perturbation op '" + s + "'");
}

struct PerturbationSpec {
  // Published sets, in algorithm order.
  std::vector<Op> audio_ops{Op::add_noise, Op::reverse, Op::replace_with_irrelevant, Op::no_perturbation};
  std::vector<Op> video_ops{Op::add_noise, Op::reverse, Op::replace_with_irrelevant, Op::no_perturbation};
  std::vector<Op> sensor_ops{Op::add_jitter, Op::replace_with_irrelevant, Op::no_perturbation};
  double sigma_rel = 1.0;  // multiplier on empirical per-channel std
  std::uint64_t seed = 0;

  const std::vector<Op>& ops(Modality m) const {
    switch (m) {
      case Modality::audio: return audio_ops;
      case Modality::video: return video_ops;
      case Modality::sensor: return sensor_ops;
    }
    throw ConfigError("bad modality");
  }

  void validate() const {
    if (sigma_rel <= 0) throw ConfigError("perturb: sigma_rel must be > 0");
    for (Modality m : {Modality::audio, Modality::video, Modality::sensor}) {
      if (ops(m).empty()) throw ConfigError("perturb: empty op set");
      if (m == Modality::sensor)
        for (Op op : ops(m))
          if (op == Op::add_noise || op == Op::reverse)
            throw ConfigError("perturb: sensor set admits AddJitter/ReplaceWithIrrelevant/NoPerturbation only");
    }
  }
};

struct ModalityRecord {
  bool coin = false;           // the if-branch outcome
  Op op = Op::no_perturbation; // chosen op when coin is true
  double sigma_used = 0.0;
  std::optional<std::uint64_t> replacement_source;
};

struct PerturbationRecord {
  std::uint64_t sample_id = 0;
  std::array<ModalityRecord, 3> modalities;  // indexed by Modality

  const ModalityRecord& record(Modality m) const { return modalities[static_cast<size_t>(m)]; }
};

// out = in + N(0, (sigma_rel * std_channel)^2) per channel. Channels with
// zero empirical std are left unchanged.
inline RawStream add_noise(const RawStream& stream, double sigma_rel, std::uint64_t seed) {
  if (sigma_rel <= 0) throw ContractError("add_noise: sigma_rel must be > 0");
  RawStream out = stream;
  const Index t = stream.frames.rows(), d = stream.frames.cols();
  Eigen::RowVectorXd mean = stream.frames.colwise().mean();
  Eigen::RowVectorXd std_ch(d);
  for (Index j = 0; j < d; ++j)
    std_ch(j) = std::sqrt((stream.frames.col(j).array() - mean(j)).square().mean());
  Rng rng(seed);
  for (Index i = 0; i < t; ++i)
    for (Index j = 0; j < d; ++j)
      if (std_ch(j) > 0) out.frames(i, j) += rng.normal() * sigma_rel * std_ch(j);
  return out;
}

inline RawStream reverse(const RawStream& stream) {
  RawStream out = stream;
  out.frames = stream.frames.colwise().reverse();
  return out;
}

// Same-modality stream from a uniformly chosen *other* sample.
inline std::pair<RawStream, std::uint64_t> replace_with_irrelevant(const RawStream& stream,
                                                                   const std::vector<MultimodalSample>& dataset,
                                                                   std::uint64_t self_id, std::uint64_t seed) {
  std::vector<const MultimodalSample*> others;
  for (const auto& s : dataset)
    if (s.sample_id != self_id) others.push_back(&s);
  if (others.empty()) throw InputError("replace_with_irrelevant: dataset must contain at least 2 samples");
  Rng rng(seed);
  const auto* pick = others[rng.uniform_int(others.size())];
  return {pick->stream(stream.modality), pick->sample_id};
}

inline RawStream add_jitter(const RawStream& stream, double sigma_rel, std::uint64_t seed) {
  return add_noise(stream, sigma_rel, seed);
}

// One master seed -> per-sample seed -> per-modality coin/op/op-param seeds,
// so results are independent of iteration order.
inline std::pair<MultimodalSample, PerturbationRecord> generate_mismatch(const MultimodalSample& sample,
                                                                         const PerturbationSpec& spec,
                                                                         const std::vector<MultimodalSample>& dataset) {
  spec.validate();
  MultimodalSample out = sample;
  PerturbationRecord record;
  record.sample_id = sample.sample_id;
  const std::uint64_t sample_seed = derive_seed(spec.seed, "sample", sample.sample_id);
  // Algorithm order: audio, video, sensor.
  for (Modality m : {Modality::audio, Modality::video, Modality::sensor}) {
    const auto mi = static_cast<size_t>(m);
    auto& rec = record.modalities[mi];
    Rng coin_rng(derive_seed(sample_seed, "coin", mi));
    rec.coin = coin_rng.coin();
    if (!rec.coin) continue;  // else-branch: stream passes through untouched
    const auto& ops = spec.ops(m);
    Rng op_rng(derive_seed(sample_seed, "op", mi));
    rec.op = ops[op_rng.uniform_int(ops.size())];
    const std::uint64_t param_seed = derive_seed(sample_seed, "opparam", mi);
    switch (rec.op) {
      case Op::no_perturbation:
        break;
      case Op::add_noise:
        rec.sigma_used = spec.sigma_rel;
        out.stream(m) = add_noise(sample.stream(m), spec.sigma_rel, param_seed);
        break;
      case Op::add_jitter:
        rec.sigma_used = spec.sigma_rel;
        out.stream(m) = add_jitter(sample.stream(m), spec.sigma_rel, param_seed);
        break;
      case Op::reverse:
        out.stream(m) = reverse(sample.stream(m));
        break;
      case Op::replace_with_irrelevant: {
        auto [replacement, source] = replace_with_irrelevant(sample.stream(m), dataset, sample.sample_id, param_seed);
        out.stream(m) = replacement;
        rec.replacement_source = source;
        break;
      }
    }
  }
  return {std::move(out), std::move(record)};
}

}  // namespace quartf::perturb
