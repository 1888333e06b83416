// Synthetic synchronized video/audio/sensor streams with a known ground-truth
// relevant modality. Each scenario family plants a class-specific pattern
// into the relevant streams and a pattern for a *different* answer class into
// the others, so streams genuinely disagree rather than merely lacking signal.
#pragma once

#include "quartf/common.hpp"

#include <algorithm>
#include <array>
#include <limits>
#include <set>

namespace quartf::streams {

enum class Modality { video = 0, audio = 1, sensor = 2 };

inline constexpr std::array<Modality, 3> kModalities = {Modality::video, Modality::audio, Modality::sensor};

inline const char* modality_name(Modality m) {
  switch (m) {
    case Modality::video: return "video";
    case Modality::audio: return "audio";
    case Modality::sensor: return "sensor";
  }
  return "?";
}

inline Modality modality_from_name(const std::string& s) {
  for (Modality m : kModalities)
    if (s == modality_name(m)) return m;
  throw ConfigError("unknown modality '" + s + "'");
}

// Scenario catalog. Every family has one relevant-modality set; the answer is
// recoverable from the relevant streams alone by construction.
enum class Scenario {
  visual_only_event = 0,
  audio_only_event = 1,
  motion_only_event = 2,
  impact_event = 3,  // audio + sensor agree on the answer
};

inline constexpr std::array<Scenario, 4> kScenarios = {Scenario::visual_only_event, Scenario::audio_only_event,
                                                       Scenario::motion_only_event, Scenario::impact_event};

inline const char* scenario_name(Scenario s) {
  switch (s) {
    case Scenario::visual_only_event: return "visual_only_event";
    case Scenario::audio_only_event: return "audio_only_event";
    case Scenario::motion_only_event: return "motion_only_event";
    case Scenario::impact_event: return "impact_event";
  }
  return "?";
}

inline Scenario scenario_from_name(const std::string& s) {
  for (Scenario sc : kScenarios)
    if (s == scenario_name(sc)) return sc;
  throw ConfigError("unknown scenario '" + s + "'");
}

inline std::set<Modality> relevant_modalities(Scenario s) {
  switch (s) {
    case Scenario::visual_only_event: return {Modality::video};
    case Scenario::audio_only_event: return {Modality::audio};
    case Scenario::motion_only_event: return {Modality::sensor};
    case Scenario::impact_event: return {Modality::audio, Modality::sensor};
  }
  return {};
}

// Shared token vocabulary (the tiny decoder plays the tokenizer role).
namespace vocab {
inline constexpr int kNull = 0;       // greedy-decode tie-break filler
inline constexpr int kBoa = 1;        // begin-of-answer
inline constexpr int kEoa = 2;        // end-of-answer
inline constexpr int kClassBase = 3;  // 4 answer classes: ids 3..6
inline constexpr int kNumClasses = 4;
inline constexpr int kQWhat = 7;
inline constexpr int kQScenarioBase = 8;  // ids 8..11
inline constexpr int kQDescribe = 12;     // stage-I caption query
inline constexpr int kMinVocab = 13;
}  // namespace vocab

struct ModalityDims {
  Index frames = 0;      // T_m
  Index native_dim = 0;  // D_m
  Index tokens = 0;      // L_m
  double sample_rate = 0.0;  // informational
};

struct StreamConfig {
  ModalityDims video{32, 24, 8, 8.0};
  ModalityDims audio{24, 16, 6, 16.0};
  ModalityDims sensor{16, 6, 4, 50.0};
  double noise_sigma = 0.3;     // base stream noise
  double signal_amplitude = 3.0;  // planted template strength

  const ModalityDims& dims(Modality m) const {
    switch (m) {
      case Modality::video: return video;
      case Modality::audio: return audio;
      case Modality::sensor: return sensor;
    }
    throw ConfigError("bad modality");
  }

  void validate() const {
    for (Modality m : kModalities) {
      const auto& d = dims(m);
      if (d.frames < 1 || d.native_dim < 1 || d.tokens < 1)
        throw ConfigError(std::string("stream dims for ") + modality_name(m) + " must be positive");
      if (d.native_dim < vocab::kNumClasses)
        throw ConfigError(std::string("native dim of ") + modality_name(m) + " must be >= " +
                          std::to_string(vocab::kNumClasses) + " to hold the class templates");
      if (d.frames < d.tokens)
        throw ConfigError(std::string(modality_name(m)) + ": frames must be >= tokens");
    }
    if (noise_sigma < 0 || signal_amplitude <= 0) throw ConfigError("noise/amplitude must be positive");
  }
};

struct RawStream {
  Modality modality;
  Matrix<double> frames;  // T_m x D_m, generation is always in 64-bit
  double sample_rate = 0.0;
};

struct MultimodalSample {
  std::uint64_t sample_id = 0;
  std::uint64_t seed = 0;
  Scenario scenario{};
  RawStream video, audio, sensor;
  std::vector<int> query_tokens;
  std::vector<int> answer_tokens;
  std::set<Modality> relevant;       // ground truth, nonempty
  int answer_class = 0;              // 0..3
  std::array<int, 3> planted_class;  // what each stream actually encodes

  const RawStream& stream(Modality m) const {
    switch (m) {
      case Modality::video: return video;
      case Modality::audio: return audio;
      case Modality::sensor: return sensor;
    }
    throw ConfigError("bad modality");
  }
  RawStream& stream(Modality m) {
    return const_cast<RawStream&>(static_cast<const MultimodalSample*>(this)->stream(m));
  }
};

// Four orthonormal class templates per modality, fixed for the lifetime of
// the generator definition (independent of dataset seeds).
inline Matrix<double> class_templates(Modality m, Index native_dim) {
  Rng rng(derive_seed(0x5154524D504C5453ULL, "templates", static_cast<std::uint64_t>(m)));
  Matrix<double> t(vocab::kNumClasses, native_dim);
  for (Index c = 0; c < vocab::kNumClasses; ++c) {
    for (Index j = 0; j < native_dim; ++j) t(c, j) = rng.normal();
    for (Index prev = 0; prev < c; ++prev) t.row(c) -= t.row(c).dot(t.row(prev)) * t.row(prev);
    t.row(c) /= t.row(c).norm();
  }
  return t;
}

namespace detail {

inline RawStream gen_stream(Modality m, const ModalityDims& d, double noise_sigma, double amplitude,
                            int planted_class, std::uint64_t stream_seed) {
  RawStream s;
  s.modality = m;
  s.sample_rate = d.sample_rate;
  s.frames.resize(d.frames, d.native_dim);
  Rng rng(stream_seed);
  for (Index t = 0; t < d.frames; ++t)
    for (Index j = 0; j < d.native_dim; ++j) s.frames(t, j) = rng.normal() * noise_sigma;
  // Burst window covering half the frames at a seeded offset.
  const Index burst_len = std::max<Index>(1, d.frames / 2);
  const Index max_start = d.frames - burst_len;
  const Index start = max_start > 0 ? static_cast<Index>(rng.uniform_int(static_cast<std::uint64_t>(max_start) + 1)) : 0;
  const Matrix<double> templates = class_templates(m, d.native_dim);
  for (Index t = start; t < start + burst_len; ++t) s.frames.row(t) += amplitude * templates.row(planted_class);
  return s;
}

}  // namespace detail

inline MultimodalSample gen_sample(std::uint64_t seed, Scenario scenario, const StreamConfig& cfg) {
  cfg.validate();
  MultimodalSample s;
  s.seed = seed;
  s.scenario = scenario;
  s.relevant = relevant_modalities(scenario);
  s.answer_class = static_cast<int>(derive_seed(seed, "class") % vocab::kNumClasses);
  for (Modality m : kModalities) {
    const auto mi = static_cast<size_t>(m);
    int planted = s.answer_class;
    if (!s.relevant.count(m)) {
      // Distractor streams carry a signal for a different answer.
      planted = (s.answer_class + 1 +
                 static_cast<int>(derive_seed(seed, "distractor", mi) % (vocab::kNumClasses - 1))) %
                vocab::kNumClasses;
    }
    s.planted_class[mi] = planted;
    s.stream(m) = detail::gen_stream(m, cfg.dims(m), cfg.noise_sigma, cfg.signal_amplitude, planted,
                                     derive_seed(seed, "stream", mi));
  }
  s.query_tokens = {vocab::kQWhat, vocab::kQScenarioBase + static_cast<int>(scenario)};
  s.answer_tokens = {vocab::kClassBase + s.answer_class, vocab::kEoa};
  return s;
}

// Hand-written rule: best class by peak frame correlation with the templates.
// Reading the relevant streams recovers the answer with 100% accuracy by
// construction; reading a distractor stream recovers its planted class.
inline int rule_read_class(const RawStream& stream) {
  const Matrix<double> templates = class_templates(stream.modality, stream.frames.cols());
  int best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (int c = 0; c < vocab::kNumClasses; ++c) {
    const double score = (stream.frames * templates.row(c).transpose()).maxCoeff();
    if (score > best_score) {
      best_score = score;
      best = c;
    }
  }
  return best;
}

inline int rule_answer(const MultimodalSample& s) {
  // Any relevant stream suffices; use the first by modality order.
  for (Modality m : kModalities)
    if (s.relevant.count(m)) return rule_read_class(s.stream(m));
  throw ContractError("sample has empty relevant set");
}

}  // namespace quartf::streams
