// Three-stage training: (I) projection-only modality-text pretraining,
// (II) gating + LoRA training with lambda = 0, (III) disagreement-aware
// fine-tuning on Algorithm-1-perturbed batches with the entropy regularizer
// active. Frozen groups are hash-checked across each stage.
#pragma once

#include "quartf/perturb/perturb.hpp"
#include "quartf/pipeline/checkpoint.hpp"

#include <cmath>
#include <set>

namespace quartf::pipeline {

struct StageConfig {
  std::string stage = "II";  // "I", "II", "III"
  std::vector<std::string> trainable;
  std::vector<std::string> frozen;
  double lambda = 0.0;
  quart::ContextMode context_mode = quart::ContextMode::gated;
  Conditioning conditioning = Conditioning::on_c;
  decoder::RegSign reg_sign = decoder::RegSign::as_written;
  std::map<std::string, double> lr;  // per trainable group
  AdamWConfig adamw;                 // includes weight_decay
  Index steps = 0;
  Index batch = 16;
  std::uint64_t seed = 1;
  std::optional<perturb::PerturbationSpec> perturb_spec;  // stage III only

  void validate() const {
    if (stage != "I" && stage != "II" && stage != "III") throw ConfigError("stage must be I, II or III");
    if (steps < 0 || batch < 1) throw ConfigError("stage: steps must be >= 0 and batch >= 1");
    adamw.validate();
    std::set<std::string> t(trainable.begin(), trainable.end());
    std::set<std::string> f(frozen.begin(), frozen.end());
    for (const auto& g : t)
      if (f.count(g)) throw ConfigError("group '" + g + "' is both trainable and frozen");
    for (const auto& g : parameter_groups())
      if (!t.count(g) && !f.count(g)) throw ConfigError("group '" + g + "' is neither trainable nor frozen");
    if (t.size() + f.size() != parameter_groups().size()) throw ConfigError("unknown parameter group in stage config");
    const std::set<std::string> proj{"proj_video", "proj_audio", "proj_sensor"};
    const std::set<std::string> quart_lora{"quart", "lora"};
    if (stage == "I" && t != proj) throw ConfigError("stage I trains exactly the projection groups");
    if ((stage == "II" || stage == "III") && t != quart_lora)
      throw ConfigError("stage " + stage + " trains exactly {quart, lora}");
    if (stage == "I" || stage == "II") {
      if (lambda != 0.0) throw ConfigError("lambda must be 0 in stages I and II");
    } else {
      if (lambda < 0.0) throw ConfigError("lambda must be >= 0");
      if (!perturb_spec) throw ConfigError("stage III requires a perturbation spec");
    }
    if (context_mode == quart::ContextMode::raw) {
      if (conditioning != Conditioning::on_z) throw ConfigError("raw mode requires conditioning on_Z");
      if (lambda != 0.0) throw ConfigError("raw mode requires lambda == 0");
    }
    for (const auto& g : trainable)
      if (!lr.count(g)) throw ConfigError("no learning rate for trainable group '" + g + "'");
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["stage"] = stage;
    j["trainable"] = trainable;
    j["frozen"] = frozen;
    j["lambda"] = lambda;
    j["context_mode"] = quart::context_mode_name(context_mode);
    j["conditioning"] = conditioning_name(conditioning);
    j["reg_sign"] = decoder::reg_sign_name(reg_sign);
    j["lr"] = lr;
    j["weight_decay"] = adamw.weight_decay;
    j["beta1"] = adamw.beta1;
    j["beta2"] = adamw.beta2;
    j["eps"] = adamw.eps;
    j["clip_norm"] = adamw.clip_norm;
    j["steps"] = steps;
    j["batch"] = batch;
    j["seed"] = seed;
    if (perturb_spec) {
      nlohmann::json p;
      p["sigma_rel"] = perturb_spec->sigma_rel;
      p["seed"] = perturb_spec->seed;
      j["perturb"] = p;
    }
    return j;
  }
};

// Spec'd desk-scale defaults per stage.
inline StageConfig default_stage_config(const std::string& stage, std::uint64_t seed) {
  StageConfig c;
  c.stage = stage;
  c.seed = seed;
  const std::vector<std::string> proj{"proj_video", "proj_audio", "proj_sensor"};
  const std::vector<std::string> quart_lora{"quart", "lora"};
  std::set<std::string> trainable;
  if (stage == "I") {
    c.trainable = proj;
    c.steps = 500;
    c.lr = {{"proj_video", 1e-3}, {"proj_audio", 1e-3}, {"proj_sensor", 1e-3}};
  } else if (stage == "II") {
    c.trainable = quart_lora;
    c.steps = 2000;
    c.lr = {{"quart", 3e-3}, {"lora", 3e-3}};
  } else if (stage == "III") {
    c.trainable = quart_lora;
    c.steps = 1000;
    c.lambda = 0.001;
    c.reg_sign = decoder::RegSign::sparsity;
    c.lr = {{"quart", 3e-3}, {"lora", 3e-3}};
    perturb::PerturbationSpec spec;
    spec.seed = derive_seed(seed, "stage3-perturb");
    c.perturb_spec = spec;
  } else {
    throw ConfigError("unknown stage '" + stage + "'");
  }
  for (const auto& g : parameter_groups()) {
    if (std::find(c.trainable.begin(), c.trainable.end(), g) == c.trainable.end()) c.frozen.push_back(g);
  }
  return c;
}

struct StepMetrics {
  Index step = 0;
  double loss_quart = 0;
  double loss_reg = 0;
  double loss_total = 0;
  double alpha_entropy = std::numeric_limits<double>::quiet_NaN();  // NaN when no alpha
  std::array<double, 3> modality_mass{std::numeric_limits<double>::quiet_NaN(),
                                      std::numeric_limits<double>::quiet_NaN(),
                                      std::numeric_limits<double>::quiet_NaN()};

  nlohmann::json to_json(const std::string& stage) const {
    nlohmann::json j;
    j["step"] = step;
    j["stage"] = stage;
    j["loss_quart"] = loss_quart;
    j["loss_reg"] = loss_reg;
    j["loss_total"] = loss_total;
    if (std::isnan(alpha_entropy)) {
      j["alpha_entropy"] = nullptr;
      j["modality_mass"] = nullptr;
    } else {
      j["alpha_entropy"] = alpha_entropy;
      j["modality_mass"] = modality_mass;
    }
    return j;
  }
};

template <typename Scalar>
struct RunResult {
  Checkpoint<Scalar> checkpoint;
  std::vector<StepMetrics> metrics;
};

template <typename Scalar>
struct ResumeState {
  std::map<std::string, typename AdamW<Scalar>::Moments> moments;
  std::uint64_t opt_step = 0;
  Index start_step = 0;
};

namespace detail {

inline std::uint64_t hash_bytes(std::uint64_t h, const void* data, size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ULL;
  }
  return h;
}

template <typename Scalar>
std::uint64_t hash_group(std::vector<NamedParam<Scalar>>& params, const std::string& group) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (auto& p : params) {
    if (p.group != group) continue;
    h = hash_bytes(h, p.tensor.value().data(), sizeof(Scalar) * static_cast<size_t>(p.tensor.value().size()));
  }
  return h;
}

template <typename Scalar>
double alpha_entropy_of(const Matrix<Scalar>& alpha) {
  double h = 0;
  for (Index j = 0; j < alpha.size(); ++j) {
    const double a = static_cast<double>(alpha(0, j));
    if (a > 0) h -= a * std::log(a);
  }
  return h;
}

}  // namespace detail

template <typename Scalar>
RunResult<Scalar> run_stage(Model<Scalar>& model, const StageConfig& cfg, const streams::Dataset& data,
                            const ResumeState<Scalar>* resume = nullptr) {
  cfg.validate();
  model.config.validate();
  if (data.samples.empty()) throw InputError("run_stage: dataset is empty");

  const std::set<std::string> trainable_set(cfg.trainable.begin(), cfg.trainable.end());
  model.set_projection_trainable(trainable_set.count("proj_video") != 0, trainable_set.count("proj_audio") != 0,
                                 trainable_set.count("proj_sensor") != 0);

  auto all_params = model.named_params();
  std::vector<NamedParam<Scalar>> trainable;
  for (auto& p : all_params)
    if (trainable_set.count(p.group)) trainable.push_back(p);

  std::map<std::string, std::uint64_t> frozen_hash_before;
  for (const auto& g : cfg.frozen) frozen_hash_before[g] = detail::hash_group(all_params, g);

  AdamWConfig ocfg = cfg.adamw;
  AdamW<Scalar> optimizer(ocfg);
  Index start_step = 0;
  if (resume) {
    optimizer.moments() = resume->moments;
    optimizer.set_step_count(resume->opt_step);
    start_step = resume->start_step;
  }

  ForwardOptions fopt;
  fopt.mode = cfg.context_mode;
  fopt.conditioning = cfg.conditioning;

  RunResult<Scalar> result;
  const Index n = static_cast<Index>(data.samples.size());

  for (Index step = start_step; step < cfg.steps; ++step) {
    for (auto& p : trainable) p.tensor.zero_grad();

    StepMetrics metrics;
    metrics.step = step;
    Tensor<Scalar> batch_loss;
    double entropy_sum = 0;
    std::array<double, 3> mass_sum{0, 0, 0};
    Index alpha_count = 0;

    // Stage I runs sequential modality phases: video, then audio, then
    // sensor; only the active phase's projection head receives updates.
    const auto phase = static_cast<size_t>(std::min<Index>(2, step * 3 / std::max<Index>(1, cfg.steps)));
    std::vector<NamedParam<Scalar>>* step_params = &trainable;
    std::vector<NamedParam<Scalar>> phase_params;
    if (cfg.stage == "I") {
      const std::string active = std::string("proj_") + streams::modality_name(streams::kModalities[phase]);
      for (auto& p : trainable)
        if (p.group == active) phase_params.push_back(p);
      step_params = &phase_params;
    }

    for (Index b = 0; b < cfg.batch; ++b) {
      const auto idx = static_cast<size_t>(derive_seed(cfg.seed, "batch", static_cast<std::uint64_t>(step),
                                                       static_cast<std::uint64_t>(b)) %
                                           static_cast<std::uint64_t>(n));
      const auto& sample = data.samples[idx];
      Tensor<Scalar> loss;
      if (cfg.stage == "I") {
        loss = caption_loss(model, sample, streams::kModalities[phase]);
        metrics.loss_quart += loss.item() / static_cast<double>(cfg.batch);
      } else {
        streams::MultimodalSample perturbed;
        const streams::MultimodalSample* input = &sample;
        if (cfg.stage == "III") {
          auto spec = *cfg.perturb_spec;
          spec.seed = derive_seed(spec.seed, "step", static_cast<std::uint64_t>(step));
          perturbed = perturb::generate_mismatch(sample, spec, data.samples).first;
          input = &perturbed;
        }
        auto breakdown = qa_loss(model, *input, fopt, static_cast<Scalar>(cfg.lambda), cfg.reg_sign);
        loss = breakdown.total;
        metrics.loss_quart += breakdown.lq.item() / static_cast<double>(cfg.batch);
        metrics.loss_reg += breakdown.lr.item() / static_cast<double>(cfg.batch);
        if (breakdown.alpha) {
          entropy_sum += detail::alpha_entropy_of(*breakdown.alpha);
          auto mass = quart::modality_mass(*breakdown.alpha, breakdown.block_len);
          for (int k = 0; k < 3; ++k) mass_sum[static_cast<size_t>(k)] += mass[static_cast<size_t>(k)];
          ++alpha_count;
        }
      }
      batch_loss = b == 0 ? loss : add(batch_loss, loss);
    }

    batch_loss = scale(batch_loss, Scalar(1) / static_cast<Scalar>(cfg.batch));
    metrics.loss_total = batch_loss.item();
    if (alpha_count > 0) {
      metrics.alpha_entropy = entropy_sum / static_cast<double>(alpha_count);
      for (auto& m : mass_sum) m /= static_cast<double>(alpha_count);
      metrics.modality_mass = mass_sum;
    }

    backward(batch_loss);
    optimizer.step(*step_params, cfg.lr);
    result.metrics.push_back(metrics);
  }

  for (const auto& g : cfg.frozen) {
    if (detail::hash_group(all_params, g) != frozen_hash_before[g])
      throw ContractError("freeze violation: group '" + g + "' changed during stage " + cfg.stage);
  }

  CheckpointMeta meta;
  meta.stage = cfg.stage;
  meta.master_seed = cfg.seed;
  meta.next_step = static_cast<std::uint64_t>(cfg.steps);
  meta.stage_config = cfg.to_json();
  if (!result.metrics.empty()) {
    const auto& last = result.metrics.back();
    meta.metrics_summary = {{"loss_quart", last.loss_quart},
                            {"loss_reg", last.loss_reg},
                            {"loss_total", last.loss_total}};
  }
  result.checkpoint = checkpoint_from_model(model, std::move(meta), &optimizer);
  return result;
}

}  // namespace quartf::pipeline
