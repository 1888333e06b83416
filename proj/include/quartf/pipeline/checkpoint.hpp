// Versioned checkpoint container:
//   "QCKP" | u32 version | u64 meta length | meta JSON | u32 param count |
//   (name, QTNS value)* | u32 moment count | (name, QTNS m, QTNS v)* |
//   u64 optimizer step | "QEND"
// Save -> load -> save is byte-identical; any mismatch is an explicit error.
#pragma once

#include "quartf/numcore/blob.hpp"
#include "quartf/pipeline/optim.hpp"

#include <filesystem>
#include <fstream>

namespace quartf::pipeline {

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

struct CheckpointMeta {
  std::string stage = "init";  // "init", "I", "II", "III"
  std::uint64_t master_seed = 0;
  std::uint64_t next_step = 0;  // completed steps within the stage
  nlohmann::json stage_config;  // StageConfig snapshot (null for init)
  nlohmann::json model_config;
  nlohmann::json metrics_summary;  // null or {"loss_total": ..., ...}

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["stage"] = stage;
    j["master_seed"] = master_seed;
    j["next_step"] = next_step;
    j["stage_config"] = stage_config;
    j["model_config"] = model_config;
    j["metrics_summary"] = metrics_summary;
    return j;
  }

  static CheckpointMeta from_json(const nlohmann::json& j) {
    CheckpointMeta m;
    m.stage = j.at("stage").get<std::string>();
    m.master_seed = j.at("master_seed").get<std::uint64_t>();
    m.next_step = j.at("next_step").get<std::uint64_t>();
    m.stage_config = j.at("stage_config");
    m.model_config = j.at("model_config");
    m.metrics_summary = j.at("metrics_summary");
    return m;
  }
};

template <typename Scalar>
struct Checkpoint {
  CheckpointMeta meta;
  std::vector<std::pair<std::string, Tensor<Scalar>>> params;               // ordered by registry
  std::vector<std::tuple<std::string, Tensor<Scalar>, Tensor<Scalar>>> moments;  // name, m, v
  std::uint64_t opt_step = 0;
};

namespace detail {

using quartf::detail::read_le;
using quartf::detail::write_le;

inline void write_name(std::ostream& os, const std::string& name) {
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
}

inline std::string read_name(std::istream& is) {
  const auto len = read_le<std::uint32_t>(is);
  std::string name(len, '\0');
  is.read(name.data(), len);
  if (!is) throw IoError("checkpoint: truncated name");
  return name;
}

}  // namespace detail

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<Scalar>& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("checkpoint: cannot open " + path.string() + " for writing");
  os.write("QCKP", 4);
  detail::write_le<std::uint32_t>(os, kCheckpointFormatVersion);
  const std::string meta = ckpt.meta.to_json().dump();
  detail::write_le<std::uint64_t>(os, meta.size());
  os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& [name, tensor] : ckpt.params) {
    detail::write_name(os, name);
    write_blob(os, tensor);
  }
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.moments.size()));
  for (const auto& [name, m, v] : ckpt.moments) {
    detail::write_name(os, name);
    write_blob(os, m);
    write_blob(os, v);
  }
  detail::write_le<std::uint64_t>(os, ckpt.opt_step);
  os.write("QEND", 4);
  if (!os) throw IoError("checkpoint: write failed");
}

template <typename Scalar>
Checkpoint<Scalar> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "QCKP", 4) != 0) throw IoError("checkpoint: bad magic");
  const auto version = detail::read_le<std::uint32_t>(is);
  if (version != kCheckpointFormatVersion)
    throw IoError("checkpoint: format version " + std::to_string(version) + " unsupported (expected " +
                  std::to_string(kCheckpointFormatVersion) + ")");
  Checkpoint<Scalar> ckpt;
  const auto meta_len = detail::read_le<std::uint64_t>(is);
  std::string meta(meta_len, '\0');
  is.read(meta.data(), static_cast<std::streamsize>(meta_len));
  if (!is) throw IoError("checkpoint: truncated metadata");
  ckpt.meta = CheckpointMeta::from_json(nlohmann::json::parse(meta));
  const auto nparams = detail::read_le<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < nparams; ++i) {
    auto name = detail::read_name(is);
    ckpt.params.emplace_back(std::move(name), read_blob<Scalar>(is));
  }
  const auto nmoments = detail::read_le<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < nmoments; ++i) {
    auto name = detail::read_name(is);
    auto m = read_blob<Scalar>(is);
    auto v = read_blob<Scalar>(is);
    ckpt.moments.emplace_back(std::move(name), std::move(m), std::move(v));
  }
  ckpt.opt_step = detail::read_le<std::uint64_t>(is);
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "QEND", 4) != 0) throw IoError("checkpoint: truncated file (missing footer)");
  return ckpt;
}

template <typename Scalar>
Checkpoint<Scalar> checkpoint_from_model(Model<Scalar>& model, CheckpointMeta meta,
                                         AdamW<Scalar>* optimizer = nullptr) {
  Checkpoint<Scalar> ckpt;
  meta.model_config = model.config.to_json();
  ckpt.meta = std::move(meta);
  for (auto& p : model.named_params()) ckpt.params.emplace_back(p.name, p.tensor.detach());
  if (optimizer) {
    for (auto& [name, slot] : optimizer->moments()) {
      ckpt.moments.emplace_back(name,
                                Tensor<Scalar>::from_value({slot.m.rows(), slot.m.cols()}, slot.m),
                                Tensor<Scalar>::from_value({slot.v.rows(), slot.v.cols()}, slot.v));
    }
    ckpt.opt_step = optimizer->step_count();
  }
  return ckpt;
}

// Loads checkpoint values into the model in place. The parameter sets must
// match exactly; anything else is a config mismatch, reported loudly.
template <typename Scalar>
void apply_checkpoint(const Checkpoint<Scalar>& ckpt, Model<Scalar>& model) {
  auto params = model.named_params();
  if (ckpt.params.size() != params.size())
    throw IoError("checkpoint: parameter count " + std::to_string(ckpt.params.size()) + " does not match model (" +
                  std::to_string(params.size()) + ")");
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& [name, tensor] = ckpt.params[i];
    if (name != params[i].name) throw IoError("checkpoint: parameter '" + name + "' does not match model layout");
    if (tensor.shape() != params[i].tensor.shape())
      throw IoError("checkpoint: shape mismatch for '" + name + "'");
    params[i].tensor.mutable_value() = tensor.value();
  }
}

// Restores optimizer moments saved in the checkpoint.
template <typename Scalar>
void apply_moments(const Checkpoint<Scalar>& ckpt, AdamW<Scalar>& optimizer) {
  optimizer.moments().clear();
  for (const auto& [name, m, v] : ckpt.moments) {
    typename AdamW<Scalar>::Moments slot;
    slot.m = m.value();
    slot.v = v.value();
    optimizer.moments()[name] = std::move(slot);
  }
  optimizer.set_step_count(ckpt.opt_step);
}

}  // namespace quartf::pipeline
