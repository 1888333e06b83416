// AdamW with decoupled weight decay. Moments are keyed by parameter name so
// checkpoints can restore training bit-exactly.
#pragma once

#include "quartf/pipeline/model.hpp"

#include <map>

namespace quartf::pipeline {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.03;
  double clip_norm = 0.0;  // 0 disables clipping

  void validate() const {
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) throw ConfigError("adamw: betas must be in [0, 1)");
    if (eps <= 0) throw ConfigError("adamw: eps must be > 0");
    if (weight_decay < 0 || clip_norm < 0) throw ConfigError("adamw: decay/clip must be >= 0");
  }
};

template <typename Scalar>
class AdamW {
 public:
  struct Moments {
    Matrix<Scalar> m;
    Matrix<Scalar> v;
  };

  explicit AdamW(AdamWConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  std::uint64_t step_count() const { return t_; }
  void set_step_count(std::uint64_t t) { t_ = t; }
  std::map<std::string, Moments>& moments() { return slots_; }
  const AdamWConfig& config() const { return cfg_; }

  // One update over the given (trainable) parameters. Parameters without a
  // gradient are treated as zero-gradient (weight decay still applies).
  void step(std::vector<NamedParam<Scalar>>& params, const std::map<std::string, double>& group_lr) {
    ++t_;
    const Scalar b1 = static_cast<Scalar>(cfg_.beta1);
    const Scalar b2 = static_cast<Scalar>(cfg_.beta2);
    const Scalar bc1 = Scalar(1) - std::pow(b1, static_cast<Scalar>(t_));
    const Scalar bc2 = Scalar(1) - std::pow(b2, static_cast<Scalar>(t_));

    Scalar clip_scale = Scalar(1);
    if (cfg_.clip_norm > 0) {
      Scalar sq = 0;
      for (auto& p : params)
        if (p.tensor.has_grad()) sq += p.tensor.grad().squaredNorm();
      const Scalar norm = std::sqrt(sq);
      if (norm > static_cast<Scalar>(cfg_.clip_norm)) clip_scale = static_cast<Scalar>(cfg_.clip_norm) / norm;
    }

    for (auto& p : params) {
      const auto it = group_lr.find(p.group);
      if (it == group_lr.end()) throw ConfigError("adamw: no learning rate for group '" + p.group + "'");
      const Scalar lr = static_cast<Scalar>(it->second);
      auto& value = p.tensor.mutable_value();
      Matrix<Scalar> grad = p.tensor.has_grad() ? p.tensor.grad() : Matrix<Scalar>::Zero(value.rows(), value.cols());
      if (!grad.allFinite())
        throw ContractError("adamw: non-finite gradient in group '" + p.group + "' param '" + p.name + "'");
      if (clip_scale != Scalar(1)) grad *= clip_scale;

      auto& slot = slots_[p.name];
      if (slot.m.size() == 0) {
        slot.m = Matrix<Scalar>::Zero(value.rows(), value.cols());
        slot.v = Matrix<Scalar>::Zero(value.rows(), value.cols());
      }
      slot.m = b1 * slot.m + (Scalar(1) - b1) * grad;
      slot.v = b2 * slot.v + (Scalar(1) - b2) * grad.cwiseProduct(grad);
      const Matrix<Scalar> mhat = slot.m / bc1;
      const Matrix<Scalar> vhat = slot.v / bc2;
      value -= lr * (mhat.cwiseQuotient((vhat.cwiseSqrt().array() + static_cast<Scalar>(cfg_.eps)).matrix()) +
                     static_cast<Scalar>(cfg_.weight_decay) * value);
    }
  }

 private:
  AdamWConfig cfg_;
  std::map<std::string, Moments> slots_;
  std::uint64_t t_ = 0;
};

}  // namespace quartf::pipeline
