#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "pmmrec/tape.hpp"

namespace pmmrec {

struct AdamWConfig {
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 0.0;  // global-norm clipping; 0 disables it

  void validate() const {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be > 0");
    if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw std::invalid_argument("beta1 must lie in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw std::invalid_argument("beta2 must lie in [0, 1)");
    if (!(eps > 0.0)) throw std::invalid_argument("adam_eps must be > 0");
    if (clip_norm < 0.0) throw std::invalid_argument("clip_norm must be >= 0");
  }
};

struct StepReport {
  bool applied = false;
  double grad_norm = 0.0;
  std::string rejected_reason;  // set when !applied
};

/// AdamW with bias-corrected moments and decoupled weight decay:
///   p ← p − lr·m̂/(√v̂ + ε) − lr·wd·p
/// Parameters with trainable == false are never touched.
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(AdamWConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  const AdamWConfig& config() const noexcept { return cfg_; }
  std::uint64_t steps() const noexcept { return step_; }

  /// `params` must be the same list, in the same order, on every call.
  StepReport step(const std::vector<Parameter*>& params) {
    StepReport report;
    ensure_state(params);
    double sq = 0.0;
    for (const Parameter* p : params) {
      if (!p->trainable) continue;
      for (double g : p->grad.values()) {
        if (!std::isfinite(g)) {
          report.rejected_reason = "non-finite gradient in " + p->name;
          return report;
        }
        sq += g * g;
      }
    }
    report.grad_norm = std::sqrt(sq);
    const double clip = cfg_.clip_norm > 0.0 && report.grad_norm > cfg_.clip_norm
                            ? cfg_.clip_norm / report.grad_norm
                            : 1.0;
    ++step_;
    const double t = static_cast<double>(step_);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
    const double lr = cfg_.learning_rate, wd = cfg_.weight_decay;
    for (std::size_t i = 0; i < params.size(); ++i) {
      Parameter* p = params[i];
      if (!p->trainable) continue;
      auto w = p->value.values();
      auto g = p->grad.values();
      auto m = first_[i].values();
      auto v = second_[i].values();
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double gk = g[k] * clip;
        m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * gk;
        v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * gk * gk;
        const double m_hat = m[k] / bc1;
        const double v_hat = v[k] / bc2;
        w[k] = w[k] - lr * (m_hat / (std::sqrt(v_hat) + cfg_.eps)) - lr * wd * w[k];
      }
    }
    report.applied = true;
    return report;
  }

  const Tensor& first_moment(std::size_t i) const { return first_.at(i); }
  const Tensor& second_moment(std::size_t i) const { return second_.at(i); }

 private:
  void ensure_state(const std::vector<Parameter*>& params) {
    if (first_.empty()) {
      for (const Parameter* p : params) {
        first_.emplace_back(p->value.shape());
        second_.emplace_back(p->value.shape());
      }
      return;
    }
    if (first_.size() != params.size()) {
      throw std::invalid_argument("optimizer: parameter list changed size between steps");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (first_[i].shape() != params[i]->value.shape()) {
        throw ShapeError("optimizer: moment shape " + shape_string(first_[i].shape()) +
                         " does not match parameter " + params[i]->name + " " +
                         shape_string(params[i]->value.shape()));
      }
    }
  }

  AdamWConfig cfg_;
  std::uint64_t step_ = 0;
  std::vector<Tensor> first_;
  std::vector<Tensor> second_;
};

}  // namespace pmmrec
