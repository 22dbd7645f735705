#pragma once

#include <cstdint>

#include <Eigen/Dense>

#include "mhl/model.hpp"

namespace mhl {

/// Linear warmup from 0 to `peak` over warmup_steps, then cosine decay to
/// peak * min_ratio at total_steps.
struct LrSchedule {
  double peak = 5e-4;
  std::int64_t warmup_steps = 10'000;
  std::int64_t total_steps = 100'000;
  double min_ratio = 0.0;

  double at(std::int64_t step) const;
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double grad_clip = 1.0;  // global L2 norm; <= 0 disables clipping
};

struct StepReport {
  double lr = 0.0;
  double grad_norm = 0.0;  // before clipping
  bool clipped = false;
};

/// Adam with decoupled weight decay over a flat parameter vector.
class AdamW {
 public:
  AdamW() = default;
  AdamW(std::size_t n_params, AdamWConfig cfg);

  /// Clips `grad` in place and applies one update with learning rate `lr`.
  /// A non-finite gradient aborts the step (nothing is modified) and throws
  /// a numeric error naming the offending tensor.
  StepReport step(Eigen::VectorXd& params, Eigen::VectorXd& grad, double lr, const ParamLayout& layout);

  std::int64_t step_count() const { return steps_; }
  const AdamWConfig& config() const { return cfg_; }
  Eigen::VectorXd& first_moment() { return m_; }
  Eigen::VectorXd& second_moment() { return v_; }
  const Eigen::VectorXd& first_moment() const { return m_; }
  const Eigen::VectorXd& second_moment() const { return v_; }
  void set_step_count(std::int64_t s) { steps_ = s; }

 private:
  AdamWConfig cfg_;
  Eigen::VectorXd m_, v_;
  std::int64_t steps_ = 0;
};

}  // namespace mhl
