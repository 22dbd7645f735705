#include "mhl/optimizer.hpp"

#include <cmath>
#include <numbers>

#include "mhl/error.hpp"

namespace mhl {

double LrSchedule::at(std::int64_t step) const {
  if (step < 0) return 0.0;
  if (step < warmup_steps) return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
  const std::int64_t span = std::max<std::int64_t>(1, total_steps - warmup_steps);
  const double progress = std::min(1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(span));
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return peak * (min_ratio + (1.0 - min_ratio) * cosine);
}

AdamW::AdamW(std::size_t n_params, AdamWConfig cfg)
    : cfg_(cfg),
      m_(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n_params))),
      v_(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n_params))) {}

StepReport AdamW::step(Eigen::VectorXd& params, Eigen::VectorXd& grad, double lr, const ParamLayout& layout) {
  for (Eigen::Index i = 0; i < grad.size(); ++i) {
    if (!std::isfinite(grad(i))) {
      throw_numeric("non-finite gradient in parameter '" + layout.owner(static_cast<std::size_t>(i)).name + "'");
    }
  }
  StepReport rep;
  rep.lr = lr;
  rep.grad_norm = grad.norm();
  if (cfg_.grad_clip > 0.0 && rep.grad_norm > cfg_.grad_clip) {
    grad *= cfg_.grad_clip / rep.grad_norm;
    rep.clipped = true;
  }
  ++steps_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
  m_ = cfg_.beta1 * m_ + (1.0 - cfg_.beta1) * grad;
  v_ = cfg_.beta2 * v_ + (1.0 - cfg_.beta2) * grad.cwiseAbs2();
  if (cfg_.weight_decay > 0.0) params *= 1.0 - lr * cfg_.weight_decay;
  params.array() -= lr * (m_.array() / bc1) / ((v_.array() / bc2).sqrt() + cfg_.eps);
  return rep;
}

}  // namespace mhl
