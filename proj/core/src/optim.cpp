#include "tevit/optim.hpp"

#include <cmath>

#include "tevit/common.hpp"

namespace tevit {

AdamW::AdamW(std::vector<Group> groups, AdamWConfig cfg) : cfg_(cfg) {
  if (cfg_.learning_rate < 0.0 || cfg_.weight_decay < 0.0) {
    throw ConfigError("AdamW: negative learning rate or weight decay");
  }
  for (auto& g : groups) {
    for (auto& p : g.params) {
      Slot s;
      s.param = p;
      s.lr_multiplier = g.lr_multiplier;
      s.first_moment.assign(static_cast<std::size_t>(p.numel()), 0.0);
      s.second_moment.assign(static_cast<std::size_t>(p.numel()), 0.0);
      slots_.push_back(std::move(s));
    }
  }
}

void AdamW::step() {
  for (auto& s : slots_) {
    if (!s.param.has_grad()) {
      throw ContractError("AdamW::step: parameter missing gradient");
    }
  }
  ++step_count_;
  const double t = static_cast<double>(step_count_);
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
  for (auto& s : slots_) {
    const double lr = cfg_.learning_rate * lr_scale_ * s.lr_multiplier;
    auto pv = s.param.values();
    auto gv = s.param.grad();
    for (std::size_t i = 0; i < pv.size(); ++i) {
      const double g = gv[i];
      s.first_moment[i] = cfg_.beta1 * s.first_moment[i] + (1.0 - cfg_.beta1) * g;
      s.second_moment[i] = cfg_.beta2 * s.second_moment[i] + (1.0 - cfg_.beta2) * g * g;
      const double m_hat = s.first_moment[i] / bc1;
      const double v_hat = s.second_moment[i] / bc2;
      pv[i] -= lr * cfg_.weight_decay * pv[i];
      pv[i] -= lr * m_hat / (std::sqrt(v_hat) + cfg_.epsilon);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& s : slots_) s.param.zero_grad();
}

double clip_grad_norm(std::vector<Tensor>& params, double max_norm) {
  if (max_norm <= 0.0) throw ContractError("clip_grad_norm: max_norm must be positive");
  double sq = 0.0;
  for (auto& p : params) {
    if (!p.has_grad()) throw ContractError("clip_grad_norm: parameter missing gradient");
    for (double g : p.grad()) sq += g * g;
  }
  const double total = std::sqrt(sq);
  if (total <= max_norm || total == 0.0) return 1.0;
  const double scale = max_norm / total;
  for (auto& p : params) {
    for (auto& g : p.grad()) g *= scale;
  }
  return scale;
}

}  // namespace tevit
