#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tevit/tensor.hpp"

namespace tevit {

struct AdamWConfig {
  double learning_rate = 0.00025;
  double weight_decay = 0.0001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Decoupled-weight-decay Adam over parameter groups. Each group carries a
// learning-rate multiplier (backbone params train at 0.1x by default) and a
// global scale can be dropped for step decay.
class AdamW {
 public:
  struct Group {
    std::vector<Tensor> params;
    double lr_multiplier = 1.0;
  };

  AdamW(std::vector<Group> groups, AdamWConfig cfg);

  // Requires every parameter to carry a populated gradient.
  void step();
  void zero_grad();

  void set_lr_scale(double scale) { lr_scale_ = scale; }
  double lr_scale() const { return lr_scale_; }
  std::int64_t step_count() const { return step_count_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  struct Slot {
    Tensor param;
    double lr_multiplier;
    std::vector<double> first_moment;
    std::vector<double> second_moment;
  };
  std::vector<Slot> slots_;
  AdamWConfig cfg_;
  double lr_scale_ = 1.0;
  std::int64_t step_count_ = 0;
};

// Scales all gradients so their global L2 norm is at most max_norm.
// Returns the scale applied (1 when already within the bound).
double clip_grad_norm(std::vector<Tensor>& params, double max_norm);

}  // namespace tevit
