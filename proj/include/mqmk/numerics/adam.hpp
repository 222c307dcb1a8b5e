#pragma once

#include <cstddef>
#include <vector>

#include "mqmk/numerics/tensor.hpp"

namespace mqmk::num {

struct AdamConfig {
  double learning_rate = 0.005;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Moment buffers for a fixed parameter list; step increases by one per
// update. Buffers are keyed by position, so the same list (same order,
// same shapes) must be passed to every step() call.
class AdamState {
 public:
  AdamState(const std::vector<Tensor*>& params, AdamConfig config);

  void step(const std::vector<Tensor*>& params);
  std::size_t step_count() const { return step_; }
  const AdamConfig& config() const { return config_; }

 private:
  AdamConfig config_;
  std::size_t step_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

// Standard bias-corrected Adam update; reads each parameter's grad buffer.
void adam_step(const std::vector<Tensor*>& params, AdamState& state);

}  // namespace mqmk::num
