#include "mqmk/numerics/adam.hpp"

#include <cmath>

namespace mqmk::num {

AdamState::AdamState(const std::vector<Tensor*>& params, AdamConfig config)
    : config_(config) {
  m_.reserve(params.size());
  v_.reserve(params.size());
  for (const Tensor* p : params) {
    m_.emplace_back(p->size(), 0.0);
    v_.emplace_back(p->size(), 0.0);
  }
}

void AdamState::step(const std::vector<Tensor*>& params) {
  if (params.size() != m_.size()) {
    throw ShapeError("adam: expected " + std::to_string(m_.size()) + " parameters, got " +
                     std::to_string(params.size()));
  }
  ++step_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& t = *params[pi];
    if (t.size() != m_[pi].size()) {
      throw ShapeError("adam: parameter " + std::to_string(pi) + " changed size, " +
                       std::to_string(m_[pi].size()) + " -> " + std::to_string(t.size()));
    }
    t.ensure_grad();
    const std::vector<double>& g = t.grad();
    std::vector<double>& m = m_[pi];
    std::vector<double>& v = v_[pi];
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      t[i] -= config_.learning_rate * mhat / (std::sqrt(vhat) + config_.epsilon);
    }
  }
}

void adam_step(const std::vector<Tensor*>& params, AdamState& state) {
  state.step(params);
}

}  // namespace mqmk::num
