#pragma once

#include <cmath>
#include <cstddef>
#include <unordered_set>
#include <vector>

#include "spa/tensor.hpp"

namespace spa {

// Momentum SGD with weight decay and inverse power-law learning-rate decay.
// The Nesterov variant is a flag; plain momentum is the default.
struct SgdConfig {
  double base_lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double schedule_alpha = 10.0;
  double schedule_beta = 0.75;
  std::size_t total_iters = 1;
  bool nesterov = false;
};

// Effective learning-rate factor at iteration i: (1 + alpha*i/N)^(-beta).
// Strictly positive and non-increasing; equals 1 at i = 0.
inline double schedule_factor(const SgdConfig& cfg, std::size_t iter) {
  const double t = static_cast<double>(iter) /
                   static_cast<double>(cfg.total_iters);
  return std::pow(1.0 + cfg.schedule_alpha * t, -cfg.schedule_beta);
}

inline double scheduled_lr(const SgdConfig& cfg, std::size_t iter) {
  return cfg.base_lr * schedule_factor(cfg, iter);
}

class SgdOptimizer {
 public:
  explicit SgdOptimizer(SgdConfig cfg) : cfg_(cfg) {}

  // base_lr <= 0 means "use cfg.base_lr". Momentum buffers are created lazily
  // per parameter and persist across steps.
  void add_param(const TensorPtr& p, double base_lr = 0.0) {
    slots_.push_back(Slot{p, base_lr > 0.0 ? base_lr : cfg_.base_lr,
                          std::vector<double>(p->size(), 0.0)});
  }

  // One SGD update from the grads currently stored on the parameters.
  // When `allow` is non-null, parameters outside it are left fully untouched
  // (values and momentum buffers), which is how gradient routing freezes
  // parameter sets per loss term.
  void step(std::size_t iter,
            const std::unordered_set<const Tensor*>* allow = nullptr) {
    const double factor = schedule_factor(cfg_, iter);
    for (auto& slot : slots_) {
      Tensor& p = *slot.param;
      if (allow && !allow->count(&p)) continue;
      const double lr = slot.base_lr * factor;
      for (std::size_t i = 0; i < p.size(); ++i) {
        double g = p.grad[i] + cfg_.weight_decay * p.values[i];
        if (cfg_.momentum != 0.0) {
          slot.buf[i] = cfg_.momentum * slot.buf[i] + g;
          g = cfg_.nesterov ? g + cfg_.momentum * slot.buf[i] : slot.buf[i];
        }
        p.values[i] -= lr * g;
      }
    }
  }

  void zero_grad() {
    for (auto& slot : slots_) slot.param->zero_grad();
  }

  const SgdConfig& config() const { return cfg_; }

  struct Slot {
    TensorPtr param;
    double base_lr;
    std::vector<double> buf;
  };
  std::vector<Slot>& slots() { return slots_; }
  const std::vector<Slot>& slots() const { return slots_; }

 private:
  SgdConfig cfg_;
  std::vector<Slot> slots_;
};

}  // namespace spa
