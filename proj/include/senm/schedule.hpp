#pragma once

// Training hyperparameters, the step learning-rate schedule and domain sampling.

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "senm/batch.hpp"
#include "senm/errors.hpp"

namespace senm {

struct TrainConfig {
  std::int64_t total_iters = 300000;
  double lr_init = 1e-4;
  std::vector<std::int64_t> lr_milestones = {150000, 225000, 270000, 285000};
  int batch_size = 8;
  int patch_size = 64;
  std::array<double, 3> domain_probs = {1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};
  std::uint64_t seed = 0;
  std::int64_t checkpoint_every = 0;  // 0 disables periodic checkpoints
  std::int64_t eval_every = 100;
  double grad_clip = 5.0;             // global norm; 0 disables
  bool augment = true;
  int discriminator_channels = 16;

  void validate() const {
    if (total_iters < 0) throw ConfigError("train: total_iters must be >= 0");
    if (lr_init <= 0.0) throw ConfigError("train: lr_init must be > 0");
    for (std::size_t i = 1; i < lr_milestones.size(); ++i)
      if (lr_milestones[i] <= lr_milestones[i - 1]) throw ConfigError("train: lr_milestones must be strictly increasing");
    if (batch_size < 1 || patch_size < 1) throw ConfigError("train: batch_size and patch_size must be >= 1");
    double sum = 0.0;
    for (double p : domain_probs) {
      if (p < 0.0) throw ConfigError("train: domain_probs must be non-negative");
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("train: domain_probs must sum to 1");
    if (eval_every < 1) throw ConfigError("train: eval_every must be >= 1");
  }
};

/// lr_init halved once per milestone already reached.
inline double lr_at(std::int64_t iter, const TrainConfig& cfg) {
  int passed = 0;
  for (auto m : cfg.lr_milestones)
    if (iter >= m) ++passed;
  return std::ldexp(cfg.lr_init, -passed);
}

inline Domain sample_domain(std::mt19937_64& rng, const TrainConfig& cfg) {
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double acc = 0.0;
  for (int d = 0; d < 3; ++d) {
    acc += cfg.domain_probs[static_cast<std::size_t>(d)];
    if (u < acc) return static_cast<Domain>(d);
  }
  for (int d = 2; d >= 0; --d)
    if (cfg.domain_probs[static_cast<std::size_t>(d)] > 0.0) return static_cast<Domain>(d);
  return Domain::paired;
}

}  // namespace senm
