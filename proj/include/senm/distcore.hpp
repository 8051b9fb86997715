#pragma once

// Diagonal-Gaussian machinery shared by the model, the objective and the
// Monte-Carlo oracles.

#include <torch/torch.h>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>

#include "senm/errors.hpp"

namespace senm {

/// Mean and log-variance of a diagonal Gaussian over a tensor of any shape.
struct GaussianParams {
  torch::Tensor mean;
  torch::Tensor log_var;

  GaussianParams() = default;
  GaussianParams(torch::Tensor mean_, torch::Tensor log_var_)
      : mean(std::move(mean_)), log_var(std::move(log_var_)) {
    detail::require(mean.sizes() == log_var.sizes(),
                    "GaussianParams: mean and log_var shapes differ");
  }

  /// Scalar Gaussian broadcast to `shape`, in double precision.
  static GaussianParams scalar(double mu, double variance, torch::IntArrayRef shape = {1}) {
    auto opts = torch::TensorOptions().dtype(torch::kDouble);
    return {torch::full(shape, mu, opts), torch::full(shape, std::log(variance), opts)};
  }

  torch::Tensor variance() const { return log_var.exp(); }
  torch::Tensor stddev() const { return (0.5 * log_var).exp(); }
  torch::IntArrayRef sizes() const { return mean.sizes(); }
};

/// Weights of the two-component inference mixture p1*q(z|x) + p2*q(z|y).
struct MixtureWeights {
  double p1 = 0.5;
  double p2 = 0.5;

  static MixtureWeights from_p1(double p1) { return {p1, 1.0 - p1}; }

  void validate() const {
    if (!(p1 >= 0.0 && p1 <= 1.0 && p2 >= 0.0 && p2 <= 1.0) ||
        std::abs(p1 + p2 - 1.0) > 1e-12) {
      throw ContractViolation("MixtureWeights: need p1, p2 in [0,1] with p1 + p2 = 1");
    }
  }
};

/// Source of unit-normal draws for the reparameterization trick. A stream
/// seeded identically replays the same draws in the same order; a zero
/// stream returns all-zero noise so that samples collapse to the means.
class NoiseStream {
 public:
  explicit NoiseStream(std::uint64_t seed) : generator_(torch::make_generator<torch::CPUGeneratorImpl>(seed)) {}

  static NoiseStream zeros() {
    NoiseStream s(0);
    s.zero_ = true;
    return s;
  }

  torch::Tensor next(torch::IntArrayRef shape, const torch::TensorOptions& options) {
    if (zero_) return torch::zeros(shape, options);
    // Draw in double and cast so float and double models see the same stream.
    auto draw = torch::randn(shape, generator_, torch::TensorOptions().dtype(torch::kDouble));
    return draw.to(options.dtype()).to(options.device());
  }

  torch::Generator& generator() { return generator_; }
  bool is_zero() const { return zero_; }

 private:
  torch::Generator generator_;
  bool zero_ = false;
};

/// KL(q || p) elementwise for diagonal Gaussians.
inline torch::Tensor kl_diag_gaussian_elementwise(const GaussianParams& q, const GaussianParams& p) {
  detail::require(q.sizes() == p.sizes(), "kl_diag_gaussian: shape mismatch between q and p");
  auto diff = q.mean - p.mean;
  return 0.5 * (p.log_var - q.log_var + (q.log_var - p.log_var).exp() + diff * diff * (-p.log_var).exp() - 1.0);
}

/// KL(q || p) summed over every element. Differentiable.
inline torch::Tensor kl_diag_gaussian(const GaussianParams& q, const GaussianParams& p) {
  return kl_diag_gaussian_elementwise(q, p).sum();
}

/// KL(q || p) summed over all but the leading (batch) dimension.
inline torch::Tensor kl_diag_gaussian_per_item(const GaussianParams& q, const GaussianParams& p) {
  auto kl = kl_diag_gaussian_elementwise(q, p);
  return kl.reshape({kl.size(0), -1}).sum(1);
}

/// log N(value; params), summed over all but the leading dimension.
inline torch::Tensor gaussian_log_density_per_item(const torch::Tensor& value, const GaussianParams& params) {
  detail::require(value.sizes() == params.sizes(), "gaussian_log_density: shape mismatch");
  constexpr double kLog2Pi = 1.8378770664093453;
  auto diff = value - params.mean;
  auto lp = -0.5 * (kLog2Pi + params.log_var + diff * diff * (-params.log_var).exp());
  return lp.reshape({lp.size(0), -1}).sum(1);
}

/// mean + exp(log_var / 2) * noise.
inline torch::Tensor sample_reparam(const GaussianParams& params, const torch::Tensor& noise) {
  detail::require(noise.sizes() == params.sizes(), "sample_reparam: noise shape does not match params");
  return params.mean + (0.5 * params.log_var).exp() * noise;
}

inline torch::Tensor sample_reparam(const GaussianParams& params, NoiseStream& noise) {
  return sample_reparam(params, noise.next(params.sizes(), params.mean.options()));
}

/// Right-hand side of the mixture KL bound: p1 * KL(q_x||p) + p2 * KL(q_y||p).
inline double mixture_kl_rhs(double kl_x, double kl_y, const MixtureWeights& w) {
  if (kl_x < 0.0 || kl_y < 0.0) throw ContractViolation("mixture_kl_rhs: KL inputs must be non-negative");
  w.validate();
  return w.p1 * kl_x + w.p2 * kl_y;
}

struct McEstimate {
  double value = 0.0;
  double std_error = 0.0;
};

/// Monte-Carlo estimate of KL(p1*q_x + p2*q_y || p) with its standard error.
///
/// Sampling is stratified over the two components: n/2 draws from each, with
/// the component estimates combined by their weights. This is unbiased for
/// the mixture expectation and avoids categorical branch sampling.
inline McEstimate mc_kl_mixture(const GaussianParams& q_x, const GaussianParams& q_y, const GaussianParams& p,
                                const MixtureWeights& w, std::int64_t n_samples, std::uint64_t seed) {
  detail::require(q_x.sizes() == p.sizes() && q_y.sizes() == p.sizes(), "mc_kl_mixture: shape mismatch");
  detail::require(n_samples >= 2, "mc_kl_mixture: need at least two samples");
  w.validate();
  torch::NoGradGuard no_grad;
  auto gen = torch::make_generator<torch::CPUGeneratorImpl>(seed);
  auto dbl = torch::TensorOptions().dtype(torch::kDouble);
  auto flat = [&](const GaussianParams& g) {
    return GaussianParams(g.mean.to(torch::kDouble).reshape({1, -1}), g.log_var.to(torch::kDouble).reshape({1, -1}));
  };
  const auto qx = flat(q_x), qy = flat(q_y), pp = flat(p);
  const std::int64_t dim = qx.mean.size(1);

  auto log_density = [&](const torch::Tensor& z, const GaussianParams& g) {
    auto e = g.mean.expand_as(z);
    auto lv = g.log_var.expand_as(z);
    return gaussian_log_density_per_item(z, GaussianParams(e, lv));
  };
  auto log_mixture = [&](const torch::Tensor& z) {
    auto lx = log_density(z, qx);
    auto ly = log_density(z, qy);
    if (w.p1 == 0.0) return ly;
    if (w.p2 == 0.0) return lx;
    return torch::logaddexp(lx + std::log(w.p1), ly + std::log(w.p2));
  };
  auto component = [&](const GaussianParams& g, std::int64_t n) {
    auto eps = torch::randn({n, dim}, gen, dbl);
    auto z = g.mean + (0.5 * g.log_var).exp() * eps;
    return log_mixture(z) - log_density(z, pp);
  };

  const std::int64_t n_half = std::max<std::int64_t>(n_samples / 2, 1);
  double value = 0.0, variance = 0.0;
  for (auto [weight, comp] : {std::pair{w.p1, &qx}, std::pair{w.p2, &qy}}) {
    if (weight == 0.0) continue;
    auto r = component(*comp, n_half);
    value += weight * r.mean().item<double>();
    variance += weight * weight * r.var().item<double>() / static_cast<double>(n_half);
  }
  return {value, std::sqrt(variance)};
}

}  // namespace senm
