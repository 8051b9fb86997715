#pragma once

// Training objective: per-domain losses Loss_p / Loss_s / Loss_t, KL
// annealing, the optional adversarial term, and a two-route cELBO estimator
// used to check the factorized bound against direct Monte Carlo.

#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>

#include "senm/batch.hpp"
#include "senm/distcore.hpp"
#include "senm/model.hpp"

namespace senm {

struct ObjectiveConfig {
  double lambda_kl = 1e-7;
  MixtureWeights weights;
  int anneal_iters = 10000;
  bool adversarial_enabled = false;
  double adversarial_weight = 1e-3;
  // The unit-variance Gaussian likelihoods p(x|z), p(y|z,z_n) are measured
  // in intensity units of this scale: residuals are multiplied by it before
  // the 0.5 * ||.||^2 reconstruction term.
  double intensity_scale = 255.0;
  // Optional extra loss on the noisy reconstruction, e.g. a perceptual
  // distance; called as plugin(prediction, target) -> per-item losses [N].
  std::function<torch::Tensor(const torch::Tensor&, const torch::Tensor&)> perceptual_plugin;
  double perceptual_weight = 1.0;

  void validate() const {
    if (lambda_kl < 0.0) throw ConfigError("objective: lambda_kl must be >= 0");
    if (anneal_iters < 0) throw ConfigError("objective: anneal_iters must be >= 0");
    if (intensity_scale <= 0.0) throw ConfigError("objective: intensity_scale must be > 0");
    weights.validate();
  }
};

/// Mixture-weighted loss terms of one batch.
///
/// kl_noise, kl_content, rec_clean and rec_noisy carry their p1/p2 mixture
/// weights but not lambda or the annealing factor; loss_p/s/t apply those.
/// All tensors are scalars averaged over the batch.
struct LossBreakdown {
  Domain domain = Domain::paired;
  torch::Tensor kl_noise;
  torch::Tensor kl_content;
  torch::Tensor rec_clean;
  torch::Tensor rec_noisy;
  torch::Tensor adv;
  torch::Tensor loss_p;
  torch::Tensor loss_s;
  torch::Tensor loss_t;
  torch::Tensor total;
  // Noisy reconstruction, exposed for the discriminator update.
  torch::Tensor fake_noisy;
};

inline double anneal_weight(std::int64_t iter, std::int64_t anneal_iters) {
  if (anneal_iters <= 0) return 1.0;
  if (iter <= 0) return 0.0;
  return std::min(1.0, static_cast<double>(iter) / static_cast<double>(anneal_iters));
}

/// -log N(target; mean, I) in intensity units, constants dropped, per item.
inline torch::Tensor reconstruction_nll(const torch::Tensor& target, const torch::Tensor& mean, double scale) {
  auto r = (target - mean) * scale;
  return 0.5 * (r * r).reshape({r.size(0), -1}).sum(1);
}

inline torch::Tensor layerwise_kl(const std::vector<GaussianParams>& q, const std::vector<GaussianParams>& p) {
  detail::require(q.size() == p.size() && !q.empty(), "layerwise_kl: layer count mismatch");
  torch::Tensor total;
  for (std::size_t l = 0; l < q.size(); ++l) {
    auto kl = kl_diag_gaussian_per_item(q[l], p[l]);
    total = total.defined() ? total + kl : kl;
  }
  return total;
}

inline torch::Tensor layerwise_log_density(const std::vector<torch::Tensor>& values, const std::vector<GaussianParams>& params) {
  torch::Tensor total;
  for (std::size_t l = 0; l < values.size(); ++l) {
    auto lp = gaussian_log_density_per_item(values[l], params[l]);
    total = total.defined() ? total + lp : lp;
  }
  return total;
}

// Small convolutional patch discriminator producing a map of logits.
struct PatchDiscriminatorImpl : torch::nn::Module {
  PatchDiscriminatorImpl(int image_channels, int channels) {
    body_ = register_module(
        "body", torch::nn::Sequential(detail::conv3x3(image_channels, channels, 2), detail::leaky(),
                                      detail::conv3x3(channels, 2 * channels, 2), detail::leaky(),
                                      detail::conv3x3(2 * channels, 1)));
  }
  torch::Tensor forward(const torch::Tensor& x) { return body_->forward(x); }

 private:
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(PatchDiscriminator);

struct AdversarialTerms {
  torch::Tensor gen_loss;
  torch::Tensor disc_loss;
};

/// Non-saturating GAN losses. The discriminator loss is the mean of the real
/// and fake cross-entropies, so an indifferent discriminator scores log 2 on both.
inline AdversarialTerms adversarial_terms(const torch::Tensor& real_noisy, const torch::Tensor& fake_noisy,
                                          PatchDiscriminator& discriminator) {
  namespace F = torch::nn::functional;
  auto gen = F::softplus(-discriminator->forward(fake_noisy)).mean();
  auto real = F::softplus(-discriminator->forward(real_noisy)).mean();
  auto fake = F::softplus(discriminator->forward(fake_noisy.detach())).mean();
  return {gen, 0.5 * (real + fake)};
}

namespace detail {

inline LossBreakdown empty_breakdown(Domain d, const torch::TensorOptions& opts) {
  LossBreakdown b;
  b.domain = d;
  auto zero = torch::zeros({}, opts);
  b.kl_noise = b.kl_content = b.rec_clean = b.rec_noisy = b.adv = zero;
  b.loss_p = b.loss_s = b.loss_t = zero;
  return b;
}

inline torch::Tensor noisy_reconstruction_loss(const torch::Tensor& y, const torch::Tensor& y_hat, const ObjectiveConfig& cfg) {
  auto nll = reconstruction_nll(y, y_hat, cfg.intensity_scale);
  if (cfg.perceptual_plugin) nll = nll + cfg.perceptual_weight * cfg.perceptual_plugin(y_hat, y);
  return nll;
}

}  // namespace detail

/// Loss_p for a paired batch: the q(z|x) branch reconstructs y and pays the
/// noise KL (weight p1); the q(z|y) branch reconstructs x (weight p2); the
/// layerwise content KL(q(z|y) || q(z|x)) is weighted by lambda.
inline LossBreakdown loss_paired(const torch::Tensor& x, const torch::Tensor& y, const std::optional<torch::Tensor>& level,
                                 SeNMVAE& model, NoiseStream& noise, const ObjectiveConfig& cfg,
                                 double kl_noise_weight = 1.0) {
  detail::require(x.defined() && y.defined(), "loss_paired: paired batch needs both x and y");
  detail::require(x.sizes() == y.sizes(), "loss_paired: x and y shapes differ");
  const auto& w = cfg.weights;
  auto a_x = model->encode(x, Branch::clean);
  auto a_y = model->encode(y, Branch::noisy);

  // Branch through q(z|x).
  auto z_x = model->infer_content(a_x, Branch::clean, noise);
  auto zn = model->infer_noise_latent(a_y, z_x, noise, level);
  auto prior = model->noise_prior_params_along(zn);
  auto y_hat = model->decode_noisy(z_x, zn);
  auto rec_noisy_x = detail::noisy_reconstruction_loss(y, y_hat, cfg).mean();
  auto kl_noise_x = layerwise_kl(zn.params, prior).mean();

  // Branch through q(z|y).
  auto z_y = model->infer_content(a_y, Branch::noisy, noise);
  auto rec_clean_y = reconstruction_nll(x, model->decode_clean(z_y), cfg.intensity_scale).mean();
  auto q_x_along = model->content_params_along(a_x, Branch::clean, z_y);
  auto kl_content = layerwise_kl(z_y.params, q_x_along).mean();

  LossBreakdown b = detail::empty_breakdown(Domain::paired, x.options());
  b.rec_noisy = w.p1 * rec_noisy_x;
  b.kl_noise = w.p1 * kl_noise_x;
  b.rec_clean = w.p2 * rec_clean_y;
  b.kl_content = kl_content;
  b.loss_p = b.rec_noisy + kl_noise_weight * b.kl_noise + b.rec_clean + cfg.lambda_kl * b.kl_content;
  b.total = b.loss_p;
  b.fake_noisy = y_hat;
  return b;
}

/// Loss_s for a source batch: clean autoencoding through q(z|x), weight p1.
inline LossBreakdown loss_source(const torch::Tensor& x, SeNMVAE& model, NoiseStream& noise, const ObjectiveConfig& cfg) {
  detail::require(x.defined(), "loss_source: source batch needs x");
  auto a_x = model->encode(x, Branch::clean);
  auto z_x = model->infer_content(a_x, Branch::clean, noise);
  LossBreakdown b = detail::empty_breakdown(Domain::source, x.options());
  b.rec_clean = cfg.weights.p1 * reconstruction_nll(x, model->decode_clean(z_x), cfg.intensity_scale).mean();
  b.loss_s = b.rec_clean;
  b.total = b.loss_s;
  return b;
}

/// Loss_t for a target batch: noisy reconstruction and noise KL, both routed
/// through q(z|y), weight p2.
inline LossBreakdown loss_target(const torch::Tensor& y, const std::optional<torch::Tensor>& level, SeNMVAE& model,
                                 NoiseStream& noise, const ObjectiveConfig& cfg, double kl_noise_weight = 1.0) {
  detail::require(y.defined(), "loss_target: target batch needs y");
  auto a_y = model->encode(y, Branch::noisy);
  auto z_y = model->infer_content(a_y, Branch::noisy, noise);
  auto zn = model->infer_noise_latent(a_y, z_y, noise, level);
  auto prior = model->noise_prior_params_along(zn);
  auto y_hat = model->decode_noisy(z_y, zn);
  LossBreakdown b = detail::empty_breakdown(Domain::target, y.options());
  b.rec_noisy = cfg.weights.p2 * detail::noisy_reconstruction_loss(y, y_hat, cfg).mean();
  b.kl_noise = cfg.weights.p2 * layerwise_kl(zn.params, prior).mean();
  b.loss_t = b.rec_noisy + kl_noise_weight * b.kl_noise;
  b.total = b.loss_t;
  b.fake_noisy = y_hat;
  return b;
}

/// Dispatches a tagged batch to its domain loss, annealing the noise KL and
/// adding the generator-side adversarial term when enabled.
inline LossBreakdown total_loss(const DomainBatch& batch, SeNMVAE& model, std::int64_t iter, const ObjectiveConfig& cfg,
                                NoiseStream& noise, PatchDiscriminator* discriminator = nullptr) {
  batch.validate();
  const double kw = anneal_weight(iter, cfg.anneal_iters);
  LossBreakdown b;
  switch (*batch.domain) {
    case Domain::paired: b = loss_paired(batch.x, batch.y, batch.level_opt(), model, noise, cfg, kw); break;
    case Domain::source: b = loss_source(batch.x, model, noise, cfg); break;
    case Domain::target: b = loss_target(batch.y, batch.level_opt(), model, noise, cfg, kw); break;
  }
  b.total = b.loss_p + b.loss_s + b.loss_t;
  if (cfg.adversarial_enabled && b.fake_noisy.defined()) {
    detail::require(discriminator != nullptr && !discriminator->is_empty(),
                    "total_loss: adversarial term enabled without a discriminator");
    b.adv = cfg.adversarial_weight * adversarial_terms(batch.y, b.fake_noisy, *discriminator).gen_loss;
    b.total = b.total + b.adv;
  }
  return b;
}

struct CelboComparison {
  double factored = 0.0;
  double direct = 0.0;
  // Standard error of the per-sample difference between the two routes.
  double std_error = 0.0;
  double factored_std_error = 0.0;
  double direct_std_error = 0.0;
};

/// Estimates the cELBO of one (x, y) pair two ways, with z drawn from the
/// mixture p1*q(z|x) + p2*q(z|y) (stratified over components) and p(z|x) = q(z|x):
///
///  factored: E[log p(y|z,z_n)] - KL(q(z|x,y) || p(z|x)) - E[sum_l KL_l(q(z_n)||p(z_n))]
///            with the noise KL in closed form per layer;
///  direct:   E[log p(y,z,z_n|x) - log q(z,z_n|x,y)] from sampled log densities.
///
/// The mixture density has no closed form, so both routes evaluate it by
/// log-sum-exp of the two branch densities along the sample.
inline CelboComparison celbo_factored_vs_direct(const torch::Tensor& x, const torch::Tensor& y, SeNMVAE& model,
                                                const MixtureWeights& w, std::int64_t n_samples, std::uint64_t seed,
                                                const ObjectiveConfig& cfg = {},
                                                const std::optional<torch::Tensor>& level = std::nullopt,
                                                std::int64_t chunk = 256) {
  detail::require(x.dim() == 3 || (x.dim() == 4 && x.size(0) == 1), "celbo: expects a single (x, y) pair");
  detail::require(n_samples >= 4, "celbo: need at least four samples");
  w.validate();
  torch::NoGradGuard no_grad;
  auto x1 = x.dim() == 3 ? x.unsqueeze(0) : x;
  auto y1 = y.dim() == 3 ? y.unsqueeze(0) : y;
  NoiseStream noise(seed);

  const double log_sigma = -std::log(cfg.intensity_scale);
  constexpr double kLog2Pi = 1.8378770664093453;
  const double log_w1 = std::log(w.p1), log_w2 = std::log(w.p2);

  std::vector<double> fac_x, dir_x, fac_y, dir_y;
  auto run = [&](Branch branch, std::int64_t n, std::vector<double>& fac, std::vector<double>& dir) {
    for (std::int64_t done = 0; done < n; done += chunk) {
      const auto m = std::min(chunk, n - done);
      auto xs = x1.expand({m, -1, -1, -1}).contiguous();
      auto ys = y1.expand({m, -1, -1, -1}).contiguous();
      std::optional<torch::Tensor> lv;
      if (level) lv = level->reshape({-1}).expand({m}).contiguous();
      auto a_x = model->encode(xs, Branch::clean);
      auto a_y = model->encode(ys, Branch::noisy);
      auto z = model->infer_content(branch == Branch::clean ? a_x : a_y, branch, noise);
      auto log_qx = layerwise_log_density(z.layers, model->content_params_along(a_x, Branch::clean, z));
      auto log_qy = layerwise_log_density(z.layers, model->content_params_along(a_y, Branch::noisy, z));
      torch::Tensor log_mix;
      if (w.p1 == 0.0) {
        log_mix = log_qy;
      } else if (w.p2 == 0.0) {
        log_mix = log_qx;
      } else {
        log_mix = torch::logaddexp(log_qx + log_w1, log_qy + log_w2);
      }
      auto zn = model->infer_noise_latent(a_y, z, noise, lv);
      auto prior = model->noise_prior_params_along(zn);
      auto y_hat = model->decode_noisy(z, zn);
      auto diff = (ys - y_hat).reshape({m, -1});
      const double d = static_cast<double>(diff.size(1));
      auto log_py = -0.5 * d * (kLog2Pi + 2.0 * log_sigma) -
                    0.5 * (diff * diff).sum(1) * (cfg.intensity_scale * cfg.intensity_scale);
      auto kl_noise = layerwise_kl(zn.params, prior);
      auto log_qzn = layerwise_log_density(zn.layers, zn.params);
      auto log_pzn = layerwise_log_density(zn.layers, prior);

      // Terms reach ~1e7 in 8-bit units; combine in double so the routes
      // differ only by estimator noise, not by summation order.
      auto f64 = [](const torch::Tensor& t) { return t.to(torch::kDouble); };
      auto fa = (f64(log_py) - f64(kl_noise) - (f64(log_mix) - f64(log_qx))).contiguous();
      auto di = (f64(log_qx) + f64(log_pzn) + f64(log_py) - f64(log_mix) - f64(log_qzn)).contiguous();
      fac.insert(fac.end(), fa.data_ptr<double>(), fa.data_ptr<double>() + m);
      dir.insert(dir.end(), di.data_ptr<double>(), di.data_ptr<double>() + m);
    }
  };
  const std::int64_t half = n_samples / 2;
  if (w.p1 > 0.0) run(Branch::clean, half, fac_x, dir_x);
  if (w.p2 > 0.0) run(Branch::noisy, half, fac_y, dir_y);

  auto stats = [](const std::vector<double>& v) {
    double mean = 0.0;
    for (double e : v) mean += e;
    mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double e : v) ss += (e - mean) * (e - mean);
    const double var = ss / static_cast<double>(v.size() - 1);
    return std::pair{mean, var / static_cast<double>(v.size())};
  };
  auto minus = [](const std::vector<double>& a, const std::vector<double>& b) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
    return out;
  };
  CelboComparison out;
  double var_f = 0.0, var_d = 0.0, var_diff = 0.0;
  for (auto [weight, fac, dir] : {std::tuple{w.p1, &fac_x, &dir_x}, std::tuple{w.p2, &fac_y, &dir_y}}) {
    if (weight == 0.0) continue;
    auto [mf, vf] = stats(*fac);
    auto [md, vd] = stats(*dir);
    auto [mdiff, vdiff] = stats(minus(*fac, *dir));
    (void)mdiff;
    out.factored += weight * mf;
    out.direct += weight * md;
    var_f += weight * weight * vf;
    var_d += weight * weight * vd;
    var_diff += weight * weight * vdiff;
  }
  out.factored_std_error = std::sqrt(var_f);
  out.direct_std_error = std::sqrt(var_d);
  out.std_error = std::sqrt(var_diff);
  return out;
}

}  // namespace senm
