#pragma once

// Noise-quality metrics and the downstream-denoiser harness.

#include <torch/torch.h>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "senm/datasets.hpp"
#include "senm/errors.hpp"

namespace senm {

inline constexpr double kHistogramEpsilon = 1e-10;

namespace detail {

inline torch::Tensor flatten_set(const std::vector<torch::Tensor>& images, const char* what) {
  if (images.empty()) throw DataError(std::string(what) + ": empty image set");
  std::vector<torch::Tensor> flat;
  flat.reserve(images.size());
  for (const auto& t : images) flat.push_back(t.detach().to(torch::kDouble).reshape({-1}));
  return torch::cat(flat);
}

/// 256-bin histogram of 8-bit codes in [0, 255].
inline torch::Tensor histogram256(const torch::Tensor& codes) {
  return torch::bincount(codes.clamp(0, 255).to(torch::kLong), {}, 256).to(torch::kDouble);
}

inline torch::Tensor pixel_codes(const torch::Tensor& v) { return (v.clamp(0.0, 1.0) * 255.0).round(); }

/// Residual y - x in 8-bit steps, shifted so zero lands in bin 128.
inline torch::Tensor residual_codes(const torch::Tensor& noisy, const torch::Tensor& clean) {
  return (pixel_codes(noisy) - pixel_codes(clean)) + 128.0;
}

inline double kld_from_histograms(const torch::Tensor& ha, const torch::Tensor& hb) {
  auto pa = ha + kHistogramEpsilon;
  auto pb = hb + kHistogramEpsilon;
  pa = pa / pa.sum();
  pb = pb / pb.sum();
  return std::max(0.0, (pa * (pa.log() - pb.log())).sum().item<double>());
}

}  // namespace detail

/// KL divergence between pooled 256-bin histograms of two image sets (values
/// in [0,1], quantized to 8 bits).
inline double pixel_kld(const std::vector<torch::Tensor>& images_a, const std::vector<torch::Tensor>& images_b) {
  auto a = detail::flatten_set(images_a, "pixel_kld");
  auto b = detail::flatten_set(images_b, "pixel_kld");
  return detail::kld_from_histograms(detail::histogram256(detail::pixel_codes(a)),
                                     detail::histogram256(detail::pixel_codes(b)));
}

/// Pixel KLD of noise residuals y - x, each set with its own clean references.
inline double residual_kld(const std::vector<torch::Tensor>& noisy_a, const std::vector<torch::Tensor>& clean_a,
                           const std::vector<torch::Tensor>& noisy_b, const std::vector<torch::Tensor>& clean_b) {
  auto ya = detail::flatten_set(noisy_a, "residual_kld");
  auto xa = detail::flatten_set(clean_a, "residual_kld");
  auto yb = detail::flatten_set(noisy_b, "residual_kld");
  auto xb = detail::flatten_set(clean_b, "residual_kld");
  if (ya.numel() != xa.numel() || yb.numel() != xb.numel()) {
    throw DataError("residual_kld: noisy and clean sets differ in size");
  }
  return detail::kld_from_histograms(detail::histogram256(detail::residual_codes(ya, xa)),
                                     detail::histogram256(detail::residual_codes(yb, xb)));
}

/// Splits an [N,...] batch into a vector of items.
inline std::vector<torch::Tensor> unbind_batch(const torch::Tensor& batch) {
  return batch.dim() == 0 ? std::vector<torch::Tensor>{} : batch.unbind(0);
}

/// 10 log10(1 / MSE) for [0,1] images; +infinity when a == b.
inline double psnr(const torch::Tensor& a, const torch::Tensor& b) {
  detail::require(a.sizes() == b.sizes(), "psnr: shape mismatch");
  const double mse = (a.to(torch::kDouble) - b.to(torch::kDouble)).pow(2).mean().item<double>();
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

// ---------------------------------------------------------------------------
// Per-intensity-bin noise statistics.

struct BinStat {
  double lo = 0, hi = 0;
  std::int64_t count = 0;
  double std = 0;
  bool reported = false;  // false when count < min_pixels; std is then 0

  double center() const { return 0.5 * (lo + hi); }
};

/// Bins pixels by clean intensity into `n_bins` uniform bins over [0,1] and
/// reports the residual std (population) of each bin with >= min_pixels.
inline std::vector<BinStat> per_bin_noise_stats(const torch::Tensor& clean, const torch::Tensor& noisy, int n_bins,
                                                std::int64_t min_pixels = 100) {
  detail::require(n_bins >= 1, "per_bin_noise_stats: n_bins must be >= 1");
  detail::require(clean.sizes() == noisy.sizes(), "per_bin_noise_stats: shape mismatch");
  if (clean.numel() == 0) throw DataError("per_bin_noise_stats: empty input");
  auto x = clean.detach().to(torch::kDouble).reshape({-1});
  auto r = noisy.detach().to(torch::kDouble).reshape({-1}) - x;
  auto idx = (x.clamp(0.0, 1.0) * n_bins).floor().clamp(0, n_bins - 1).to(torch::kLong);
  auto ones = torch::ones_like(r);
  auto count = torch::zeros({n_bins}, r.options()).index_add_(0, idx, ones);
  auto sum = torch::zeros({n_bins}, r.options()).index_add_(0, idx, r);
  auto sq = torch::zeros({n_bins}, r.options()).index_add_(0, idx, r * r);
  std::vector<BinStat> out(static_cast<std::size_t>(n_bins));
  for (int k = 0; k < n_bins; ++k) {
    auto& b = out[static_cast<std::size_t>(k)];
    b.lo = static_cast<double>(k) / n_bins;
    b.hi = static_cast<double>(k + 1) / n_bins;
    b.count = static_cast<std::int64_t>(count[k].item<double>());
    if (b.count >= min_pixels && b.count > 0) {
      const double n = static_cast<double>(b.count);
      const double mean = sum[k].item<double>() / n;
      b.std = std::sqrt(std::max(0.0, sq[k].item<double>() / n - mean * mean));
      b.reported = true;
    }
  }
  return out;
}

struct AffineStdFit {
  double a = 0, b = 0;
};

/// Least-squares fit std ~ a + b * center over reported bins.
inline AffineStdFit fit_affine_std(const std::vector<BinStat>& bins) {
  double n = 0, sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const auto& b : bins) {
    if (!b.reported) continue;
    const double c = b.center();
    n += 1;
    sx += c;
    sy += b.std;
    sxx += c * c;
    sxy += c * b.std;
  }
  if (n < 2) throw DataError("fit_affine_std: need at least two reported bins");
  const double det = n * sxx - sx * sx;
  if (det == 0.0) throw DataError("fit_affine_std: degenerate bin centers");
  AffineStdFit f;
  f.b = (n * sxy - sx * sy) / det;
  f.a = (sy - f.b * sx) / n;
  return f;
}

// ---------------------------------------------------------------------------
// Downstream denoiser.

struct DenoiserConfig {
  int layers = 8;
  int channels = 16;
  int iters = 5000;
  int batch_size = 8;
  int patch_size = 32;
  double lr = 1e-3;
  std::uint64_t seed = 0;

  void validate() const {
    if (layers < 2) throw ConfigError("denoiser: layers must be >= 2");
    if (channels < 1 || iters < 0 || batch_size < 1 || patch_size < 1 || !(lr > 0)) {
      throw ConfigError("denoiser: channels, batch_size, patch_size must be >= 1, iters >= 0, lr > 0");
    }
  }
};

/// Residual CNN: y + body(y). The last conv starts at zero so an untrained
/// denoiser is the identity.
struct DenoiserImpl : torch::nn::Module {
  explicit DenoiserImpl(const DenoiserConfig& cfg) {
    body_ = register_module("body", torch::nn::Sequential());
    body_->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(3, cfg.channels, 3).padding(1)));
    body_->push_back(torch::nn::ReLU());
    for (int i = 0; i < cfg.layers - 2; ++i) {
      body_->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(cfg.channels, cfg.channels, 3).padding(1)));
      body_->push_back(torch::nn::ReLU());
    }
    auto last = torch::nn::Conv2d(torch::nn::Conv2dOptions(cfg.channels, 3, 3).padding(1));
    torch::NoGradGuard no_grad;
    last->weight.zero_();
    last->bias.zero_();
    body_->push_back(last);
  }

  torch::Tensor forward(const torch::Tensor& noisy) { return noisy + body_->forward(noisy); }

 private:
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(Denoiser);

/// Trains with L2 on random aligned crops (dihedral augmentation) of the
/// pairs [N,3,H,W]. Learning rate halves at 60% and 85% of `iters`.
inline Denoiser train_downstream_denoiser(const torch::Tensor& clean, const torch::Tensor& noisy,
                                          const DenoiserConfig& cfg) {
  cfg.validate();
  if (!clean.defined() || clean.size(0) == 0) throw DataError("train_downstream_denoiser: empty dataset");
  detail::require(clean.sizes() == noisy.sizes() && clean.dim() == 4, "train_downstream_denoiser: shape mismatch");
  torch::manual_seed(cfg.seed);
  Denoiser net(cfg);
  torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(cfg.lr));
  std::mt19937_64 rng(cfg.seed);
  const std::int64_t n = clean.size(0);
  const int p = static_cast<int>(std::min<std::int64_t>({cfg.patch_size, clean.size(2), clean.size(3)}));
  std::uniform_int_distribution<std::int64_t> pick(0, n - 1);
  std::uniform_int_distribution<int> row(0, static_cast<int>(clean.size(2)) - p);
  std::uniform_int_distribution<int> col(0, static_cast<int>(clean.size(3)) - p);
  std::uniform_int_distribution<int> dihedral(0, 7);
  for (int it = 0; it < cfg.iters; ++it) {
    const double scale = it >= cfg.iters * 0.85 ? 0.25 : it >= cfg.iters * 0.6 ? 0.5 : 1.0;
    for (auto& g : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(g.options()).lr(cfg.lr * scale);
    std::vector<torch::Tensor> xs, ys;
    for (int i = 0; i < cfg.batch_size; ++i) {
      const auto idx = pick(rng);
      const int r = row(rng), c = col(rng), k = dihedral(rng);
      xs.push_back(apply_dihedral(clean[idx].slice(1, r, r + p).slice(2, c, c + p), k));
      ys.push_back(apply_dihedral(noisy[idx].slice(1, r, r + p).slice(2, c, c + p), k));
    }
    auto x = torch::stack(xs), y = torch::stack(ys);
    opt.zero_grad();
    auto loss = torch::mse_loss(net->forward(y), x);
    loss.backward();
    opt.step();
  }
  net->eval();
  return net;
}

/// Mean per-image PSNR of the denoised test inputs against their clean targets.
inline double evaluate_denoiser(Denoiser& net, const torch::Tensor& clean, const torch::Tensor& noisy) {
  if (!clean.defined() || clean.size(0) == 0) throw DataError("evaluate_denoiser: empty test set");
  detail::require(clean.sizes() == noisy.sizes() && clean.dim() == 4, "evaluate_denoiser: shape mismatch");
  torch::NoGradGuard no_grad;
  net->eval();
  double total = 0;
  for (std::int64_t i = 0; i < clean.size(0); ++i) {
    auto out = net->forward(noisy[i].unsqueeze(0)).clamp(0.0, 1.0);
    total += psnr(out.squeeze(0), clean[i]);
  }
  return total / static_cast<double>(clean.size(0));
}

// ---------------------------------------------------------------------------
// Report.

/// Infinity is written as the string "inf"; an absent downstream score as null.
struct NoiseQualityReport {
  double kld = 0;
  std::optional<double> psnr_downstream;
  std::vector<BinStat> per_bin_std;
  std::int64_t n_images = 0;

  nlohmann::json to_json() const {
    nlohmann::json bins = nlohmann::json::array();
    for (const auto& b : per_bin_std) {
      bins.push_back({{"lo", b.lo}, {"hi", b.hi}, {"count", b.count}, {"std", b.reported ? nlohmann::json(b.std) : nlohmann::json(nullptr)}});
    }
    nlohmann::json j = {{"kld", kld}, {"n_images", n_images}, {"per_bin_std", bins}};
    if (!psnr_downstream) {
      j["psnr_downstream"] = nullptr;
    } else if (std::isinf(*psnr_downstream)) {
      j["psnr_downstream"] = "inf";
    } else {
      j["psnr_downstream"] = *psnr_downstream;
    }
    return j;
  }

  static NoiseQualityReport from_json(const nlohmann::json& j) {
    try {
      NoiseQualityReport r;
      r.kld = j.at("kld").get<double>();
      r.n_images = j.at("n_images").get<std::int64_t>();
      const auto& p = j.at("psnr_downstream");
      if (p.is_string() && p.get<std::string>() == "inf") {
        r.psnr_downstream = std::numeric_limits<double>::infinity();
      } else if (!p.is_null()) {
        r.psnr_downstream = p.get<double>();
      }
      for (const auto& b : j.at("per_bin_std")) {
        BinStat s;
        s.lo = b.at("lo").get<double>();
        s.hi = b.at("hi").get<double>();
        s.count = b.at("count").get<std::int64_t>();
        s.reported = !b.at("std").is_null();
        if (s.reported) s.std = b.at("std").get<double>();
        r.per_bin_std.push_back(s);
      }
      return r;
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("malformed noise-quality report: ") + e.what());
    }
  }
};

/// CSV: lo,hi,count,std (std empty for unreported bins).
inline void write_per_bin_csv(const fs::path& path, const std::vector<BinStat>& bins) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out.precision(9);
  out << "lo,hi,count,std\n";
  for (const auto& b : bins) {
    out << b.lo << ',' << b.hi << ',' << b.count << ',';
    if (b.reported) out << b.std;
    out << '\n';
  }
}

/// Rows of (clean | real noisy | generated noisy) for the first `rows` items,
/// separated by 2-pixel white gutters.
inline void save_sample_grid(const fs::path& path, const torch::Tensor& clean, const torch::Tensor& real,
                             const torch::Tensor& generated, int rows = 4) {
  detail::require(clean.dim() == 4 && clean.sizes() == real.sizes() && clean.sizes() == generated.sizes(),
                  "save_sample_grid: expected three [N,3,H,W] batches of equal shape");
  const auto n = std::min<std::int64_t>(rows, clean.size(0));
  if (n == 0) throw DataError("save_sample_grid: empty batch");
  const auto h = clean.size(2), w = clean.size(3);
  const int gap = 2;
  auto grid = torch::ones({3, n * h + (n - 1) * gap, 3 * w + 2 * gap});
  for (std::int64_t i = 0; i < n; ++i) {
    const auto r0 = i * (h + gap);
    const torch::Tensor cols[3] = {clean[i], real[i], generated[i]};
    for (int c = 0; c < 3; ++c) {
      const auto c0 = c * (w + gap);
      grid.slice(1, r0, r0 + h).slice(2, c0, c0 + w).copy_(cols[c].detach().to(torch::kFloat));
    }
  }
  save_image(path, grid);
}

}  // namespace senm
