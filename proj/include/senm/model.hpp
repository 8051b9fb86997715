#pragma once

// Hierarchical networks for q(z|x), q(z|y), q(z_n|y,z), p(z_n|z), p(x|z),
// p(y|z,z_n) and the degradation-level predictor.
//
// Layer indices are zero-based in code: layer 0 is the finest (z^1), layer
// L-1 the coarsest (z^L). Top-down passes run from L-1 down to 0.

#include <torch/torch.h>

#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "senm/distcore.hpp"
#include "senm/errors.hpp"

namespace senm {

/// The level enters the networks as kLevelInputScale * sigma so that
/// typical levels (sigma ~ 0.02 .. 0.2) are O(1) at the first convolution.
inline constexpr double kLevelInputScale = 10.0;

struct ModelConfig {
  int layers = 7;
  int base_channels = 64;
  int rdb_growth = 16;
  int rdb_convs = 3;
  // Downsampling factor applied on entry to each layer; layer 0 is the first.
  std::vector<int> stride_schedule = {1, 2, 1, 2, 1, 2, 1};
  int latent_channels = 4;
  int image_channels = 3;
  bool level_conditioning = false;
  int level_predictor_channels = 32;

  /// L=2, 8 channels: small enough for finite-difference checks.
  static ModelConfig tiny() {
    ModelConfig c;
    c.layers = 2;
    c.base_channels = 8;
    c.rdb_growth = 4;
    c.rdb_convs = 2;
    c.stride_schedule = {1, 2};
    c.latent_channels = 2;
    c.level_predictor_channels = 8;
    return c;
  }

  int total_stride() const {
    return std::accumulate(stride_schedule.begin(), stride_schedule.end(), 1, std::multiplies<>());
  }

  /// Spatial downsampling of layer `l` relative to the input image.
  int cumulative_stride(int l) const {
    int s = 1;
    for (int i = 0; i <= l; ++i) s *= stride_schedule[static_cast<std::size_t>(i)];
    return s;
  }

  void validate() const {
    if (layers < 1) throw ConfigError("model: layers must be >= 1");
    if (static_cast<int>(stride_schedule.size()) != layers)
      throw ConfigError("model: stride_schedule needs one entry per layer");
    for (int s : stride_schedule)
      if (s < 1) throw ConfigError("model: strides must be positive");
    if (base_channels < 1 || rdb_growth < 1 || rdb_convs < 1 || latent_channels < 1 || image_channels < 1 ||
        level_predictor_channels < 1)
      throw ConfigError("model: channel and block counts must be positive");
  }

  void validate_patch(std::int64_t height, std::int64_t width) const {
    const int s = total_stride();
    if (height % s != 0 || width % s != 0) {
      std::ostringstream msg;
      msg << "model: spatial size " << height << "x" << width << " is not divisible by the cumulative stride " << s;
      throw ConfigError(msg.str());
    }
  }
};

enum class Branch { clean, noisy };

/// Bottom-up encodings a^1..a^L (or a_n^1..a_n^L), finest first.
struct FeatureStack {
  std::vector<torch::Tensor> features;
  std::size_t size() const { return features.size(); }
};

/// A sampled L-layer latent stack with the Gaussian each layer was drawn from.
///
/// `decoding[l]` is the top-down feature that conditioned layer l (b^{l+1}
/// in one-based notation); it is kept so that heads of the other branch and
/// the final decoders can reuse the path without recomputing it.
struct LatentHierarchy {
  std::vector<torch::Tensor> layers;
  std::vector<GaussianParams> params;
  std::vector<torch::Tensor> decoding;
  std::optional<torch::Tensor> level;
  // Output of the layer-0 decoder, filled by the top-down pass.
  torch::Tensor image_mean;

  std::size_t size() const { return layers.size(); }
};

namespace detail {

inline torch::Tensor lrelu(const torch::Tensor& x) { return torch::leaky_relu(x, 0.2); }

inline torch::nn::LeakyReLU leaky() { return torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)); }

inline torch::nn::Conv2d conv3x3(int in, int out, int stride = 1) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

inline torch::Tensor level_map(const torch::Tensor& level, const torch::Tensor& like) {
  auto l = (level.to(like.dtype()) * kLevelInputScale).reshape({-1, 1, 1, 1});
  return l.expand({like.size(0), 1, like.size(2), like.size(3)});
}

}  // namespace detail

// Residual dense block: densely connected 3x3 convolutions, 1x1 local
// feature fusion and a residual connection.
struct ResidualDenseBlockImpl : torch::nn::Module {
  ResidualDenseBlockImpl(int channels, int growth, int convs) {
    for (int i = 0; i < convs; ++i) {
      convs_->push_back(detail::conv3x3(channels + i * growth, growth));
    }
    register_module("convs", convs_);
    fuse_ = register_module("fuse", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels + convs * growth, channels, 1)));
  }

  torch::Tensor forward(const torch::Tensor& x) {
    std::vector<torch::Tensor> dense{x};
    for (auto& m : *convs_) {
      dense.push_back(detail::lrelu(m->as<torch::nn::Conv2d>()->forward(torch::cat(dense, 1))));
    }
    return x + fuse_->forward(torch::cat(dense, 1));
  }

 private:
  torch::nn::ModuleList convs_;
  torch::nn::Conv2d fuse_{nullptr};
};
TORCH_MODULE(ResidualDenseBlock);

// f^1..f^L: a stem convolution followed by one (optionally strided) RDB stage per layer.
struct EncoderImpl : torch::nn::Module {
  explicit EncoderImpl(const ModelConfig& cfg) {
    const int c = cfg.base_channels;
    stem_ = register_module("stem", detail::conv3x3(cfg.image_channels, c, cfg.stride_schedule[0]));
    for (int l = 0; l < cfg.layers; ++l) {
      torch::nn::Sequential stage;
      if (l > 0 && cfg.stride_schedule[static_cast<std::size_t>(l)] > 1) {
        stage->push_back(detail::conv3x3(c, c, cfg.stride_schedule[static_cast<std::size_t>(l)]));
      }
      stage->push_back(ResidualDenseBlock(c, cfg.rdb_growth, cfg.rdb_convs));
      stages_->push_back(stage);
    }
    register_module("stages", stages_);
  }

  FeatureStack forward(const torch::Tensor& image) {
    FeatureStack out;
    auto h = stem_->forward(image);
    for (auto& stage : *stages_) {
      h = stage->as<torch::nn::Sequential>()->forward(h);
      out.features.push_back(h);
    }
    return out;
  }

 private:
  torch::nn::Conv2d stem_{nullptr};
  torch::nn::ModuleList stages_;
};
TORCH_MODULE(Encoder);

// Maps a conditioning feature map to the mean / log-variance of one latent layer.
struct GaussianHeadImpl : torch::nn::Module {
  GaussianHeadImpl(int in_channels, int hidden, int latent_channels) {
    hidden_ = register_module("hidden", detail::conv3x3(in_channels, hidden));
    out_ = register_module("out", detail::conv3x3(hidden, 2 * latent_channels));
    torch::NoGradGuard no_grad;
    out_->weight.mul_(0.1);
    out_->bias.zero_();
  }

  GaussianParams forward(const torch::Tensor& x) {
    auto h = out_->forward(detail::lrelu(hidden_->forward(x)));
    auto parts = h.chunk(2, 1);
    return {parts[0].contiguous(), parts[1].contiguous()};
  }

 private:
  torch::nn::Conv2d hidden_{nullptr}, out_{nullptr};
};
TORCH_MODULE(GaussianHead);

// g^l: fuse a latent with the incoming top-down feature, refine with an RDB,
// upsample to the next finer layer and project to `out_channels`.
struct DecodeBlockImpl : torch::nn::Module {
  DecodeBlockImpl(int in_channels, const ModelConfig& cfg, int out_channels, int upsample) : upsample_(upsample) {
    const int c = cfg.base_channels;
    in_ = register_module("entry", detail::conv3x3(in_channels, c));
    block_ = register_module("block", ResidualDenseBlock(c, cfg.rdb_growth, cfg.rdb_convs));
    out_ = register_module("out", detail::conv3x3(c, out_channels));
  }

  torch::Tensor forward(const torch::Tensor& x) {
    auto h = block_->forward(detail::lrelu(in_->forward(x)));
    if (upsample_ > 1) {
      h = torch::nn::functional::interpolate(
          h, torch::nn::functional::InterpolateFuncOptions()
                 .scale_factor(std::vector<double>{double(upsample_), double(upsample_)})
                 .mode(torch::kNearest));
    }
    return out_->forward(h);
  }

 private:
  int upsample_;
  torch::nn::Conv2d in_{nullptr}, out_{nullptr};
  ResidualDenseBlock block_{nullptr};
};
TORCH_MODULE(DecodeBlock);

/// The semi-supervised noise model.
///
/// q(z|x) doubles as the conditional prior p(z|x). q(z|y) has its own encoder
/// and heads but shares the content decoding path g, which is also the
/// generator p(x|z). The noise path (q(z_n|y,z), p(z_n|z), p(y|z,z_n)) has its
/// own decoding blocks; its posterior and prior heads see the same b_n^l.
struct SeNMVAEImpl : torch::nn::Module {
  explicit SeNMVAEImpl(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const int c = cfg_.base_channels;
    const int lc = cfg_.latent_channels;
    const int lv = cfg_.level_conditioning ? 1 : 0;
    clean_encoder_ = register_module("clean_encoder", Encoder(cfg_));
    noisy_encoder_ = register_module("noisy_encoder", Encoder(cfg_));
    for (int l = 0; l < cfg_.layers; ++l) {
      const int up = cfg_.stride_schedule[static_cast<std::size_t>(l)];
      const bool finest = l == 0;
      clean_heads_->push_back(GaussianHead(2 * c, c, lc));
      noisy_heads_->push_back(GaussianHead(2 * c, c, lc));
      content_decoder_->push_back(DecodeBlock(lc + c, cfg_, finest ? cfg_.image_channels : c, up));
      noise_posterior_heads_->push_back(GaussianHead(c + lc + lv, c, lc));
      noise_prior_heads_->push_back(GaussianHead(lc + lv, c, lc));
      noise_decoder_->push_back(DecodeBlock(2 * lc + lv, cfg_, finest ? cfg_.image_channels : lc, up));
    }
    register_module("clean_heads", clean_heads_);
    register_module("noisy_heads", noisy_heads_);
    register_module("content_decoder", content_decoder_);
    register_module("noise_posterior_heads", noise_posterior_heads_);
    register_module("noise_prior_heads", noise_prior_heads_);
    register_module("noise_decoder", noise_decoder_);
  }

  const ModelConfig& config() const { return cfg_; }

  /// Bottom-up features of a clean (x) or noisy (y) patch batch [N,C,H,W].
  FeatureStack encode(const torch::Tensor& image, Branch which) {
    detail::require(image.dim() == 4, "encode: expected an [N,C,H,W] batch");
    cfg_.validate_patch(image.size(2), image.size(3));
    return which == Branch::clean ? clean_encoder_->forward(image) : noisy_encoder_->forward(image);
  }

  /// Top-down sample of z from q(z|x) or q(z|y). b^L = 0.
  LatentHierarchy infer_content(const FeatureStack& features, Branch branch, NoiseStream& noise) {
    check_layers(features.size(), "infer_content");
    LatentHierarchy z;
    z.layers.resize(layers());
    z.params.resize(layers());
    z.decoding.resize(layers());
    const auto& top = features.features.back();
    auto b = torch::zeros_like(top);
    for (int l = layers() - 1; l >= 0; --l) {
      const auto i = static_cast<std::size_t>(l);
      z.decoding[i] = b;
      z.params[i] = content_head(branch, l)->forward(torch::cat({features.features[i], b}, 1));
      z.layers[i] = sample_reparam(z.params[i], noise);
      auto out = content_decoder_[i]->as<DecodeBlock>()->forward(torch::cat({z.layers[i], b}, 1));
      if (l > 0) {
        b = out;
      } else {
        z.image_mean = out;
      }
    }
    return z;
  }

  /// Parameters of q(z^l | ., z^{>l}) for `branch`, evaluated along the
  /// decoding path of an existing hierarchy (typically one sampled from the
  /// other branch).
  std::vector<GaussianParams> content_params_along(const FeatureStack& features, Branch branch,
                                                   const LatentHierarchy& z) {
    check_layers(features.size(), "content_params_along");
    check_layers(z.decoding.size(), "content_params_along");
    std::vector<GaussianParams> out(layers());
    for (int l = 0; l < layers(); ++l) {
      const auto i = static_cast<std::size_t>(l);
      out[i] = content_head(branch, l)->forward(torch::cat({features.features[i], z.decoding[i]}, 1));
    }
    return out;
  }

  /// Top-down sample of z_n from q(z_n|y,z). b_n^L = z^L and
  /// b_n^{l-1} = z^{l-1} + g_n^l(z_n^l, b_n^l).
  LatentHierarchy infer_noise_latent(const FeatureStack& noisy_features, const LatentHierarchy& z, NoiseStream& noise,
                                     const std::optional<torch::Tensor>& level = std::nullopt) {
    check_layers(noisy_features.size(), "infer_noise_latent");
    return noise_top_down(z, noise, level, &noisy_features);
  }

  /// Top-down sample of z_n from the conditional prior p(z_n|z). Never sees y.
  LatentHierarchy prior_noise_latent(const LatentHierarchy& z, NoiseStream& noise,
                                     const std::optional<torch::Tensor>& level = std::nullopt) {
    return noise_top_down(z, noise, level, nullptr);
  }

  /// Parameters of p(z_n^l | z, z_n^{>l}) along the decoding path of `z_n`.
  std::vector<GaussianParams> noise_prior_params_along(const LatentHierarchy& z_n) {
    check_layers(z_n.decoding.size(), "noise_prior_params_along");
    std::vector<GaussianParams> out(layers());
    for (int l = 0; l < layers(); ++l) {
      const auto i = static_cast<std::size_t>(l);
      out[i] = noise_prior_heads_[i]->as<GaussianHead>()->forward(with_level(z_n.decoding[i], z_n.level));
    }
    return out;
  }

  /// Mean of p(x|z).
  torch::Tensor decode_clean(const LatentHierarchy& z) {
    check_layers(z.size(), "decode_clean");
    if (z.image_mean.defined()) return z.image_mean;
    auto b = torch::zeros({z.layers.back().size(0), cfg_.base_channels, z.layers.back().size(2), z.layers.back().size(3)},
                          z.layers.back().options());
    torch::Tensor out;
    for (int l = layers() - 1; l >= 0; --l) {
      const auto i = static_cast<std::size_t>(l);
      out = content_decoder_[i]->as<DecodeBlock>()->forward(torch::cat({z.layers[i], b}, 1));
      b = out;
    }
    return out;
  }

  /// Mean of p(y|z,z_n).
  torch::Tensor decode_noisy(const LatentHierarchy& z, const LatentHierarchy& z_n) {
    check_layers(z.size(), "decode_noisy");
    check_layers(z_n.size(), "decode_noisy");
    if (z_n.image_mean.defined()) return z_n.image_mean;
    auto b = z.layers.back();
    torch::Tensor out;
    for (int l = layers() - 1; l >= 0; --l) {
      const auto i = static_cast<std::size_t>(l);
      out = noise_decoder_[i]->as<DecodeBlock>()->forward(with_level(torch::cat({z_n.layers[i], b}, 1), z_n.level));
      if (l > 0) b = z.layers[i - 1] + out;
    }
    return out;
  }

  int layers() const { return cfg_.layers; }

  /// Parameter groups by role, for gradient audits.
  std::vector<std::pair<std::string, std::vector<torch::Tensor>>> parameter_groups() {
    std::vector<std::pair<std::string, std::vector<torch::Tensor>>> groups;
    for (const auto& item : named_children()) {
      groups.emplace_back(item.key(), item.value()->parameters());
    }
    return groups;
  }

  std::vector<torch::Tensor> branch_parameters(Branch branch) {
    std::vector<torch::Tensor> out;
    auto add = [&](const std::shared_ptr<torch::nn::Module>& m) {
      for (auto& p : m->parameters()) out.push_back(p);
    };
    if (branch == Branch::clean) {
      add(clean_encoder_.ptr());
      add(clean_heads_.ptr());
    } else {
      add(noisy_encoder_.ptr());
      add(noisy_heads_.ptr());
    }
    return out;
  }

 private:
  void check_layers(std::size_t n, const char* where) const {
    if (static_cast<int>(n) != cfg_.layers) {
      throw ContractViolation(std::string(where) + ": expected " + std::to_string(cfg_.layers) + " layers, got " +
                              std::to_string(n));
    }
  }

  GaussianHeadImpl* content_head(Branch branch, int l) {
    auto& list = branch == Branch::clean ? clean_heads_ : noisy_heads_;
    return list[static_cast<std::size_t>(l)]->as<GaussianHead>();
  }

  torch::Tensor with_level(const torch::Tensor& x, const std::optional<torch::Tensor>& level) const {
    if (!cfg_.level_conditioning) return x;
    if (!level.has_value() || !level->defined()) {
      throw ContractViolation("level conditioning is enabled but no degradation level was provided");
    }
    return torch::cat({x, detail::level_map(*level, x)}, 1);
  }

  LatentHierarchy noise_top_down(const LatentHierarchy& z, NoiseStream& noise, const std::optional<torch::Tensor>& level,
                                 const FeatureStack* noisy_features) {
    check_layers(z.size(), "noise latent");
    if (cfg_.level_conditioning && (!level.has_value() || !level->defined())) {
      throw ContractViolation("level conditioning is enabled but no degradation level was provided");
    }
    LatentHierarchy zn;
    zn.layers.resize(layers());
    zn.params.resize(layers());
    zn.decoding.resize(layers());
    if (cfg_.level_conditioning) zn.level = level;
    auto b = z.layers.back();
    for (int l = layers() - 1; l >= 0; --l) {
      const auto i = static_cast<std::size_t>(l);
      zn.decoding[i] = b;
      if (noisy_features != nullptr) {
        auto in = torch::cat({noisy_features->features[i], b}, 1);
        zn.params[i] = noise_posterior_heads_[i]->as<GaussianHead>()->forward(with_level(in, zn.level));
      } else {
        zn.params[i] = noise_prior_heads_[i]->as<GaussianHead>()->forward(with_level(b, zn.level));
      }
      zn.layers[i] = sample_reparam(zn.params[i], noise);
      auto out = noise_decoder_[i]->as<DecodeBlock>()->forward(with_level(torch::cat({zn.layers[i], b}, 1), zn.level));
      if (l > 0) {
        b = z.layers[i - 1] + out;
      } else {
        zn.image_mean = out;
      }
    }
    return zn;
  }

  ModelConfig cfg_;
  Encoder clean_encoder_{nullptr}, noisy_encoder_{nullptr};
  torch::nn::ModuleList clean_heads_, noisy_heads_, content_decoder_;
  torch::nn::ModuleList noise_posterior_heads_, noise_prior_heads_, noise_decoder_;
};
TORCH_MODULE(SeNMVAE);

/// Regresses the per-patch noise standard deviation from a noisy patch.
struct LevelPredictorImpl : torch::nn::Module {
  LevelPredictorImpl(int image_channels, int channels) {
    body_ = register_module(
        "body", torch::nn::Sequential(detail::conv3x3(image_channels, channels), detail::leaky(),
                                      detail::conv3x3(channels, channels), detail::leaky(),
                                      detail::conv3x3(channels, channels, 2), detail::leaky(),
                                      detail::conv3x3(channels, channels, 2), detail::leaky()));
    out_ = register_module("out", torch::nn::Linear(channels, 1));
  }

  /// sigma-hat >= 0 per item, shape [N].
  torch::Tensor forward(const torch::Tensor& noisy) {
    auto h = body_->forward(noisy).mean({2, 3});
    return torch::nn::functional::softplus(out_->forward(h)).squeeze(1) * 0.1;
  }

 private:
  torch::nn::Sequential body_{nullptr};
  torch::nn::Linear out_{nullptr};
};
TORCH_MODULE(LevelPredictor);

}  // namespace senm
