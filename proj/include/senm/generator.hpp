#pragma once

// Ancestral sampling of p(y|x) from a trained checkpoint and paired-dataset
// synthesis.

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "senm/datasets.hpp"
#include "senm/errors.hpp"
#include "senm/model.hpp"
#include "senm/trainer.hpp"

namespace senm {

struct GenerationRequest {
  fs::path clean_dir;
  std::vector<fs::path> clean_files;  // used instead of clean_dir when non-empty
  std::optional<double> level;
  std::map<std::string, double> per_image_level;  // keyed by file name; overrides `level`
  int samples_per_input = 1;
  std::uint64_t seed = 0;
  fs::path out_dir;

  void validate() const {
    if (samples_per_input < 1) throw ConfigError("generate: samples_per_input must be >= 1");
    if (level && *level < 0.0) throw ConfigError("generate: level must be >= 0");
    for (const auto& [file, v] : per_image_level) {
      if (v < 0.0) throw ConfigError("generate: level for " + file + " must be >= 0");
    }
    if (clean_files.empty() && clean_dir.empty()) throw ConfigError("generate: no clean source given");
    if (out_dir.empty()) throw ConfigError("generate: no output directory given");
  }
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace detail

/// Seed of the substream for (input, sample); independent of processing order.
inline std::uint64_t substream_seed(std::uint64_t seed, std::uint64_t input, std::uint64_t sample) {
  return detail::splitmix64(detail::splitmix64(detail::splitmix64(seed) ^ input) ^ sample);
}

/// Mean of p(y|z,z_n) with z ~ q(z|x) and z_n ~ p(z_n|z). Touches only the
/// clean encoder, the content heads of the clean branch, the noise prior and
/// the noise decoder. Unclipped and differentiable.
inline torch::Tensor ancestral_sample(SeNMVAE& model, const torch::Tensor& x, NoiseStream& noise,
                                      const std::optional<torch::Tensor>& level = std::nullopt) {
  auto z = model->infer_content(model->encode(x, Branch::clean), Branch::clean, noise);
  auto zn = model->prior_noise_latent(z, noise, level);
  return model->decode_noisy(z, zn);
}

/// Draws a level from the stored target-domain histogram.
inline double sample_stored_level(const DegradationModelCheckpoint& ckpt, std::mt19937_64& rng) {
  if (ckpt.target_levels.empty()) {
    throw ConfigError("generate: model is level-conditioned but the checkpoint holds no target levels; pass a level");
  }
  std::uniform_int_distribution<std::size_t> pick(0, ckpt.target_levels.size() - 1);
  return ckpt.target_levels[pick(rng)];
}

/// Degraded counterpart of clean `x` ([C,H,W] or [N,C,H,W]) in [0,1].
/// Without a level, a level-conditioned model draws one per item from the
/// stored target-level histogram; an unconditioned model ignores `level`.
inline torch::Tensor generate_degraded(const torch::Tensor& x, DegradationModelCheckpoint& ckpt,
                                       std::optional<double> level, std::uint64_t seed) {
  detail::require(x.dim() == 3 || x.dim() == 4, "generate_degraded: expected [C,H,W] or [N,C,H,W]");
  if (level) detail::require(*level >= 0.0, "generate_degraded: level must be >= 0");
  const bool single = x.dim() == 3;
  auto batch = single ? x.unsqueeze(0) : x;
  ckpt.model_cfg.validate_patch(batch.size(2), batch.size(3));

  torch::NoGradGuard no_grad;
  ckpt.model->eval();
  NoiseStream noise(seed);
  std::optional<torch::Tensor> lv;
  if (ckpt.model_cfg.level_conditioning) {
    std::vector<double> levels(static_cast<std::size_t>(batch.size(0)));
    std::mt19937_64 rng(detail::splitmix64(seed));
    for (auto& v : levels) v = level ? *level : sample_stored_level(ckpt, rng);
    lv = torch::tensor(levels, torch::TensorOptions().dtype(torch::kDouble)).to(batch.scalar_type());
  }
  auto y = ancestral_sample(ckpt.model, batch, noise, lv).clamp(0.0, 1.0);
  return single ? y.squeeze(0) : y;
}

/// One generated pair: clean and noisy files share `file` in clean/ and noisy/.
struct SynthesizedEntry {
  std::string file;
  std::string source;
  int sample = 0;
  std::uint64_t seed = 0;
  double level = std::numeric_limits<double>::quiet_NaN();  // NaN for unconditioned models
};

/// Writes out_dir/clean, out_dir/noisy, out_dir/manifest.tsv (split-manifest
/// format, every entry paired) and out_dir/generation.tsv (source, sample,
/// seed, level). Filenames are <source-stem>_s<sample>.png.
inline std::vector<SynthesizedEntry> synthesize_dataset(const GenerationRequest& request,
                                                        DegradationModelCheckpoint& ckpt) {
  request.validate();
  const auto files = request.clean_files.empty() ? list_images(request.clean_dir) : request.clean_files;
  if (files.empty()) throw DataError("generate: no clean images found");
  try {
    fs::create_directories(request.out_dir / "clean");
    fs::create_directories(request.out_dir / "noisy");
  } catch (const fs::filesystem_error& e) {
    throw DataError(std::string("generate: cannot create output directories: ") + e.what());
  }

  std::vector<SynthesizedEntry> out;
  std::vector<ManifestEntry> manifest;
  for (std::size_t i = 0; i < files.size(); ++i) {
    const auto x = load_image(files[i]);
    const auto name = files[i].filename().string();
    std::optional<double> level = request.level;
    if (auto it = request.per_image_level.find(name); it != request.per_image_level.end()) level = it->second;
    for (int s = 0; s < request.samples_per_input; ++s) {
      SynthesizedEntry e;
      e.source = name;
      e.sample = s;
      e.seed = substream_seed(request.seed, i, static_cast<std::uint64_t>(s));
      e.file = files[i].stem().string() + "_s" + std::to_string(s) + ".png";
      if (ckpt.model_cfg.level_conditioning) {
        if (level) {
          e.level = *level;
        } else {
          std::mt19937_64 rng(detail::splitmix64(e.seed));
          e.level = sample_stored_level(ckpt, rng);
        }
      }
      std::optional<double> used;
      if (!std::isnan(e.level)) used = e.level;
      const auto y = generate_degraded(x, ckpt, used, e.seed);
      save_image(request.out_dir / "clean" / e.file, x);
      save_image(request.out_dir / "noisy" / e.file, y);
      if (x.size(1) == x.size(2)) {
        ManifestEntry m;
        m.file = e.file;
        m.domain = Domain::paired;
        m.size = static_cast<int>(x.size(1));
        m.level = e.level;
        manifest.push_back(m);
      }
      out.push_back(e);
    }
  }
  if (manifest.size() == out.size()) write_manifest(request.out_dir / "manifest.tsv", manifest);

  std::ofstream gen(request.out_dir / "generation.tsv");
  if (!gen) throw DataError("generate: cannot write " + (request.out_dir / "generation.tsv").string());
  gen << "# file\tsource\tsample\tseed\tlevel\n";
  gen.precision(9);
  for (const auto& e : out) {
    gen << e.file << '\t' << e.source << '\t' << e.sample << '\t' << e.seed << '\t';
    if (std::isnan(e.level)) {
      gen << '-';
    } else {
      gen << e.level;
    }
    gen << '\n';
  }
  return out;
}

}  // namespace senm
