#pragma once

// JSON (de)serialization of the configuration structs. Unknown keys are
// rejected; absent keys keep their defaults.

#include <nlohmann/json.hpp>

#include <initializer_list>
#include <set>
#include <string>

#include "senm/datasets.hpp"
#include "senm/errors.hpp"
#include "senm/eval.hpp"
#include "senm/model.hpp"
#include "senm/objective.hpp"
#include "senm/schedule.hpp"

namespace senm {

using json = nlohmann::json;

namespace detail {

inline void reject_unknown_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& section) {
  if (!j.is_object()) throw ConfigError(section + ": expected a JSON object");
  const std::set<std::string> keys(allowed.begin(), allowed.end());
  for (const auto& [k, v] : j.items()) {
    if (!keys.count(k)) throw ConfigError(section + ": unknown key '" + k + "'");
  }
}

template <typename T>
void read_key(const json& j, const char* key, T& out, const std::string& section) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->template get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(section + "." + key + ": " + e.what());
  }
}

}  // namespace detail

inline json to_json(const ModelConfig& c) {
  return {{"layers", c.layers},
          {"base_channels", c.base_channels},
          {"rdb_growth", c.rdb_growth},
          {"rdb_convs", c.rdb_convs},
          {"stride_schedule", c.stride_schedule},
          {"latent_channels", c.latent_channels},
          {"image_channels", c.image_channels},
          {"level_conditioning", c.level_conditioning},
          {"level_predictor_channels", c.level_predictor_channels}};
}

inline ModelConfig model_config_from_json(const json& j) {
  const std::string s = "model";
  detail::reject_unknown_keys(j,
                              {"layers", "base_channels", "rdb_growth", "rdb_convs", "stride_schedule",
                               "latent_channels", "image_channels", "level_conditioning", "level_predictor_channels"},
                              s);
  ModelConfig c;
  detail::read_key(j, "layers", c.layers, s);
  detail::read_key(j, "base_channels", c.base_channels, s);
  detail::read_key(j, "rdb_growth", c.rdb_growth, s);
  detail::read_key(j, "rdb_convs", c.rdb_convs, s);
  detail::read_key(j, "stride_schedule", c.stride_schedule, s);
  detail::read_key(j, "latent_channels", c.latent_channels, s);
  detail::read_key(j, "image_channels", c.image_channels, s);
  detail::read_key(j, "level_conditioning", c.level_conditioning, s);
  detail::read_key(j, "level_predictor_channels", c.level_predictor_channels, s);
  c.validate();
  return c;
}

inline json to_json(const ObjectiveConfig& c) {
  return {{"lambda_kl", c.lambda_kl},
          {"p1", c.weights.p1},
          {"anneal_iters", c.anneal_iters},
          {"adversarial_enabled", c.adversarial_enabled},
          {"adversarial_weight", c.adversarial_weight},
          {"intensity_scale", c.intensity_scale}};
}

inline ObjectiveConfig objective_config_from_json(const json& j) {
  const std::string s = "objective";
  detail::reject_unknown_keys(
      j, {"lambda_kl", "p1", "anneal_iters", "adversarial_enabled", "adversarial_weight", "intensity_scale"}, s);
  ObjectiveConfig c;
  double p1 = c.weights.p1;
  detail::read_key(j, "lambda_kl", c.lambda_kl, s);
  detail::read_key(j, "p1", p1, s);
  detail::read_key(j, "anneal_iters", c.anneal_iters, s);
  detail::read_key(j, "adversarial_enabled", c.adversarial_enabled, s);
  detail::read_key(j, "adversarial_weight", c.adversarial_weight, s);
  detail::read_key(j, "intensity_scale", c.intensity_scale, s);
  c.weights = MixtureWeights::from_p1(p1);
  try {
    c.validate();
  } catch (const ContractViolation& e) {
    throw ConfigError(e.what());
  }
  return c;
}

inline json to_json(const TrainConfig& c) {
  return {{"total_iters", c.total_iters},
          {"lr_init", c.lr_init},
          {"lr_milestones", c.lr_milestones},
          {"batch_size", c.batch_size},
          {"patch_size", c.patch_size},
          {"domain_probs", c.domain_probs},
          {"seed", c.seed},
          {"checkpoint_every", c.checkpoint_every},
          {"eval_every", c.eval_every},
          {"grad_clip", c.grad_clip},
          {"augment", c.augment},
          {"discriminator_channels", c.discriminator_channels}};
}

inline TrainConfig train_config_from_json(const json& j) {
  const std::string s = "train";
  detail::reject_unknown_keys(j,
                              {"total_iters", "lr_init", "lr_milestones", "batch_size", "patch_size", "domain_probs",
                               "seed", "checkpoint_every", "eval_every", "grad_clip", "augment",
                               "discriminator_channels"},
                              s);
  TrainConfig c;
  detail::read_key(j, "total_iters", c.total_iters, s);
  detail::read_key(j, "lr_init", c.lr_init, s);
  detail::read_key(j, "lr_milestones", c.lr_milestones, s);
  detail::read_key(j, "batch_size", c.batch_size, s);
  detail::read_key(j, "patch_size", c.patch_size, s);
  detail::read_key(j, "domain_probs", c.domain_probs, s);
  detail::read_key(j, "seed", c.seed, s);
  detail::read_key(j, "checkpoint_every", c.checkpoint_every, s);
  detail::read_key(j, "eval_every", c.eval_every, s);
  detail::read_key(j, "grad_clip", c.grad_clip, s);
  detail::read_key(j, "augment", c.augment, s);
  detail::read_key(j, "discriminator_channels", c.discriminator_channels, s);
  c.validate();
  return c;
}

inline json to_json(const SplitSpec& c) {
  return {{"paired_count", c.paired_count}, {"source_count", c.source_count},
          {"target_count", c.target_count}, {"patch_size", c.patch_size},
          {"patches_per_image", c.patches_per_image}, {"seed", c.seed}};
}

inline SplitSpec split_spec_from_json(const json& j) {
  const std::string s = "split";
  detail::reject_unknown_keys(
      j, {"paired_count", "source_count", "target_count", "patch_size", "patches_per_image", "seed"}, s);
  SplitSpec c;
  detail::read_key(j, "paired_count", c.paired_count, s);
  detail::read_key(j, "source_count", c.source_count, s);
  detail::read_key(j, "target_count", c.target_count, s);
  detail::read_key(j, "patch_size", c.patch_size, s);
  detail::read_key(j, "patches_per_image", c.patches_per_image, s);
  detail::read_key(j, "seed", c.seed, s);
  c.validate();
  return c;
}

inline json to_json(const DenoiserConfig& c) {
  return {{"layers", c.layers},         {"channels", c.channels}, {"iters", c.iters}, {"batch_size", c.batch_size},
          {"patch_size", c.patch_size}, {"lr", c.lr},             {"seed", c.seed}};
}

inline DenoiserConfig denoiser_config_from_json(const json& j) {
  const std::string s = "denoiser";
  detail::reject_unknown_keys(j, {"layers", "channels", "iters", "batch_size", "patch_size", "lr", "seed"}, s);
  DenoiserConfig c;
  detail::read_key(j, "layers", c.layers, s);
  detail::read_key(j, "channels", c.channels, s);
  detail::read_key(j, "iters", c.iters, s);
  detail::read_key(j, "batch_size", c.batch_size, s);
  detail::read_key(j, "patch_size", c.patch_size, s);
  detail::read_key(j, "lr", c.lr, s);
  detail::read_key(j, "seed", c.seed, s);
  c.validate();
  return c;
}

}  // namespace senm
