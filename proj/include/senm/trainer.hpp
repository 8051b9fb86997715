#pragma once

// Three-domain training loop, learning-rate schedule, domain sampling and
// checkpoint serialization.

#include <torch/torch.h>

#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "senm/batch.hpp"
#include "senm/datasets.hpp"
#include "senm/model.hpp"
#include "senm/objective.hpp"
#include "senm/config.hpp"
#include "senm/schedule.hpp"

namespace senm {

/// One metrics-log line.
struct MetricsRecord {
  std::int64_t iter = 0;
  Domain domain = Domain::paired;
  double kl_noise = 0, kl_content = 0, rec_clean = 0, rec_noisy = 0, adv = 0;
  double loss_p = 0, loss_s = 0, loss_t = 0, total = 0, lr = 0;

  nlohmann::json to_json() const {
    return {{"iter", iter},         {"domain", to_string(domain)}, {"kl_noise", kl_noise}, {"kl_content", kl_content},
            {"rec_clean", rec_clean}, {"rec_noisy", rec_noisy},    {"adv", adv},           {"loss_p", loss_p},
            {"loss_s", loss_s},     {"loss_t", loss_t},            {"total", total},       {"lr", lr}};
  }

  static MetricsRecord from(std::int64_t iter, const LossBreakdown& b, double lr) {
    auto v = [](const torch::Tensor& t) { return t.defined() ? t.item<double>() : 0.0; };
    return {iter,        b.domain,    v(b.kl_noise), v(b.kl_content), v(b.rec_clean), v(b.rec_noisy),
            v(b.adv),    v(b.loss_p), v(b.loss_s),   v(b.loss_t),     v(b.total),     lr};
  }
};

inline constexpr const char* kCheckpointFormat = "senm-checkpoint/1";

/// Everything needed to resume training or to generate: configs, networks,
/// iteration counter, RNG states and the predicted target-domain levels used
/// for level-free generation.
struct DegradationModelCheckpoint {
  ModelConfig model_cfg;
  ObjectiveConfig objective_cfg;
  TrainConfig train_cfg;
  SeNMVAE model{nullptr};
  LevelPredictor level_net{nullptr};
  PatchDiscriminator discriminator{nullptr};
  std::int64_t iteration = 0;
  std::vector<double> target_levels;
};

class Trainer {
 public:
  Trainer(ModelConfig model_cfg, ObjectiveConfig objective_cfg, TrainConfig train_cfg)
      : rng_(train_cfg.seed), noise_(train_cfg.seed ^ 0x9E3779B97F4A7C15ULL) {
    model_cfg.validate();
    objective_cfg.validate();
    train_cfg.validate();
    torch::manual_seed(train_cfg.seed);
    state_.model_cfg = std::move(model_cfg);
    state_.objective_cfg = std::move(objective_cfg);
    state_.train_cfg = std::move(train_cfg);
    state_.model = SeNMVAE(state_.model_cfg);
    state_.level_net = LevelPredictor(state_.model_cfg.image_channels, state_.model_cfg.level_predictor_channels);
    if (state_.objective_cfg.adversarial_enabled) {
      state_.discriminator = PatchDiscriminator(state_.model_cfg.image_channels, state_.train_cfg.discriminator_channels);
    }
    make_optimizers();
  }

  /// Restores a trainer from a checkpoint, including optimizer and RNG state.
  static Trainer resume(const std::filesystem::path& path);

  const DegradationModelCheckpoint& state() const { return state_; }
  DegradationModelCheckpoint& state() { return state_; }
  std::int64_t iteration() const { return state_.iteration; }
  const std::vector<MetricsRecord>& history() const { return history_; }

  /// Append metrics lines to `path` every eval_every iterations.
  void set_metrics_log(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    metrics_ = std::make_shared<std::ofstream>(path, std::ios::app);
    if (!*metrics_) throw DataError("cannot open metrics log " + path.string());
  }
  /// Directory for periodic checkpoints and diagnostic snapshots.
  void set_output_dir(std::filesystem::path dir) { out_dir_ = std::move(dir); }

  /// Runs until `until_iter` (defaults to total_iters).
  void train(const SemiSplit& data, std::int64_t until_iter = -1) {
    check_data(data);
    if (until_iter < 0) until_iter = state_.train_cfg.total_iters;
    while (state_.iteration < until_iter) {
      step(data);
      const auto every = state_.train_cfg.checkpoint_every;
      if (every > 0 && !out_dir_.empty() && state_.iteration % every == 0) {
        save(out_dir_ / ("checkpoint_" + std::to_string(state_.iteration) + ".pt"));
      }
    }
  }

  /// One optimization step on a freshly sampled batch.
  MetricsRecord step(const SemiSplit& data) {
    auto& m = state_.model;
    const auto& tc = state_.train_cfg;
    const double lr = lr_at(state_.iteration, tc);
    const Domain d = sample_domain(rng_, tc);
    DomainBatch batch = draw_batch(data, d);

    m->train();
    auto b = total_loss(batch, m, state_.iteration, state_.objective_cfg, noise_,
                        state_.discriminator.is_empty() ? nullptr : &state_.discriminator);
    auto record = MetricsRecord::from(state_.iteration, b, lr);
    if (!std::isfinite(record.total)) abort_non_finite(record);

    set_lr(*optimizer_, lr);
    optimizer_->zero_grad();
    b.total.backward();
    if (tc.grad_clip > 0.0) torch::nn::utils::clip_grad_norm_(m->parameters(), tc.grad_clip);
    optimizer_->step();

    if (d == Domain::paired && state_.model_cfg.level_conditioning) {
      set_lr(*level_optimizer_, lr);
      level_optimizer_->zero_grad();
      auto pred = state_.level_net->forward(batch.y);
      (pred - batch.level).abs().mean().backward();
      level_optimizer_->step();
    }
    if (!state_.discriminator.is_empty() && b.fake_noisy.defined()) {
      set_lr(*disc_optimizer_, lr);
      disc_optimizer_->zero_grad();
      adversarial_terms(batch.y, b.fake_noisy.detach(), state_.discriminator).disc_loss.backward();
      disc_optimizer_->step();
    }

    history_.push_back(record);
    ++state_.iteration;
    if (metrics_ && (record.iter % tc.eval_every == 0)) {
      *metrics_ << record.to_json().dump() << '\n';
      metrics_->flush();
    }
    return record;
  }

  /// Draws a batch of domain `d` (random items, random sub-crops when the
  /// stored patches exceed patch_size, dihedral augmentation) with levels.
  DomainBatch draw_batch(const SemiSplit& data, Domain d) {
    const auto& tc = state_.train_cfg;
    const torch::Tensor& pool_a = d == Domain::paired ? data.paired_x : d == Domain::source ? data.source_x : data.target_y;
    const std::int64_t n = pool_a.size(0);
    if (n == 0) throw DataError("train: sampled the " + to_string(d) + " domain but it holds no patches");
    const std::int64_t stored = pool_a.size(2);
    const int p = static_cast<int>(std::min<std::int64_t>(tc.patch_size, stored));
    std::vector<torch::Tensor> xs, ys;
    std::uniform_int_distribution<std::int64_t> pick(0, n - 1);
    std::uniform_int_distribution<int> offset(0, static_cast<int>(stored) - p);
    for (int i = 0; i < tc.batch_size; ++i) {
      const auto idx = pick(rng_);
      const int r = offset(rng_), c = offset(rng_);
      const int k = tc.augment ? std::uniform_int_distribution<int>(0, 7)(rng_) : 0;
      auto take = [&](const torch::Tensor& pool) {
        return apply_dihedral(detail::crop(pool[idx], r, c, p), k);
      };
      if (d == Domain::paired) {
        xs.push_back(take(data.paired_x));
        ys.push_back(take(data.paired_y));
      } else if (d == Domain::source) {
        xs.push_back(take(data.source_x));
      } else {
        ys.push_back(take(data.target_y));
      }
    }
    DomainBatch batch;
    batch.domain = d;
    if (!xs.empty()) batch.x = torch::stack(xs);
    if (!ys.empty()) batch.y = torch::stack(ys);
    if (d == Domain::paired) batch.level = measure_level_batch(batch.x, batch.y);
    if (d == Domain::target && state_.model_cfg.level_conditioning) {
      torch::NoGradGuard no_grad;
      batch.level = state_.level_net->forward(batch.y).detach();
    }
    if (!state_.model_cfg.level_conditioning) batch.level = torch::Tensor{};
    else if (d == Domain::paired) batch.level = batch.level.detach();
    return batch;
  }

  /// Predicted levels of every target patch, stored for level-free generation.
  void refresh_target_levels(const SemiSplit& data) {
    state_.target_levels.clear();
    if (!state_.model_cfg.level_conditioning || data.count(Domain::target) == 0) return;
    torch::NoGradGuard no_grad;
    state_.level_net->eval();
    for (std::int64_t i = 0; i < data.target_y.size(0); i += 64) {
      auto chunk = data.target_y.slice(0, i, std::min<std::int64_t>(i + 64, data.target_y.size(0)));
      auto lv = state_.level_net->forward(chunk).to(torch::kDouble).contiguous();
      state_.target_levels.insert(state_.target_levels.end(), lv.data_ptr<double>(), lv.data_ptr<double>() + lv.numel());
    }
    state_.level_net->train();
  }

  void save(const std::filesystem::path& path) const;

  std::mt19937_64& domain_rng() { return rng_; }
  NoiseStream& noise() { return noise_; }

 private:
  static void set_lr(torch::optim::Optimizer& opt, double lr) {
    for (auto& g : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(g.options()).lr(lr);
  }

  void make_optimizers() {
    const double lr = state_.train_cfg.lr_init;
    optimizer_ = std::make_shared<torch::optim::Adam>(state_.model->parameters(), torch::optim::AdamOptions(lr));
    level_optimizer_ =
        std::make_shared<torch::optim::Adam>(state_.level_net->parameters(), torch::optim::AdamOptions(lr));
    if (!state_.discriminator.is_empty()) {
      disc_optimizer_ = std::make_shared<torch::optim::Adam>(state_.discriminator->parameters(),
                                                             torch::optim::AdamOptions(lr).betas({0.5, 0.999}));
    }
  }

  void check_data(const SemiSplit& data) const {
    const auto& p = state_.train_cfg.domain_probs;
    for (int d = 0; d < 3; ++d) {
      if (p[static_cast<std::size_t>(d)] > 0.0 && data.count(static_cast<Domain>(d)) == 0) {
        throw DataError("train: domain " + to_string(static_cast<Domain>(d)) +
                        " has non-zero sampling probability but no patches");
      }
    }
  }

  [[noreturn]] void abort_non_finite(const MetricsRecord& record) {
    std::string snapshot;
    if (!out_dir_.empty()) {
      std::filesystem::create_directories(out_dir_);
      auto path = out_dir_ / "nan_abort.json";
      std::ofstream(path) << record.to_json().dump(2) << '\n';
      save(out_dir_ / "nan_abort_checkpoint.pt");
      snapshot = path.string();
    }
    throw NumericalAbort("non-finite loss at iteration " + std::to_string(record.iter) + " (" +
                             to_string(record.domain) + " batch)",
                         snapshot);
  }

  DegradationModelCheckpoint state_;
  std::mt19937_64 rng_;
  NoiseStream noise_;
  std::shared_ptr<torch::optim::Adam> optimizer_, level_optimizer_, disc_optimizer_;
  std::vector<MetricsRecord> history_;
  std::shared_ptr<std::ofstream> metrics_;
  std::filesystem::path out_dir_;
};

namespace detail {

inline torch::Tensor levels_tensor(const std::vector<double>& v) {
  return torch::tensor(v, torch::TensorOptions().dtype(torch::kDouble));
}

inline std::vector<double> levels_vector(const torch::Tensor& t) {
  auto c = t.to(torch::kDouble).contiguous();
  return {c.data_ptr<double>(), c.data_ptr<double>() + c.numel()};
}

inline void read_format_tag(torch::serialize::InputArchive& in, const std::filesystem::path& path) {
  c10::IValue tag;
  if (!in.try_read("format", tag) || !tag.isString() || tag.toStringRef() != kCheckpointFormat) {
    throw DataError("not a " + std::string(kCheckpointFormat) + " checkpoint: " + path.string());
  }
}

inline void load_networks(torch::serialize::InputArchive& in, DegradationModelCheckpoint& s) {
  c10::IValue cfg, iteration;
  in.read("config", cfg);
  auto j = json::parse(cfg.toStringRef());
  s.model_cfg = model_config_from_json(j.at("model"));
  s.objective_cfg = objective_config_from_json(j.at("objective"));
  s.train_cfg = train_config_from_json(j.at("train"));
  in.read("iteration", iteration);
  s.iteration = iteration.toInt();
  s.model = SeNMVAE(s.model_cfg);
  s.level_net = LevelPredictor(s.model_cfg.image_channels, s.model_cfg.level_predictor_channels);
  torch::serialize::InputArchive model_in, level_in;
  in.read("model", model_in);
  s.model->load(model_in);
  in.read("level_net", level_in);
  s.level_net->load(level_in);
  if (s.objective_cfg.adversarial_enabled) {
    s.discriminator = PatchDiscriminator(s.model_cfg.image_channels, s.train_cfg.discriminator_channels);
    torch::serialize::InputArchive disc_in;
    in.read("discriminator", disc_in);
    s.discriminator->load(disc_in);
  }
  torch::Tensor levels;
  in.read("target_levels", levels);
  s.target_levels = levels_vector(levels);
}

}  // namespace detail

/// Writes a single versioned archive: format tag, JSON configs, iteration,
/// all network weights, optimizer moments, both RNG states and target levels.
inline void Trainer::save(const std::filesystem::path& path) const {
  torch::serialize::OutputArchive out;
  out.write("format", c10::IValue(std::string(kCheckpointFormat)));
  json cfg = {{"model", to_json(state_.model_cfg)},
              {"objective", to_json(state_.objective_cfg)},
              {"train", to_json(state_.train_cfg)}};
  out.write("config", c10::IValue(cfg.dump()));
  out.write("iteration", c10::IValue(state_.iteration));

  torch::serialize::OutputArchive model_out, level_out, opt_out, level_opt_out;
  state_.model->save(model_out);
  out.write("model", model_out);
  state_.level_net->save(level_out);
  out.write("level_net", level_out);
  optimizer_->save(opt_out);
  out.write("optimizer", opt_out);
  level_optimizer_->save(level_opt_out);
  out.write("level_optimizer", level_opt_out);
  if (!state_.discriminator.is_empty()) {
    torch::serialize::OutputArchive disc_out, disc_opt_out;
    state_.discriminator->save(disc_out);
    out.write("discriminator", disc_out);
    disc_optimizer_->save(disc_opt_out);
    out.write("disc_optimizer", disc_opt_out);
  }
  std::ostringstream rng_state;
  rng_state << rng_;
  out.write("rng_domain", c10::IValue(rng_state.str()));
  auto noise_gen = noise_;
  out.write("rng_noise", noise_gen.generator().get_state());
  out.write("target_levels", detail::levels_tensor(state_.target_levels));

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  out.save_to(path.string());
}

inline Trainer Trainer::resume(const std::filesystem::path& path) {
  torch::serialize::InputArchive in;
  try {
    in.load_from(path.string());
  } catch (const c10::Error& e) {
    throw DataError("cannot read checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
  detail::read_format_tag(in, path);
  DegradationModelCheckpoint loaded;
  detail::load_networks(in, loaded);

  Trainer t(loaded.model_cfg, loaded.objective_cfg, loaded.train_cfg);
  t.state_ = loaded;
  t.make_optimizers();
  torch::serialize::InputArchive opt_in, level_opt_in;
  in.read("optimizer", opt_in);
  t.optimizer_->load(opt_in);
  in.read("level_optimizer", level_opt_in);
  t.level_optimizer_->load(level_opt_in);
  if (!t.state_.discriminator.is_empty()) {
    torch::serialize::InputArchive disc_opt_in;
    in.read("disc_optimizer", disc_opt_in);
    t.disc_optimizer_->load(disc_opt_in);
  }
  c10::IValue rng_state;
  in.read("rng_domain", rng_state);
  std::istringstream(rng_state.toStringRef()) >> t.rng_;
  torch::Tensor noise_state;
  in.read("rng_noise", noise_state);
  t.noise_.generator().set_state(noise_state);
  return t;
}

/// Loads the networks and configs of a checkpoint for inference.
inline DegradationModelCheckpoint load_checkpoint(const std::filesystem::path& path) {
  torch::serialize::InputArchive in;
  try {
    in.load_from(path.string());
  } catch (const c10::Error& e) {
    throw DataError("cannot read checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
  detail::read_format_tag(in, path);
  DegradationModelCheckpoint s;
  detail::load_networks(in, s);
  s.model->eval();
  s.level_net->eval();
  return s;
}

}  // namespace senm
