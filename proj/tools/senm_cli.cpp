// senm_cli: split / train / generate / evaluate.
//
// Each command reads a JSON config (unknown keys rejected, absent keys keep
// their defaults), applies flag overrides, archives the effective config as
// <out>/config.json and writes its artifacts under --out. Relative input
// paths resolve against $SENM_DATA_ROOT when set.
//
// Exit codes: 0 success, 2 config error, 3 data error, 4 numerical abort,
// 1 anything else.

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "senm/senm.hpp"

namespace fs = std::filesystem;
using senm::json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumerical = 4;

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string resume;
  bool print_config = false;
};

json read_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw senm::ConfigError("cannot read config file " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw senm::ConfigError("config " + path + ": " + e.what());
  }
}

fs::path resolve(const std::string& p) {
  if (p.empty()) return {};
  fs::path path(p);
  if (path.is_absolute()) return path;
  if (const char* root = std::getenv("SENM_DATA_ROOT"); root != nullptr && *root != '\0') return fs::path(root) / path;
  return path;
}

template <typename T>
T take(const json& j, const char* key, T fallback, const std::string& section) {
  senm::detail::read_key(j, key, fallback, section);
  return fallback;
}

void archive(const fs::path& out, const json& effective) {
  fs::create_directories(out);
  std::ofstream f(out / "config.json");
  if (!f) throw senm::DataError("cannot write " + (out / "config.json").string());
  f << effective.dump(2) << '\n';
}

fs::path require_out(const CommonFlags& flags) {
  if (flags.out.empty()) throw senm::ConfigError("--out is required");
  return flags.out;
}

/// Clean images of `clean_dir` with their same-named counterparts in `noisy_dir`.
struct PairedFolder {
  std::vector<torch::Tensor> clean, noisy;
  std::vector<std::string> names;
};

PairedFolder load_paired_folder(const fs::path& clean_dir, const fs::path& noisy_dir) {
  PairedFolder f;
  for (const auto& c : senm::list_images(clean_dir)) {
    const auto name = c.filename().string();
    if (!fs::exists(noisy_dir / name)) throw senm::DataError("no noisy counterpart for " + name + " in " + noisy_dir.string());
    f.clean.push_back(senm::load_image(c));
    f.noisy.push_back(senm::load_image(noisy_dir / name));
    if (f.clean.back().sizes() != f.noisy.back().sizes()) throw senm::DataError("size mismatch for pair " + name);
    f.names.push_back(name);
  }
  if (f.names.empty()) throw senm::DataError("no images in " + clean_dir.string());
  return f;
}

// ---------------------------------------------------------------------------
// split: {"clean_dir", "noisy_dir", "split": SplitSpec}

int cmd_split(const CommonFlags& flags) {
  const json cfg = read_config(flags.config);
  senm::detail::reject_unknown_keys(cfg, {"clean_dir", "noisy_dir", "split"}, "split config");
  auto spec = senm::split_spec_from_json(cfg.value("split", json::object()));
  if (flags.seed) spec.seed = *flags.seed;
  const auto clean_dir = resolve(take<std::string>(cfg, "clean_dir", "clean", "split config"));
  const auto noisy_dir = resolve(take<std::string>(cfg, "noisy_dir", "noisy", "split config"));
  const json effective = {{"clean_dir", clean_dir.string()}, {"noisy_dir", noisy_dir.string()}, {"split", senm::to_json(spec)}};
  if (flags.print_config) {
    std::cout << effective.dump(2) << '\n';
    return 0;
  }
  const auto out = require_out(flags);
  auto folder = load_paired_folder(clean_dir, noisy_dir);
  auto split = senm::build_semi_split(folder.clean, folder.noisy, spec, folder.names);
  archive(out, effective);
  senm::write_manifest(out / "split.tsv", split.manifest);
  std::cout << "split: " << split.count(senm::Domain::paired) << " paired, " << split.count(senm::Domain::source)
            << " source, " << split.count(senm::Domain::target) << " target -> " << (out / "split.tsv").string() << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// train: {"manifest", "clean_dir", "noisy_dir", "model", "objective", "train"}
// With --resume the network/objective/train settings come from the checkpoint;
// only train.total_iters may be raised.

int cmd_train(const CommonFlags& flags) {
  const json cfg = read_config(flags.config);
  const std::string s = "train config";
  senm::detail::reject_unknown_keys(cfg, {"manifest", "clean_dir", "noisy_dir", "model", "objective", "train"}, s);
  const auto manifest = resolve(take<std::string>(cfg, "manifest", "split.tsv", s));
  const auto clean_dir = resolve(take<std::string>(cfg, "clean_dir", "clean", s));
  const auto noisy_dir = resolve(take<std::string>(cfg, "noisy_dir", "noisy", s));
  auto model_cfg = senm::model_config_from_json(cfg.value("model", json::object()));
  auto objective_cfg = senm::objective_config_from_json(cfg.value("objective", json::object()));
  auto train_cfg = senm::train_config_from_json(cfg.value("train", json::object()));
  if (flags.seed) train_cfg.seed = *flags.seed;

  std::optional<senm::Trainer> trainer;
  if (!flags.resume.empty()) {
    if (flags.seed) throw senm::ConfigError("--seed cannot be combined with --resume");
    trainer.emplace(senm::Trainer::resume(resolve(flags.resume)));
    const bool override_iters = cfg.contains("train") && cfg["train"].contains("total_iters");
    if (override_iters) trainer->state().train_cfg.total_iters = train_cfg.total_iters;
    model_cfg = trainer->state().model_cfg;
    objective_cfg = trainer->state().objective_cfg;
    train_cfg = trainer->state().train_cfg;
  }
  const json effective = {{"manifest", manifest.string()},
                          {"clean_dir", clean_dir.string()},
                          {"noisy_dir", noisy_dir.string()},
                          {"model", senm::to_json(model_cfg)},
                          {"objective", senm::to_json(objective_cfg)},
                          {"train", senm::to_json(train_cfg)}};
  if (flags.print_config) {
    std::cout << effective.dump(2) << '\n';
    return 0;
  }
  const auto out = require_out(flags);
  auto split = senm::load_split(senm::read_manifest(manifest), clean_dir, noisy_dir);
  if (!trainer) trainer.emplace(model_cfg, objective_cfg, train_cfg);
  archive(out, effective);
  trainer->set_output_dir(out);
  trainer->set_metrics_log(out / "metrics.jsonl");
  trainer->train(split);
  trainer->refresh_target_levels(split);
  trainer->save(out / "final.pt");
  const auto& h = trainer->history();
  std::cout << "train: reached iteration " << trainer->iteration();
  if (!h.empty()) std::cout << ", last loss " << h.back().total;
  std::cout << " -> " << (out / "final.pt").string() << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// generate: {"checkpoint", "clean_dir", "level", "per_image_level",
//            "samples_per_input", "seed"}

int cmd_generate(const CommonFlags& flags) {
  const json cfg = read_config(flags.config);
  const std::string s = "generate config";
  senm::detail::reject_unknown_keys(cfg, {"checkpoint", "clean_dir", "level", "per_image_level", "samples_per_input", "seed"}, s);
  senm::GenerationRequest req;
  const auto checkpoint = resolve(take<std::string>(cfg, "checkpoint", "final.pt", s));
  req.clean_dir = resolve(take<std::string>(cfg, "clean_dir", "clean", s));
  if (cfg.contains("level") && !cfg["level"].is_null()) req.level = take<double>(cfg, "level", 0.0, s);
  req.per_image_level = take<std::map<std::string, double>>(cfg, "per_image_level", {}, s);
  req.samples_per_input = take<int>(cfg, "samples_per_input", 1, s);
  req.seed = flags.seed ? *flags.seed : take<std::uint64_t>(cfg, "seed", 0, s);
  req.out_dir = flags.out;
  const json effective = {{"checkpoint", checkpoint.string()},
                          {"clean_dir", req.clean_dir.string()},
                          {"level", req.level ? json(*req.level) : json(nullptr)},
                          {"per_image_level", req.per_image_level},
                          {"samples_per_input", req.samples_per_input},
                          {"seed", req.seed}};
  if (flags.print_config) {
    std::cout << effective.dump(2) << '\n';
    return 0;
  }
  require_out(flags);
  req.validate();
  auto ckpt = senm::load_checkpoint(checkpoint);
  archive(req.out_dir, effective);
  const auto entries = senm::synthesize_dataset(req, ckpt);
  std::cout << "generate: wrote " << entries.size() << " pairs -> " << req.out_dir.string() << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// evaluate: {"real_clean_dir", "real_noisy_dir", "generated_clean_dir",
//            "generated_noisy_dir", "n_bins", "min_pixels", "downstream"}
// downstream: null or {"test_clean_dir", "test_noisy_dir", "denoiser"}.

int cmd_evaluate(const CommonFlags& flags) {
  const json cfg = read_config(flags.config);
  const std::string s = "evaluate config";
  senm::detail::reject_unknown_keys(cfg,
                                    {"real_clean_dir", "real_noisy_dir", "generated_clean_dir", "generated_noisy_dir",
                                     "n_bins", "min_pixels", "downstream"},
                                    s);
  const auto real_clean = resolve(take<std::string>(cfg, "real_clean_dir", "real/clean", s));
  const auto real_noisy = resolve(take<std::string>(cfg, "real_noisy_dir", "real/noisy", s));
  const auto gen_clean = resolve(take<std::string>(cfg, "generated_clean_dir", "generated/clean", s));
  const auto gen_noisy = resolve(take<std::string>(cfg, "generated_noisy_dir", "generated/noisy", s));
  const int n_bins = take<int>(cfg, "n_bins", 10, s);
  const auto min_pixels = take<std::int64_t>(cfg, "min_pixels", 500, s);
  if (n_bins < 1 || min_pixels < 1) throw senm::ConfigError("evaluate: n_bins and min_pixels must be >= 1");

  json downstream = nullptr;
  std::optional<senm::DenoiserConfig> denoiser_cfg;
  fs::path test_clean, test_noisy;
  if (cfg.contains("downstream") && !cfg["downstream"].is_null()) {
    const auto& d = cfg["downstream"];
    senm::detail::reject_unknown_keys(d, {"test_clean_dir", "test_noisy_dir", "denoiser"}, "downstream");
    test_clean = resolve(take<std::string>(d, "test_clean_dir", "test/clean", "downstream"));
    test_noisy = resolve(take<std::string>(d, "test_noisy_dir", "test/noisy", "downstream"));
    denoiser_cfg = senm::denoiser_config_from_json(d.value("denoiser", json::object()));
    if (flags.seed) denoiser_cfg->seed = *flags.seed;
    downstream = {{"test_clean_dir", test_clean.string()},
                  {"test_noisy_dir", test_noisy.string()},
                  {"denoiser", senm::to_json(*denoiser_cfg)}};
  }
  const json effective = {{"real_clean_dir", real_clean.string()},
                          {"real_noisy_dir", real_noisy.string()},
                          {"generated_clean_dir", gen_clean.string()},
                          {"generated_noisy_dir", gen_noisy.string()},
                          {"n_bins", n_bins},
                          {"min_pixels", min_pixels},
                          {"downstream", downstream}};
  if (flags.print_config) {
    std::cout << effective.dump(2) << '\n';
    return 0;
  }
  const auto out = require_out(flags);
  auto real = load_paired_folder(real_clean, real_noisy);
  auto gen = load_paired_folder(gen_clean, gen_noisy);

  senm::NoiseQualityReport report;
  report.n_images = static_cast<std::int64_t>(gen.names.size());
  report.kld = senm::residual_kld(gen.noisy, gen.clean, real.noisy, real.clean);
  std::vector<torch::Tensor> gx, gy;
  for (std::size_t i = 0; i < gen.clean.size(); ++i) {
    gx.push_back(gen.clean[i].reshape({-1}));
    gy.push_back(gen.noisy[i].reshape({-1}));
  }
  report.per_bin_std = senm::per_bin_noise_stats(torch::cat(gx), torch::cat(gy), n_bins, min_pixels);
  if (denoiser_cfg) {
    auto test = load_paired_folder(test_clean, test_noisy);
    auto net = senm::train_downstream_denoiser(torch::stack(gen.clean), torch::stack(gen.noisy), *denoiser_cfg);
    report.psnr_downstream = senm::evaluate_denoiser(net, torch::stack(test.clean), torch::stack(test.noisy));
  }

  archive(out, effective);
  std::ofstream(out / "report.json") << report.to_json().dump(2) << '\n';
  senm::write_per_bin_csv(out / "per_bin_std.csv", report.per_bin_std);
  // Sample grid: first generated pairs beside the first real noisy image of the same size.
  std::vector<torch::Tensor> gc, rn, gn;
  for (std::size_t i = 0; i < gen.clean.size() && gc.size() < 4; ++i) {
    for (const auto& r : real.noisy) {
      if (r.sizes() == gen.clean[i].sizes()) {
        gc.push_back(gen.clean[i]);
        rn.push_back(r);
        gn.push_back(gen.noisy[i]);
        break;
      }
    }
  }
  if (!gc.empty()) senm::save_sample_grid(out / "samples.png", torch::stack(gc), torch::stack(rn), torch::stack(gn));
  std::cout << "evaluate: kld " << report.kld;
  if (report.psnr_downstream) std::cout << ", downstream PSNR " << *report.psnr_downstream << " dB";
  std::cout << " -> " << (out / "report.json").string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semi-supervised noise modeling: split, train, generate, evaluate"};
  app.require_subcommand(1);
  CommonFlags flags;

  auto add_common = [&](CLI::App* sub, bool resumable) {
    sub->add_option("--config", flags.config, "JSON config file (absent keys keep defaults)");
    sub->add_option("--seed", flags.seed, "Overrides the config seed");
    sub->add_option("--out", flags.out, "Output directory");
    if (resumable) sub->add_option("--resume", flags.resume, "Checkpoint to resume from");
    sub->add_flag("--print-config", flags.print_config, "Print the effective config with defaults and exit");
  };
  auto* split = app.add_subcommand("split", "Build paired/source/target manifests from a paired image folder");
  auto* train = app.add_subcommand("train", "Train the noise model on a split manifest");
  auto* generate = app.add_subcommand("generate", "Synthesize a paired dataset from clean images");
  auto* evaluate = app.add_subcommand("evaluate", "Score generated noise against real noisy images");
  add_common(split, false);
  add_common(train, true);
  add_common(generate, false);
  add_common(evaluate, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (split->parsed()) return cmd_split(flags);
    if (train->parsed()) return cmd_train(flags);
    if (generate->parsed()) return cmd_generate(flags);
    return cmd_evaluate(flags);
  } catch (const senm::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const senm::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const senm::NumericalAbort& e) {
    std::cerr << "numerical abort: " << e.what();
    if (!e.snapshot_path().empty()) std::cerr << " (snapshot " << e.snapshot_path() << ")";
    std::cerr << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
