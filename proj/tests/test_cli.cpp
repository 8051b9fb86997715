#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sys/wait.h>

#include "senm/senm.hpp"
#include "test_support.hpp"

using namespace senm;
namespace fs = std::filesystem;

namespace {

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(SENM_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void write_json(const fs::path& p, const json& j) { std::ofstream(p) << j.dump(2); }

// 24 clean/noisy 32x32 pairs under root/clean, root/noisy.
fs::path make_dataset(const std::string& name) {
  auto root = testing_support::scratch_dir(name);
  for (int i = 0; i < 24; ++i) {
    auto x = quantize_8bit(procedural_image(32, 100 + i, 0.15, 0.7));
    auto y = quantize_8bit(synth_degrade_hetero(x, 0.03, 0.1, 500 + i));
    const auto file = "img" + std::to_string(i) + ".png";
    save_image(root / "clean" / file, x);
    save_image(root / "noisy" / file, y);
  }
  return root;
}

json tiny_train_config(const fs::path& root, std::int64_t iters) {
  return {{"manifest", (root / "split" / "split.tsv").string()},
          {"clean_dir", "clean"},
          {"noisy_dir", "noisy"},
          {"model", to_json(ModelConfig::tiny())},
          {"objective", {{"anneal_iters", 50}}},
          {"train",
           {{"total_iters", iters}, {"lr_init", 1e-3}, {"lr_milestones", json::array()}, {"batch_size", 4},
            {"patch_size", 16}, {"eval_every", 10}}}};
}

}  // namespace

// split -> train -> generate -> evaluate on a toy corpus, plus resume.
TEST(Cli, EndToEndToyPipeline) {
  auto root = make_dataset("cli_e2e");
  setenv("SENM_DATA_ROOT", root.c_str(), 1);
  write_json(root / "split.json", {{"split", {{"paired_count", 4}, {"source_count", 8}, {"target_count", 8}, {"patch_size", 32}}}});
  ASSERT_EQ(run_cli("split --config " + (root / "split.json").string() + " --seed 3 --out " + (root / "split").string(),
                    root / "split.log"),
            0);
  EXPECT_EQ(read_manifest(root / "split" / "split.tsv").size(), 20u);
  EXPECT_EQ(json::parse(std::ifstream(root / "split" / "config.json")).at("split").at("seed"), 3);

  write_json(root / "train.json", tiny_train_config(root, 200));
  ASSERT_EQ(run_cli("train --config " + (root / "train.json").string() + " --out " + (root / "run").string(),
                    root / "train.log"),
            0);
  EXPECT_TRUE(fs::exists(root / "run" / "final.pt"));
  EXPECT_TRUE(fs::exists(root / "run" / "config.json"));
  EXPECT_EQ(load_checkpoint(root / "run" / "final.pt").iteration, 200);
  {
    std::ifstream metrics(root / "run" / "metrics.jsonl");
    std::string line;
    int n = 0;
    while (std::getline(metrics, line)) ++n;
    EXPECT_EQ(n, 20);
  }

  auto more = tiny_train_config(root, 220);
  write_json(root / "more.json", more);
  ASSERT_EQ(run_cli("train --config " + (root / "more.json").string() + " --resume " + (root / "run" / "final.pt").string() +
                        " --out " + (root / "run2").string(),
                    root / "resume.log"),
            0);
  EXPECT_EQ(load_checkpoint(root / "run2" / "final.pt").iteration, 220);

  write_json(root / "gen.json", {{"checkpoint", (root / "run" / "final.pt").string()}, {"clean_dir", "clean"}, {"samples_per_input", 1}});
  ASSERT_EQ(run_cli("generate --config " + (root / "gen.json").string() + " --seed 1 --out " + (root / "gen").string(),
                    root / "gen.log"),
            0);
  EXPECT_EQ(list_images(root / "gen" / "noisy").size(), 24u);

  write_json(root / "eval.json", {{"real_clean_dir", "clean"},
                                  {"real_noisy_dir", "noisy"},
                                  {"generated_clean_dir", (root / "gen" / "clean").string()},
                                  {"generated_noisy_dir", (root / "gen" / "noisy").string()},
                                  {"min_pixels", 100},
                                  {"downstream",
                                   {{"test_clean_dir", "clean"},
                                    {"test_noisy_dir", "noisy"},
                                    {"denoiser", {{"iters", 20}, {"layers", 3}, {"patch_size", 16}}}}}});
  ASSERT_EQ(run_cli("evaluate --config " + (root / "eval.json").string() + " --out " + (root / "eval").string(),
                    root / "eval.log"),
            0);
  auto report = NoiseQualityReport::from_json(json::parse(std::ifstream(root / "eval" / "report.json")));
  EXPECT_TRUE(std::isfinite(report.kld));
  EXPECT_TRUE(report.psnr_downstream.has_value());
  EXPECT_EQ(report.per_bin_std.size(), 10u);
  EXPECT_EQ(report.n_images, 24);
  EXPECT_TRUE(fs::exists(root / "eval" / "per_bin_std.csv"));
  EXPECT_TRUE(fs::exists(root / "eval" / "samples.png"));
  unsetenv("SENM_DATA_ROOT");
}

TEST(Cli, ExitCodes) {
  auto root = make_dataset("cli_codes");
  write_json(root / "typo.json", {{"split", {{"paired_cnt", 4}}}});
  EXPECT_EQ(run_cli("split --config " + (root / "typo.json").string() + " --out " + (root / "o").string(), root / "a.log"), 2);
  EXPECT_EQ(run_cli("split --bogus-flag", root / "b.log"), 2);
  EXPECT_EQ(run_cli("split --config " + (root / "missing.json").string() + " --out " + (root / "o").string(), root / "c.log"), 2);

  write_json(root / "greedy.json", {{"clean_dir", (root / "clean").string()},
                                    {"noisy_dir", (root / "noisy").string()},
                                    {"split", {{"paired_count", 4}, {"source_count", 100}, {"patch_size", 32}}}});
  EXPECT_EQ(run_cli("split --config " + (root / "greedy.json").string() + " --out " + (root / "o").string(), root / "d.log"), 3);

  write_json(root / "split.json", {{"clean_dir", (root / "clean").string()},
                                   {"noisy_dir", (root / "noisy").string()},
                                   {"split", {{"paired_count", 4}, {"source_count", 8}, {"target_count", 8}, {"patch_size", 32}}}});
  ASSERT_EQ(run_cli("split --config " + (root / "split.json").string() + " --out " + (root / "split").string(), root / "e.log"), 0);
  auto diverge = tiny_train_config(root, 50);
  diverge["clean_dir"] = (root / "clean").string();
  diverge["noisy_dir"] = (root / "noisy").string();
  diverge["train"]["lr_init"] = 1e30;
  write_json(root / "diverge.json", diverge);
  EXPECT_EQ(run_cli("train --config " + (root / "diverge.json").string() + " --out " + (root / "nan").string(), root / "f.log"), 4);
  EXPECT_TRUE(fs::exists(root / "nan" / "nan_abort.json"));
}

TEST(Cli, SplitIsReproducibleFromConfigAndSeed) {
  auto root = make_dataset("cli_repro");
  write_json(root / "split.json", {{"clean_dir", (root / "clean").string()},
                                   {"noisy_dir", (root / "noisy").string()},
                                   {"split", {{"paired_count", 10}, {"source_count", 6}, {"target_count", 6}, {"patch_size", 16}}}});
  for (const char* out : {"a", "b"}) {
    ASSERT_EQ(run_cli("split --config " + (root / "split.json").string() + " --seed 9 --out " + (root / out).string(),
                      root / "log"),
              0);
  }
  auto a = read_manifest(root / "a" / "split.tsv"), b = read_manifest(root / "b" / "split.tsv");
  ASSERT_EQ(a.size(), b.size());
  int paired = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].file, b[i].file);
    EXPECT_EQ(a[i].row, b[i].row);
    paired += a[i].domain == Domain::paired;
  }
  EXPECT_EQ(paired, 10);
}
