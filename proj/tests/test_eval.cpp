#include <gtest/gtest.h>

#include <algorithm>
#include <array>
#include <random>

#include "senm/eval.hpp"
#include "test_support.hpp"

using namespace senm;

namespace {

// Plain-loop histogram KL with the same epsilon smoothing.
double loop_kld(const std::vector<int>& a, const std::vector<int>& b) {
  std::array<double, 256> ha{}, hb{};
  for (int v : a) ha[static_cast<std::size_t>(v)] += 1;
  for (int v : b) hb[static_cast<std::size_t>(v)] += 1;
  double sa = 0, sb = 0;
  for (int i = 0; i < 256; ++i) {
    ha[i] += 1e-10;
    hb[i] += 1e-10;
    sa += ha[i];
    sb += hb[i];
  }
  double kl = 0;
  for (int i = 0; i < 256; ++i) kl += ha[i] / sa * std::log((ha[i] / sa) / (hb[i] / sb));
  return kl;
}

torch::Tensor codes_to_image(const std::vector<int>& codes) {
  std::vector<float> v(codes.begin(), codes.end());
  return torch::tensor(v).div(255.0f).reshape({1, 1, -1});
}

}  // namespace

TEST(PixelKld, IdenticalSetsAreZero) {
  auto x = testing_support::random_images(3, 16, 1);
  EXPECT_EQ(pixel_kld(unbind_batch(x), unbind_batch(x)), 0.0);
  EXPECT_THROW(pixel_kld({}, unbind_batch(x)), DataError);
}

TEST(PixelKld, MatchesLoopOracle) {
  std::mt19937 rng(3);
  std::vector<int> a(5000), b(7000);
  std::binomial_distribution<int> da(255, 0.3), db(255, 0.35);
  for (auto& v : a) v = da(rng);
  for (auto& v : b) v = db(rng);
  EXPECT_NEAR(pixel_kld({codes_to_image(a)}, {codes_to_image(b)}), loop_kld(a, b), 1e-9);
}

TEST(PixelKld, DisjointSupportIsFiniteAndLarge) {
  auto zeros = torch::zeros({3, 8, 8}), ones = torch::ones({3, 8, 8});
  const double k = pixel_kld({zeros}, {ones});
  EXPECT_TRUE(std::isfinite(k));
  EXPECT_GT(k, 10.0);
  EXPECT_NEAR(k, loop_kld(std::vector<int>(192, 0), std::vector<int>(192, 255)), 1e-9);
}

TEST(PixelKld, OrderInvariant) {
  auto x = unbind_batch(testing_support::random_images(4, 8, 2));
  auto y = unbind_batch(testing_support::random_images(4, 8, 3).pow(2));
  auto xr = x;
  std::reverse(xr.begin(), xr.end());
  EXPECT_NEAR(pixel_kld(x, y), pixel_kld(xr, y), 1e-12);
}

TEST(ResidualKld, SameNoiseModelIsSmall) {
  auto x = torch::full({1, 1000, 1000}, 0.5);
  auto y1 = quantize_8bit(synth_degrade_hetero(x, 0.05, 0, 1));
  auto y2 = quantize_8bit(synth_degrade_hetero(x, 0.05, 0, 2));
  EXPECT_LT(residual_kld({y1}, {x}, {y2}, {x}), 0.005);
  auto y3 = quantize_8bit(synth_degrade_hetero(x, 0.1, 0, 3));
  EXPECT_GT(residual_kld({y1}, {x}, {y3}, {x}), 0.1);
  EXPECT_THROW(residual_kld({y1}, {x.slice(1, 0, 10)}, {y2}, {x}), DataError);
}

TEST(Psnr, Examples) {
  auto x = testing_support::random_images(1, 16, 4)[0];
  EXPECT_TRUE(std::isinf(psnr(x, x)));
  auto y = x + 0.1;  // MSE 0.01
  EXPECT_NEAR(psnr(x, y), 20.0, 1e-5);
  EXPECT_DOUBLE_EQ(psnr(x, y), psnr(y, x));
}

TEST(PerBinStats, NoiselessIsZeroAndSparseBinsFlagged) {
  auto x = testing_support::random_images(2, 32, 5);
  for (const auto& b : per_bin_noise_stats(x, x, 10)) {
    EXPECT_TRUE(b.reported);
    EXPECT_EQ(b.std, 0.0);
  }
  auto half = torch::rand({3, 64, 64}) * 0.5;
  auto bins = per_bin_noise_stats(half, half, 10, 500);
  for (const auto& b : bins) {
    if (b.lo >= 0.5) {
      EXPECT_EQ(b.count, 0);
      EXPECT_FALSE(b.reported);
    }
  }
}

TEST(PerBinStats, RecoversAffineNoiseModel) {
  auto x = torch::rand({3, 256, 256}, torch::make_generator<torch::CPUGeneratorImpl>(6), torch::TensorOptions());
  auto y = synth_degrade_hetero(x, 0.02, 0.1, 7, false);
  auto bins = per_bin_noise_stats(x, y, 10);
  for (const auto& b : bins) {
    ASSERT_TRUE(b.reported);
    EXPECT_NEAR(b.std, 0.02 + 0.1 * b.center(), 0.05 * (0.02 + 0.1 * b.center()));
  }
  auto fit = fit_affine_std(bins);
  EXPECT_NEAR(fit.a, 0.02, 0.1 * 0.02);
  EXPECT_NEAR(fit.b, 0.1, 0.1 * 0.1);
}

TEST(Denoiser, UntrainedIsIdentity) {
  auto [x, y] = testing_support::hetero_pairs(3, 16, 8, 0.03, 0.0);
  DenoiserConfig cfg;
  cfg.iters = 0;
  auto net = train_downstream_denoiser(x, y, cfg);
  double expected = 0;
  for (int i = 0; i < 3; ++i) expected += psnr(y[i], x[i]);
  EXPECT_NEAR(evaluate_denoiser(net, x, y), expected / 3, 1e-9);
  EXPECT_THROW(train_downstream_denoiser(torch::zeros({0, 3, 16, 16}), torch::zeros({0, 3, 16, 16}), cfg), DataError);
}

TEST(Denoiser, ShortTrainingImprovesOnNoisyInput) {
  auto [x, y] = testing_support::hetero_pairs(8, 32, 9, 0.08, 0.0);
  DenoiserConfig cfg;
  cfg.iters = 300;
  cfg.layers = 4;
  auto net = train_downstream_denoiser(x, y, cfg);
  auto [tx, ty] = testing_support::hetero_pairs(4, 32, 99, 0.08, 0.0);
  double noisy = 0;
  for (int i = 0; i < 4; ++i) noisy += psnr(ty[i], tx[i]);
  EXPECT_GT(evaluate_denoiser(net, tx, ty), noisy / 4 + 1.0);
}

TEST(NoiseQualityReport, JsonRoundTrip) {
  NoiseQualityReport r;
  r.kld = 0.01;
  r.n_images = 5;
  r.psnr_downstream = std::numeric_limits<double>::infinity();
  BinStat b;
  b.lo = 0;
  b.hi = 0.1;
  b.count = 3;
  r.per_bin_std = {b};
  auto back = NoiseQualityReport::from_json(json::parse(r.to_json().dump()));
  EXPECT_TRUE(std::isinf(*back.psnr_downstream));
  EXPECT_FALSE(back.per_bin_std[0].reported);
  r.psnr_downstream.reset();
  EXPECT_FALSE(NoiseQualityReport::from_json(r.to_json()).psnr_downstream.has_value());
  EXPECT_THROW(NoiseQualityReport::from_json(json{{"kld", 1}}), DataError);
}

TEST(SampleGrid, WritesImage) {
  auto dir = testing_support::scratch_dir("grid");
  auto x = testing_support::random_images(3, 8, 1);
  save_sample_grid(dir / "g.png", x, x, x, 2);
  auto g = load_image(dir / "g.png");
  EXPECT_EQ(g.sizes(), (std::vector<std::int64_t>{3, 18, 28}));
}
