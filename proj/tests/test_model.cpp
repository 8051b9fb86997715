#include <gtest/gtest.h>

#include "senm/generator.hpp"
#include "senm/model.hpp"
#include "test_support.hpp"

using namespace senm;
using testing_support::make_model;
using testing_support::random_images;

namespace {

bool all_finite(const torch::Tensor& t) { return torch::isfinite(t).all().item<bool>(); }

ModelConfig tiny_leveled() {
  auto cfg = ModelConfig::tiny();
  cfg.level_conditioning = true;
  return cfg;
}

}  // namespace

TEST(ModelConfig, DefaultsAndValidation) {
  ModelConfig cfg;
  EXPECT_EQ(cfg.layers, 7);
  EXPECT_EQ(cfg.total_stride(), 8);
  EXPECT_EQ(cfg.latent_channels, 4);
  EXPECT_NO_THROW(cfg.validate_patch(64, 64));
  EXPECT_THROW(cfg.validate_patch(60, 64), ConfigError);
  cfg.stride_schedule = {1, 2};
  EXPECT_THROW(cfg.validate(), ConfigError);
  ModelConfig zero;
  zero.layers = 0;
  zero.stride_schedule = {};
  EXPECT_THROW(zero.validate(), ConfigError);
}

TEST(Encode, DefaultConfigShapes) {
  ModelConfig cfg;
  auto model = make_model(cfg, 1);
  torch::NoGradGuard no_grad;
  auto feats = model->encode(random_images(1, 64, 2), Branch::clean);
  ASSERT_EQ(feats.size(), 7u);
  const std::int64_t expected[] = {64, 32, 32, 16, 16, 8, 8};
  for (int l = 0; l < 7; ++l) {
    EXPECT_EQ(feats.features[l].sizes(), (std::vector<std::int64_t>{1, 64, expected[l], expected[l]}));
  }
}

TEST(Encode, IndivisibleSizeIsConfigError) {
  auto model = make_model(ModelConfig::tiny(), 1);
  EXPECT_THROW(model->encode(random_images(1, 15, 2), Branch::clean), ConfigError);
}

TEST(Encode, ZeroImageFiniteAndDeterministic) {
  auto model = make_model(ModelConfig::tiny(), 1);
  torch::NoGradGuard no_grad;
  auto zeros = torch::zeros({2, 3, 16, 16});
  auto a = model->encode(zeros, Branch::noisy), b = model->encode(zeros, Branch::noisy);
  for (std::size_t l = 0; l < a.size(); ++l) {
    EXPECT_TRUE(all_finite(a.features[l]));
    EXPECT_TRUE(torch::equal(a.features[l], b.features[l]));
  }
}

TEST(InferContent, TopLayerSeesZeroDecodingAndZeroNoiseGivesMeans) {
  auto model = make_model(ModelConfig::tiny(), 3);
  torch::NoGradGuard no_grad;
  auto noise = NoiseStream::zeros();
  auto z = model->infer_content(model->encode(random_images(2, 16, 4), Branch::clean), Branch::clean, noise);
  ASSERT_EQ(z.size(), 2u);
  EXPECT_EQ(z.decoding.back().abs().max().item<float>(), 0.0f);
  for (std::size_t l = 0; l < z.size(); ++l) {
    EXPECT_TRUE(torch::equal(z.layers[l], z.params[l].mean));
    EXPECT_EQ(z.layers[l].sizes(), z.params[l].sizes());
  }
  EXPECT_EQ(z.layers[0].sizes(), (std::vector<std::int64_t>{2, 2, 16, 16}));
  EXPECT_EQ(z.layers[1].sizes(), (std::vector<std::int64_t>{2, 2, 8, 8}));
}

TEST(InferContent, BranchesUseDisjointWeights) {
  auto model = make_model(ModelConfig::tiny(), 5);
  torch::NoGradGuard no_grad;
  auto x = random_images(2, 16, 6);
  auto run = [&] {
    auto noise = NoiseStream(7);
    return model->infer_content(model->encode(x, Branch::clean), Branch::clean, noise).layers[0].clone();
  };
  auto before = run();
  for (auto& p : model->branch_parameters(Branch::noisy)) p.add_(0.5);
  EXPECT_TRUE(torch::equal(before, run()));
  for (auto& p : model->branch_parameters(Branch::clean)) p.add_(0.5);
  EXPECT_FALSE(torch::equal(before, run()));
}

TEST(InferNoiseLatent, TopDecodingIsTopContentLatent) {
  auto model = make_model(ModelConfig::tiny(), 8);
  torch::NoGradGuard no_grad;
  NoiseStream noise(9);
  auto y = random_images(2, 16, 10);
  auto a_y = model->encode(y, Branch::noisy);
  auto z = model->infer_content(a_y, Branch::noisy, noise);
  auto zn = model->infer_noise_latent(a_y, z, noise);
  EXPECT_TRUE(torch::equal(zn.decoding.back(), z.layers.back()));
}

TEST(InferNoiseLatent, LevelConditioningIsLiveAndRequired) {
  auto model = make_model(tiny_leveled(), 11);
  torch::NoGradGuard no_grad;
  auto y = random_images(2, 16, 12);
  auto a_y = model->encode(y, Branch::noisy);
  auto zero_noise = NoiseStream::zeros();
  auto z = model->infer_content(a_y, Branch::noisy, zero_noise);
  auto lo = model->infer_noise_latent(a_y, z, zero_noise, torch::zeros({2}));
  auto hi = model->infer_noise_latent(a_y, z, zero_noise, torch::full({2}, 0.1));
  EXPECT_FALSE(torch::equal(lo.params[0].mean, hi.params[0].mean));
  for (std::size_t l = 0; l < lo.size(); ++l) EXPECT_TRUE(torch::equal(lo.layers[l], lo.params[l].mean));
  EXPECT_THROW(model->infer_noise_latent(a_y, z, zero_noise), ContractViolation);
  EXPECT_THROW(model->prior_noise_latent(z, zero_noise), ContractViolation);
}

TEST(PriorNoiseLatent, StochasticMeansAndShapes) {
  auto model = make_model(ModelConfig::tiny(), 13);
  torch::NoGradGuard no_grad;
  auto zero_noise = NoiseStream::zeros();
  auto x = random_images(2, 16, 14);
  auto z = model->infer_content(model->encode(x, Branch::clean), Branch::clean, zero_noise);
  NoiseStream s1(1), s2(2);
  auto a = model->prior_noise_latent(z, s1), b = model->prior_noise_latent(z, s2);
  EXPECT_FALSE(torch::equal(a.layers[0], b.layers[0]));
  auto m = model->prior_noise_latent(z, zero_noise);
  for (std::size_t l = 0; l < m.size(); ++l) EXPECT_TRUE(torch::equal(m.layers[l], m.params[l].mean));
  auto post = model->infer_noise_latent(model->encode(x, Branch::noisy), z, zero_noise);
  for (std::size_t l = 0; l < m.size(); ++l) EXPECT_EQ(m.params[l].sizes(), post.params[l].sizes());
  auto along = model->noise_prior_params_along(m);
  for (std::size_t l = 0; l < m.size(); ++l) EXPECT_TRUE(torch::equal(along[l].mean, m.params[l].mean));
}

TEST(Decode, ShapesDeterminismAndFiniteness) {
  auto model = make_model(ModelConfig::tiny(), 15);
  torch::NoGradGuard no_grad;
  auto x = random_images(3, 16, 16);
  NoiseStream noise(17);
  auto z = model->infer_content(model->encode(x, Branch::clean), Branch::clean, noise);
  auto zn = model->prior_noise_latent(z, noise);
  auto xc = model->decode_clean(z);
  auto yn = model->decode_noisy(z, zn);
  EXPECT_EQ(xc.sizes(), x.sizes());
  EXPECT_EQ(yn.sizes(), x.sizes());
  EXPECT_TRUE(all_finite(xc));
  EXPECT_TRUE(all_finite(yn));
  // Recomputing from the latents alone (no cached mean) gives the same images.
  LatentHierarchy z_bare = z, zn_bare = zn;
  z_bare.image_mean = torch::Tensor{};
  zn_bare.image_mean = torch::Tensor{};
  EXPECT_TRUE(torch::allclose(model->decode_clean(z_bare), xc));
  EXPECT_TRUE(torch::allclose(model->decode_noisy(z, zn_bare), yn));
  EXPECT_TRUE(torch::equal(model->decode_noisy(z, zn_bare), model->decode_noisy(z, zn_bare)));
}

TEST(Model, ForwardPassesNanFreeAtInitialization) {
  ModelConfig cfg;
  cfg.layers = 3;
  cfg.stride_schedule = {1, 2, 2};
  cfg.base_channels = 16;
  cfg.rdb_growth = 8;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    auto model = make_model(cfg, seed);
    torch::NoGradGuard no_grad;
    auto x = random_images(2, 32, seed + 100), y = random_images(2, 32, seed + 200);
    NoiseStream noise(seed);
    auto a_y = model->encode(y, Branch::noisy);
    auto z = model->infer_content(a_y, Branch::noisy, noise);
    auto zn = model->infer_noise_latent(a_y, z, noise);
    EXPECT_TRUE(all_finite(model->decode_noisy(z, zn)));
    auto zx = model->infer_content(model->encode(x, Branch::clean), Branch::clean, noise);
    EXPECT_TRUE(all_finite(model->decode_clean(zx)));
    EXPECT_TRUE(all_finite(model->decode_noisy(zx, model->prior_noise_latent(zx, noise))));
  }
}

TEST(AncestralSample, NeverTouchesTheNoisyBranch) {
  auto model = make_model(ModelConfig::tiny(), 18);
  NoiseStream noise(19);
  ancestral_sample(model, random_images(2, 16, 20), noise).sum().backward();
  for (const auto& item : model->named_parameters()) {
    const auto& key = item.key();
    const bool noisy_side = key.rfind("noisy_encoder.", 0) == 0 || key.rfind("noisy_heads.", 0) == 0 ||
                            key.rfind("noise_posterior_heads.", 0) == 0;
    const bool touched = item.value().grad().defined() && item.value().grad().abs().sum().item<double>() > 0.0;
    if (noisy_side) {
      EXPECT_FALSE(touched) << key;
    }
  }
  bool prior_touched = false;
  for (const auto& item : model->named_parameters()) {
    if (item.key().rfind("noise_prior_heads.", 0) == 0 && item.value().grad().defined()) prior_touched = true;
  }
  EXPECT_TRUE(prior_touched);
}

TEST(ParameterGroups, CoverEveryParameter) {
  auto model = make_model(ModelConfig::tiny(), 21);
  std::size_t grouped = 0;
  for (const auto& [name, params] : model->parameter_groups()) grouped += params.size();
  EXPECT_EQ(grouped, model->parameters().size());
}

TEST(LevelPredictor, NonNegativeAndShaped) {
  torch::manual_seed(0);
  LevelPredictor net(3, 8);
  torch::NoGradGuard no_grad;
  auto out = net->forward(random_images(5, 32, 22));
  EXPECT_EQ(out.sizes(), (std::vector<std::int64_t>{5}));
  EXPECT_TRUE((out >= 0).all().item<bool>());
}

// Trains on simulator pairs with known homoscedastic sigma; checks the three
// level-prediction contracts against that oracle.
TEST(LevelPredictor, LearnsSimulatorSigma) {
  torch::manual_seed(1);
  LevelPredictor net(3, 16);
  torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(2e-3));
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> sigma(0.0, 60.0 / 255.0);
  std::vector<torch::Tensor> bank;
  for (int i = 0; i < 64; ++i) bank.push_back(procedural_image(32, 500 + i, 0.2, 0.8));
  for (int it = 0; it < 1500; ++it) {
    std::vector<torch::Tensor> ys;
    std::vector<double> ss;
    for (int k = 0; k < 16; ++k) {
      const double s = k % 8 == 0 ? 0.0 : sigma(rng);
      const auto& x = bank[std::uniform_int_distribution<std::size_t>(0, bank.size() - 1)(rng)];
      ys.push_back(synth_degrade_hetero(x, s, 0.0, rng(), false));
      ss.push_back(s);
    }
    opt.zero_grad();
    auto loss = (net->forward(torch::stack(ys)) - torch::tensor(ss).to(torch::kFloat)).abs().mean();
    loss.backward();
    opt.step();
  }
  torch::NoGradGuard no_grad;
  net->eval();
  std::vector<torch::Tensor> clean, s10, s25, s50;
  for (int i = 0; i < 40; ++i) {
    auto x = procedural_image(32, 9000 + i, 0.2, 0.8);
    clean.push_back(x);
    s10.push_back(synth_degrade_hetero(x, 10.0 / 255, 0.0, 100 + i, false));
    s25.push_back(synth_degrade_hetero(x, 25.0 / 255, 0.0, 200 + i, false));
    s50.push_back(synth_degrade_hetero(x, 50.0 / 255, 0.0, 300 + i, false));
  }
  auto p_clean = net->forward(torch::stack(clean));
  auto p10 = net->forward(torch::stack(s10)), p25 = net->forward(torch::stack(s25)), p50 = net->forward(torch::stack(s50));
  EXPECT_LT(p_clean.median().item<double>(), 0.5 * 10.0 / 255);
  const double rel25 = std::abs(p25.median().item<double>() / (25.0 / 255) - 1.0);
  EXPECT_LT(rel25, 0.2);
  const double ordered = (p10 < p50).to(torch::kDouble).mean().item<double>();
  EXPECT_GE(ordered, 0.95);
}
