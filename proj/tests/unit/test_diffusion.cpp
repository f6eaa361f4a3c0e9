#include <cmath>

#include <doctest.h>
#include <torch/torch.h>

#include "csdiff/diffusion.hpp"
#include "csdiff/model.hpp"
#include "test_support.hpp"

using namespace csdiff;

namespace {

ConditionPack random_pack(std::int64_t batch, std::int64_t content_rows, std::int64_t style_rows, std::int64_t dim) {
  ConditionPack pack;
  pack.content = torch::randn({batch, content_rows, dim});
  pack.content_mask = torch::ones({batch, content_rows}, torch::kBool);
  pack.style = torch::randn({batch, style_rows, dim});
  return pack;
}

}  // namespace

TEST_CASE("linear schedule endpoints and monotonic alpha-bar") {
  NoiseSchedule s(1000, 1e-4, 2e-2);
  CHECK(s.beta(1) == doctest::Approx(1e-4));
  CHECK(s.beta(1000) == doctest::Approx(2e-2));
  CHECK(s.alpha_bar(0) == 1.0);
  for (std::int64_t t = 1; t <= 1000; ++t) CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
  CHECK(s.alpha_bar(2) == doctest::Approx((1 - s.beta(1)) * (1 - s.beta(2))));
  CHECK_THROWS_AS(s.check_timestep(0), InvalidArgument);
  CHECK_THROWS_AS(s.check_timestep(1001), InvalidArgument);
  CHECK_THROWS_AS(NoiseSchedule(0, 1e-4, 2e-2), InvalidArgument);
}

TEST_CASE("ddim timesteps are uniformly strided and descending") {
  NoiseSchedule s(100, 1e-4, 2e-2);
  CHECK(s.ddim_timesteps(4) == std::vector<std::int64_t>{100, 75, 50, 25});
  CHECK(s.ddim_timesteps(1) == std::vector<std::int64_t>{100});
  CHECK(s.ddim_timesteps(100).size() == 100);
  CHECK(s.ddim_timesteps(100).back() == 1);
  CHECK_THROWS_AS(s.ddim_timesteps(0), InvalidArgument);
  CHECK_THROWS_AS(s.ddim_timesteps(101), InvalidArgument);
}

TEST_CASE("forward noising reaches unit variance as alpha-bar vanishes") {
  NoiseSchedule s(1000, 1e-4, 2e-2);
  Rng rng(9);
  const std::int64_t n = 10000;
  auto z0 = torch::randn({n, 1, 1, 1}, rng.torch_generator(), torch::TensorOptions().dtype(torch::kFloat64));
  auto eps = torch::randn({n, 1, 1, 1}, rng.torch_generator(), torch::TensorOptions().dtype(torch::kFloat64));
  auto t = torch::full({n}, 1000, torch::kInt64);
  auto zt = s.add_noise(z0, t, eps);
  const double var = zt.var().item<double>();
  // standard error of the sample variance of a unit Gaussian: sqrt(2 / (n - 1))
  CHECK(std::abs(var - 1.0) < 3.0 * std::sqrt(2.0 / (n - 1)));

  auto t1 = torch::full({n}, 1, torch::kInt64);
  auto expect = std::sqrt(s.alpha_bar(1)) * z0 + std::sqrt(1 - s.alpha_bar(1)) * eps;
  CHECK(torch::allclose(s.add_noise(z0, t1, eps), expect));
}

TEST_CASE("singleton softmax returns the value row") {
  torch::manual_seed(0);
  MclCrossAttention layer(4, 6, 1, BlockRole::down);
  auto z = torch::randn({1, 1, 4});
  auto content = torch::randn({1, 1, 6});
  auto out = layer->attend_sequences(z, content, torch::ones({1, 1}, torch::kBool), {}, false);
  CHECK(torch::allclose(out, layer->content_v(content)));
  CHECK(torch::allclose(layer->attend_sequences(z, content, torch::ones({1, 1}, torch::kBool)), out + z));
}

TEST_CASE("mcl roles wire style projections into the middle block only") {
  torch::manual_seed(1);
  MclCrossAttention down(8, 6, 2, BlockRole::down), mid(8, 6, 2, BlockRole::middle), up(8, 6, 2, BlockRole::up);
  CHECK_FALSE(down->has_style_projections());
  CHECK(mid->has_style_projections());
  CHECK_FALSE(up->has_style_projections());

  auto z = torch::randn({2, 5, 8});
  auto pack = random_pack(2, 3, 4, 6);
  auto replaced = pack.with_style(torch::randn({2, 4, 6}));
  CHECK(torch::equal(down->forward(z, pack), down->forward(z, replaced)));
  CHECK(torch::equal(up->forward(z, pack), up->forward(z, replaced)));
  CHECK_FALSE(torch::allclose(mid->forward(z, pack), mid->forward(z, replaced)));

  CHECK_THROWS_AS(down->attend_sequences(z, pack.content, pack.content_mask, pack.style), InvalidArgument);
  CHECK(to_string(BlockRole::middle) == std::string("middle"));
}

TEST_CASE("attention probabilities are normalized and respect the content mask") {
  torch::manual_seed(2);
  MclCrossAttention mid(8, 6, 2, BlockRole::middle);
  auto z = torch::randn({2, 5, 8});
  auto pack = random_pack(2, 3, 4, 6);
  pack.content_mask[0][1] = false;
  auto p = mid->attention_probabilities(z, pack);
  CHECK(p.sizes() == torch::IntArrayRef({2, 2, 5, 7}));
  CHECK((p.sum(-1) - 1).abs().max().item<double>() < 1e-6);
  CHECK(p[0].select(-1, 1).abs().max().item<double>() == 0.0);
  CHECK(p[1].select(-1, 1).min().item<double>() > 0.0);

  MclCrossAttention down(8, 6, 2, BlockRole::down);
  CHECK(down->attention_probabilities(z, pack).size(-1) == 3);
}

TEST_CASE("content condition layout: text rows then projected content rows") {
  auto model = testing::make_tiny_model(4);
  const auto& cfg = model->config();
  auto tokens = model->tokenizer().batch({"ab", "abcd"});
  auto e_c = torch::randn({2, cfg.content_queries, cfg.query_dim});
  auto pack = model->build_content_condition(&tokens, e_c);
  const auto text_len = tokens.max_length();
  CHECK(pack.content.size(1) == text_len + cfg.content_queries);
  CHECK(torch::equal(pack.content.slice(1, text_len), model->proj->content(e_c)));
  CHECK(torch::equal(pack.content_mask.slice(1, 0, text_len), tokens.mask));
  CHECK(pack.content_mask.slice(1, text_len).all().item<bool>());

  auto text_only = model->build_content_condition(&tokens, torch::Tensor());
  CHECK(text_only.content.size(1) == text_len);
  auto emb_only = model->build_content_condition(nullptr, e_c);
  CHECK(emb_only.content.size(1) == cfg.content_queries);
  CHECK_THROWS_AS(model->build_content_condition(nullptr, torch::Tensor()), InvalidArgument);

  auto with_null_style = model->attach_style(pack, torch::Tensor());
  CHECK(with_null_style.style_is_null);
  CHECK(torch::equal(with_null_style.style[1], model->null->style));
  auto null = model->null_condition(3);
  CHECK(null.content_is_null);
  CHECK(null.batch_size() == 3);
}

TEST_CASE("denoiser shape contract, determinism and live style path") {
  auto model = testing::make_tiny_model(5);
  const auto& cfg = model->config();
  torch::NoGradGuard guard;
  auto z = torch::randn({2, cfg.latent_channels, cfg.latent_size, cfg.latent_size});
  auto t = torch::tensor({std::int64_t{1}, cfg.train_timesteps});
  auto pack = model->attach_style(model->null_condition(2), torch::randn({2, cfg.style_queries, cfg.query_dim}));
  UNetTrace trace;
  auto eps = model->predict_epsilon(z, t, pack, &trace);
  CHECK(eps.sizes() == z.sizes());
  CHECK(torch::equal(eps, model->predict_epsilon(z, t, pack)));
  CHECK(trace.down.size() == cfg.unet_widths.size());
  CHECK(trace.up.size() == cfg.unet_widths.size());
  CHECK(trace.middle.defined());

  auto other = pack.with_style(torch::randn_like(pack.style));
  CHECK_FALSE(torch::equal(eps, model->predict_epsilon(z, t, other)));
  CHECK(torch::equal(model->predict_epsilon(z, t, pack, nullptr, true),
                     model->predict_epsilon(z, t, other, nullptr, true)));

  CHECK_THROWS_AS(model->predict_epsilon(z, torch::tensor({0, 1}, torch::kInt64), pack), InvalidArgument);
  CHECK_THROWS_AS(model->predict_epsilon(z, torch::tensor({std::int64_t{1}, cfg.train_timesteps + 1}), pack), InvalidArgument);
  CHECK_THROWS_AS(model->predict_epsilon(z.slice(1, 0, 1), t, pack), InvalidArgument);
  CHECK_THROWS_AS(model->predict_epsilon(z, t, model->null_condition(3)), InvalidArgument);
}

TEST_CASE("timestep embedding") {
  auto e = timestep_embedding(torch::tensor({0, 5, 999}, torch::kInt64), 8);
  CHECK(e.sizes() == torch::IntArrayRef({3, 8}));
  CHECK(e.abs().max().item<double>() <= 1.0 + 1e-6);
  CHECK_FALSE(torch::allclose(e[1], e[2]));
}

TEST_CASE("reconstruction loss with scripted predictors") {
  NoiseSchedule s(100, 1e-4, 2e-2);
  auto z0 = torch::randn({3, 2, 4, 4});
  auto t = torch::tensor({1, 50, 100}, torch::kInt64);
  ConditionPack pack = random_pack(3, 2, 2, 4);

  auto captured = std::make_shared<torch::Tensor>();
  EpsilonPredictor oracle = [&](const torch::Tensor& zt, const torch::Tensor& tt, const ConditionPack&) {
    // recover ε exactly from z_t and z_0
    auto ab = s.alpha_bar_at(tt, zt.scalar_type());
    return (zt - ab.sqrt() * z0) / (1 - ab).sqrt();
  };
  Rng rng(3);
  auto perfect = reconstruction_loss(oracle, s, z0, t, pack, rng);
  CHECK(perfect.loss.item<double>() < 1e-10);

  EpsilonPredictor zero = [](const torch::Tensor& zt, const torch::Tensor&, const ConditionPack&) {
    return torch::zeros_like(zt);
  };
  Rng a(4), b(4);
  auto sample = reconstruction_loss(zero, s, z0, t, pack, a);
  CHECK(sample.loss.item<double>() == doctest::Approx(sample.noise.pow(2).mean().item<double>()));
  CHECK(reconstruction_loss(zero, s, z0, t, pack, b).loss.item<double>() == sample.loss.item<double>());
  CHECK_THROWS_AS(reconstruction_loss(zero, s, z0, torch::tensor({0, 1, 2}, torch::kInt64), pack, a), InvalidArgument);
}

TEST_CASE("cfg combine special cases") {
  auto u = torch::randn({2, 3}), c = torch::randn({2, 3});
  CHECK(torch::equal(cfg_combine(u, c, 1.0), c));
  CHECK(torch::equal(cfg_combine(u, c, 0.0), u));
  CHECK(torch::allclose(cfg_combine(c, c, 7.5), c));
  CHECK(torch::allclose(cfg_combine(u, c, 2.0), u + 2.0 * (c - u)));
  CHECK_THROWS_AS(cfg_combine(u, c.slice(0, 0, 1), 2.0), InvalidArgument);
}

TEST_CASE("ddim sampling contracts") {
  auto model = testing::make_tiny_model(6);
  const auto& cfg = model->config();
  NoiseSchedule s(cfg);
  torch::NoGradGuard guard;
  auto cond = model->attach_style(model->null_condition(2), torch::randn({2, cfg.style_queries, cfg.query_dim}));
  auto null = model->null_condition(2);
  const std::vector<std::int64_t> shape{2, cfg.latent_channels, cfg.latent_size, cfg.latent_size};
  DdimOptions opts;
  opts.steps = 5;
  opts.seed = 1;
  auto x = ddim_sample(model->epsilon_predictor(), s, cond, null, shape, opts);
  CHECK(x.sizes() == torch::IntArrayRef(shape));
  CHECK(torch::equal(x, ddim_sample(model->epsilon_predictor(), s, cond, null, shape, opts)));
  opts.seed = 2;
  CHECK_FALSE(torch::equal(x, ddim_sample(model->epsilon_predictor(), s, cond, null, shape, opts)));

  // guidance 1 never evaluates the unconditional branch
  int uncond_calls = 0;
  EpsilonPredictor counting = [&](const torch::Tensor& z, const torch::Tensor&, const ConditionPack& c) {
    if (c.content_is_null && c.style_is_null) ++uncond_calls;
    return torch::zeros_like(z);
  };
  opts.guidance_scale = 1.0;
  ddim_sample(counting, s, cond, null, shape, opts);
  CHECK(uncond_calls == 0);

  EpsilonPredictor zero = [](const torch::Tensor& z, const torch::Tensor&, const ConditionPack&) {
    return torch::zeros_like(z);
  };
  opts.steps = 1;
  opts.seed = 3;
  auto one = ddim_sample(zero, s, cond, null, shape, opts, torch::kFloat64);
  auto expected = ddim_initial_noise(shape, 3, torch::kFloat64) / std::sqrt(s.alpha_bar(cfg.train_timesteps));
  CHECK((one - expected).abs().max().item<double>() < 1e-6);

  opts.steps = 0;
  CHECK_THROWS_AS(ddim_sample(zero, s, cond, null, shape, opts), InvalidArgument);
}
