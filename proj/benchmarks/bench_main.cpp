#include <benchmark/benchmark.h>
#include <torch/torch.h>

#include "csdiff/diffusion.hpp"
#include "csdiff/losses.hpp"
#include "csdiff/model.hpp"

using namespace csdiff;

namespace {

Model toy_model() {
  torch::manual_seed(0);
  return Model(ModelConfig::toy());
}

ConditionPack image_condition(Model& model, std::int64_t batch) {
  const auto& cfg = model->config();
  auto images = torch::rand({batch, cfg.image_channels, cfg.image_size, cfg.image_size}) * 2 - 1;
  std::vector<std::string> texts(static_cast<std::size_t>(batch), "left");
  auto tokens = model->tokenizer().batch(texts);
  auto visual = model->embed_images(images);
  return model->attach_style(model->build_content_condition(&tokens, visual.content_seq), visual.style_seq);
}

void BM_MclMiddleForward(benchmark::State& state) {
  torch::NoGradGuard guard;
  auto model = toy_model();
  const auto batch = state.range(0);
  auto cond = image_condition(model, batch);
  auto layer = model->mcl->middle;
  const auto width = layer->to_q->options.in_features();
  auto z = torch::randn({batch, 16, width});
  for (auto _ : state) benchmark::DoNotOptimize(layer(z, cond));
}
BENCHMARK(BM_MclMiddleForward)->Arg(1)->Arg(8);

void BM_UNetForward(benchmark::State& state) {
  torch::NoGradGuard guard;
  auto model = toy_model();
  const auto& cfg = model->config();
  const auto batch = state.range(0);
  auto cond = image_condition(model, batch);
  auto predictor = model->epsilon_predictor();
  auto z = torch::randn({batch, cfg.latent_channels, cfg.latent_size, cfg.latent_size});
  auto t = torch::full({batch}, cfg.train_timesteps / 2, torch::kInt64);
  for (auto _ : state) benchmark::DoNotOptimize(predictor(z, t, cond));
}
BENCHMARK(BM_UNetForward)->Arg(1)->Arg(8);

void BM_ItcLoss(benchmark::State& state) {
  torch::manual_seed(1);
  const auto n = state.range(0);
  auto a = torch::randn({n, 64}), b = torch::randn({n, 64});
  for (auto _ : state) benchmark::DoNotOptimize(itc_loss(a, b, 0.07));
}
BENCHMARK(BM_ItcLoss)->Arg(16)->Arg(256);

void BM_DisentangleLossBackward(benchmark::State& state) {
  auto model = toy_model();
  const auto& cfg = model->config();
  const auto batch = state.range(0);
  auto tok = model->tokenizer();
  std::vector<std::string> styles, contents;
  for (std::int64_t i = 0; i < batch; ++i) {
    styles.push_back(i % 2 ? "horizontal stripes" : "vertical stripes");
    contents.push_back(i % 2 ? "left" : "top");
  }
  DisentangleInputs inputs{torch::rand({batch, cfg.image_channels, cfg.image_size, cfg.image_size}) * 2 - 1,
                           tok.batch(styles), tok.batch(contents)};
  Rng rng(3);
  for (auto _ : state) {
    model->zero_grad();
    auto out = disentangle_loss(model->disentangle_modules(), inputs, cfg.temperature, rng);
    out.total.backward();
  }
}
BENCHMARK(BM_DisentangleLossBackward)->Arg(8);

}  // namespace

int main(int argc, char** argv) {
  at::set_num_threads(1);
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
