#include <fstream>

#include <doctest.h>
#include <torch/torch.h>

#include "csdiff/checkpoint.hpp"
#include "test_support.hpp"

using namespace csdiff;
namespace fs = std::filesystem;

namespace {

std::string bytes_of(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void one_step(Model& model, torch::optim::AdamW& optimizer) {
  optimizer.zero_grad();
  auto loss = torch::zeros({});
  for (auto& p : model->group_parameters("proj")) loss = loss + p.pow(2).sum();
  loss.backward();
  optimizer.step();
}

}  // namespace

TEST_CASE("save, load, save produces identical bytes") {
  testing::TempDir tmp;
  auto model = testing::make_tiny_model(1);
  CheckpointMeta meta{7, "generative", {{"model", model->config().to_json()}, {"train", {{"seed", 3}}}}};
  save_checkpoint(tmp / "a.ckpt", model, meta);

  auto other = testing::make_tiny_model(2);
  REQUIRE(parameter_payload(other) != parameter_payload(model));
  const auto back = load_checkpoint(tmp / "a.ckpt", other);
  CHECK(back.step == 7);
  CHECK(back.stage == "generative");
  CHECK(back.config == meta.config);
  CHECK(parameter_payload(other) == parameter_payload(model));

  save_checkpoint(tmp / "b.ckpt", other, back);
  CHECK(bytes_of(tmp / "a.ckpt") == bytes_of(tmp / "b.ckpt"));
  CHECK(bytes_of(tmp / "a.ckpt").starts_with("CSDFCKPT"));
}

TEST_CASE("optimizer moments survive a round trip") {
  testing::TempDir tmp;
  auto model = testing::make_tiny_model(3);
  auto params = model->group_parameters("proj");
  torch::optim::AdamW optimizer(params, torch::optim::AdamWOptions(1e-2));
  one_step(model, optimizer);
  one_step(model, optimizer);
  save_checkpoint(tmp / "opt.ckpt", model, {2, "generative", {{"model", model->config().to_json()}}}, &optimizer);

  auto restored = testing::make_tiny_model(4);
  torch::optim::AdamW restored_opt(restored->group_parameters("proj"), torch::optim::AdamWOptions(1e-2));
  load_checkpoint(tmp / "opt.ckpt", restored, &restored_opt);

  // one further step from identical state keeps the two runs in lockstep
  one_step(model, optimizer);
  one_step(restored, restored_opt);
  CHECK(parameter_payload(restored, {"proj"}) == parameter_payload(model, {"proj"}));
}

TEST_CASE("describe_checkpoint reports per-group counts") {
  testing::TempDir tmp;
  auto model = testing::make_tiny_model(5);
  save_checkpoint(tmp / "d.ckpt", model, {0, "init", {{"model", model->config().to_json()}}});
  const auto info = describe_checkpoint(tmp / "d.ckpt");
  CHECK(info.at("stage") == "init");
  CHECK(info.at("optimizer_tensors") == 0);
  std::int64_t total = 0;
  for (const auto& group : parameter_groups()) {
    REQUIRE(info.at("groups").contains(group));
    std::int64_t expected = 0;
    for (const auto& p : model->group_parameters(group)) expected += p.numel();
    CHECK(info.at("groups").at(group).at("elements") == expected);
    total += expected;
  }
  std::int64_t all = 0;
  for (const auto& p : model->parameters()) all += p.numel();
  CHECK(total == all);
  CHECK(checkpoint_model_config(tmp / "d.ckpt").to_json() == model->config().to_json());
}

TEST_CASE("load_model rebuilds from the stored config") {
  testing::TempDir tmp;
  auto cfg = ModelConfig::tiny();
  cfg.style_queries = 3;
  auto model = testing::make_model(cfg, 6);
  save_checkpoint(tmp / "m.ckpt", model, {1, "disentangle", {{"model", cfg.to_json()}}});
  CheckpointMeta meta;
  auto loaded = load_model(tmp / "m.ckpt", &meta);
  CHECK(loaded->config().style_queries == 3);
  CHECK(meta.stage == "disentangle");
  CHECK(parameter_payload(loaded) == parameter_payload(model));
}

TEST_CASE("mismatched, truncated or foreign files raise IoError") {
  testing::TempDir tmp;
  auto model = testing::make_tiny_model(7);
  save_checkpoint(tmp / "ok.ckpt", model, {0, "init", {{"model", model->config().to_json()}}});

  auto cfg = ModelConfig::tiny();
  cfg.style_queries += 1;
  auto wider = testing::make_model(cfg, 7);
  CHECK_THROWS_AS(load_checkpoint(tmp / "ok.ckpt", wider), IoError);

  const auto bytes = bytes_of(tmp / "ok.ckpt");
  std::ofstream(tmp / "short.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() - 16);
  CHECK_THROWS_AS(load_checkpoint(tmp / "short.ckpt", model), IoError);

  auto flipped = bytes;
  flipped[8] = static_cast<char>(99);  // version field
  std::ofstream(tmp / "version.ckpt", std::ios::binary) << flipped;
  CHECK_THROWS_AS(read_checkpoint_header(tmp / "version.ckpt"), IoError);

  testing::write_text(tmp / "foreign.ckpt", "hello world, not a checkpoint");
  CHECK_THROWS_AS(load_checkpoint(tmp / "foreign.ckpt", model), IoError);
  CHECK_THROWS_AS(load_checkpoint(tmp / "absent.ckpt", model), IoError);
}
