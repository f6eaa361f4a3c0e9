#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "csdiff/config.hpp"

namespace csdiff {

/// Architecture hyper-parameters for every network in the pipeline.
struct ModelConfig {
  // image encoder
  std::int64_t image_channels = 4;
  std::int64_t image_size = 32;
  std::int64_t patch_size = 8;
  std::int64_t encoder_dim = 64;
  std::int64_t encoder_blocks = 2;
  std::int64_t encoder_heads = 4;

  // querying transformer
  std::int64_t query_dim = 64;
  std::int64_t query_heads = 4;
  std::int64_t qformer_blocks = 4;
  std::int64_t style_queries = 16;
  std::int64_t content_queries = 16;
  /// 1: cross-attention in every block; 2: every second block (0, 2, ...).
  std::int64_t cross_attention_every = 1;
  /// Both query banks in one pass (true) or one pass per bank (false).
  bool joint_queries = true;
  std::int64_t max_text_len = 32;
  std::int64_t decoder_blocks = 2;
  double temperature = 0.07;

  // denoiser
  std::int64_t cond_dim = 64;
  std::int64_t backbone_text_blocks = 2;
  std::int64_t backbone_text_heads = 4;
  std::int64_t latent_channels = 4;
  std::int64_t latent_size = 16;
  std::vector<std::int64_t> unet_widths{32, 64, 128};
  std::int64_t norm_groups = 8;
  std::int64_t mcl_heads = 4;
  std::int64_t train_timesteps = 1000;
  double beta_start = 1e-4;
  double beta_end = 2e-2;

  std::int64_t patches() const { return (image_size / patch_size) * (image_size / patch_size); }

  /// Throws InvalidArgument on inconsistent sizes.
  void validate() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);

  /// `model.*` keys for Config-based overrides.
  static std::map<std::string, std::string> defaults();
  std::map<std::string, std::string> to_config_map() const;
  static ModelConfig from_config(const Config& config);

  /// A deliberately tiny geometry for finite-difference gradient checks.
  static ModelConfig tiny();
  /// The synthetic 4×16×16 latent geometry used by the toy experiment.
  static ModelConfig toy();
};

}  // namespace csdiff
