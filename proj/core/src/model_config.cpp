#include "csdiff/model_config.hpp"

#include <sstream>

#include "csdiff/common.hpp"

namespace csdiff {
namespace {

// One row per scalar field: config key, json/field accessor.
template <typename Fn>
void for_each_int_field(ModelConfig& c, Fn&& fn) {
  fn("image_channels", c.image_channels);
  fn("image_size", c.image_size);
  fn("patch_size", c.patch_size);
  fn("encoder_dim", c.encoder_dim);
  fn("encoder_blocks", c.encoder_blocks);
  fn("encoder_heads", c.encoder_heads);
  fn("query_dim", c.query_dim);
  fn("query_heads", c.query_heads);
  fn("qformer_blocks", c.qformer_blocks);
  fn("style_queries", c.style_queries);
  fn("content_queries", c.content_queries);
  fn("cross_attention_every", c.cross_attention_every);
  fn("max_text_len", c.max_text_len);
  fn("decoder_blocks", c.decoder_blocks);
  fn("cond_dim", c.cond_dim);
  fn("backbone_text_blocks", c.backbone_text_blocks);
  fn("backbone_text_heads", c.backbone_text_heads);
  fn("latent_channels", c.latent_channels);
  fn("latent_size", c.latent_size);
  fn("norm_groups", c.norm_groups);
  fn("mcl_heads", c.mcl_heads);
  fn("train_timesteps", c.train_timesteps);
}

template <typename Fn>
void for_each_real_field(ModelConfig& c, Fn&& fn) {
  fn("temperature", c.temperature);
  fn("beta_start", c.beta_start);
  fn("beta_end", c.beta_end);
}

std::string join_widths(const std::vector<std::int64_t>& widths) {
  std::string out;
  for (auto w : widths) {
    if (!out.empty()) out += ",";
    out += std::to_string(w);
  }
  return out;
}

void require(bool ok, const std::string& message) {
  if (!ok) throw InvalidArgument("model config: " + message);
}

}  // namespace

void ModelConfig::validate() const {
  require(image_channels >= 1, "image_channels must be positive");
  require(patch_size >= 1 && image_size % patch_size == 0, "image_size must be divisible by patch_size");
  require(encoder_dim % encoder_heads == 0, "encoder_dim must be divisible by encoder_heads");
  require(query_dim % query_heads == 0, "query_dim must be divisible by query_heads");
  require(qformer_blocks >= 1, "qformer_blocks must be at least 1");
  require(style_queries >= 1 && content_queries >= 1, "query banks need at least one query each");
  require(cross_attention_every >= 1, "cross_attention_every must be at least 1");
  require(max_text_len >= 3, "max_text_len must be at least 3");
  require(temperature > 0.0, "temperature must be positive");
  require(cond_dim % backbone_text_heads == 0, "cond_dim must be divisible by backbone_text_heads");
  require(!unet_widths.empty(), "unet_widths must be non-empty");
  const std::int64_t shrink = std::int64_t{1} << (unet_widths.size() - 1);
  require(latent_size % shrink == 0, "latent_size must be divisible by 2^(levels-1)");
  for (auto w : unet_widths) {
    require(w % norm_groups == 0, "unet widths must be divisible by norm_groups");
    require(w % mcl_heads == 0, "unet widths must be divisible by mcl_heads");
  }
  require(image_channels == latent_channels, "image_channels must equal latent_channels (images double as latents)");
  require(image_size % latent_size == 0, "image_size must be a multiple of latent_size");
  require(train_timesteps >= 1, "train_timesteps must be positive");
  require(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0, "need 0 < beta_start <= beta_end < 1");
}

nlohmann::json ModelConfig::to_json() const {
  nlohmann::json j;
  auto copy = *this;
  for_each_int_field(copy, [&](const char* key, std::int64_t& v) { j[key] = v; });
  for_each_real_field(copy, [&](const char* key, double& v) { j[key] = v; });
  j["joint_queries"] = joint_queries;
  j["unet_widths"] = unet_widths;
  return j;
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  for_each_int_field(c, [&](const char* key, std::int64_t& v) { v = j.value(key, v); });
  for_each_real_field(c, [&](const char* key, double& v) { v = j.value(key, v); });
  c.joint_queries = j.value("joint_queries", c.joint_queries);
  if (j.contains("unet_widths")) c.unet_widths = j.at("unet_widths").get<std::vector<std::int64_t>>();
  c.validate();
  return c;
}

std::map<std::string, std::string> ModelConfig::defaults() { return ModelConfig{}.to_config_map(); }

std::map<std::string, std::string> ModelConfig::to_config_map() const {
  std::map<std::string, std::string> out;
  ModelConfig c = *this;
  for_each_int_field(c, [&](const char* key, std::int64_t& v) { out[std::string("model.") + key] = std::to_string(v); });
  for_each_real_field(c, [&](const char* key, double& v) {
    std::ostringstream s;
    s << v;
    out[std::string("model.") + key] = s.str();
  });
  out["model.joint_queries"] = c.joint_queries ? "true" : "false";
  out["model.unet_widths"] = join_widths(c.unet_widths);
  return out;
}

ModelConfig ModelConfig::from_config(const Config& config) {
  ModelConfig c;
  for_each_int_field(c, [&](const char* key, std::int64_t& v) {
    const std::string name = std::string("model.") + key;
    if (config.contains(name)) v = config.get_int(name);
  });
  for_each_real_field(c, [&](const char* key, double& v) {
    const std::string name = std::string("model.") + key;
    if (config.contains(name)) v = config.get_double(name);
  });
  if (config.contains("model.joint_queries")) c.joint_queries = config.get_bool("model.joint_queries");
  if (auto widths = config.get("model.unet_widths")) {
    c.unet_widths.clear();
    std::stringstream stream(*widths);
    std::string item;
    while (std::getline(stream, item, ',')) c.unet_widths.push_back(std::stoll(trim(item)));
  }
  c.validate();
  return c;
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.image_channels = 2;
  c.image_size = 8;
  c.patch_size = 4;
  c.encoder_dim = 8;
  c.encoder_blocks = 1;
  c.encoder_heads = 2;
  c.query_dim = 8;
  c.query_heads = 2;
  c.qformer_blocks = 2;
  c.style_queries = 2;
  c.content_queries = 3;
  c.max_text_len = 8;
  c.decoder_blocks = 1;
  c.cond_dim = 8;
  c.backbone_text_blocks = 1;
  c.backbone_text_heads = 2;
  c.latent_channels = 2;
  c.latent_size = 8;
  c.unet_widths = {4, 8};
  c.norm_groups = 2;
  c.mcl_heads = 2;
  c.train_timesteps = 100;
  return c;
}

ModelConfig ModelConfig::toy() {
  ModelConfig c;
  c.image_channels = 4;
  c.image_size = 16;
  c.patch_size = 4;
  c.latent_channels = 4;
  c.latent_size = 16;
  return c;
}

}  // namespace csdiff
