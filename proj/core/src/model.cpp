#include "csdiff/model.hpp"

#include <torch/nn/functional/pooling.h>

namespace csdiff {

NullEmbeddingsImpl::NullEmbeddingsImpl(std::int64_t content_rows, std::int64_t style_rows, std::int64_t dim) {
  content = register_parameter("content", torch::randn({content_rows, dim}) * 0.1);
  style = register_parameter("style", torch::randn({style_rows, dim}) * 0.1);
}

const std::vector<std::string>& parameter_groups() {
  static const std::vector<std::string> groups{"encoders", "csdn", "itm", "itg", "mcl", "unet", "proj", "null"};
  return groups;
}

ModelImpl::ModelImpl(const ModelConfig& config) : config_(config) {
  config_.validate();
  encoders = register_module("encoders", Encoders(config_));
  csdn = register_module("csdn", Csdn(config_));
  itm = register_module("itm", ItmHeads());
  itg = register_module("itg", ItgDecoder(config_.query_dim, config_.query_heads, config_.decoder_blocks, kVocabSize));
  mcl = register_module("mcl", MclStack(config_.unet_widths, config_.cond_dim, config_.mcl_heads));
  unet = register_module("unet", UNet(config_));
  proj = register_module("proj", Projections(config_.query_dim, config_.cond_dim));
  null = register_module("null", NullEmbeddings(config_.content_queries, config_.style_queries, config_.cond_dim));
}

std::vector<torch::Tensor> ModelImpl::group_parameters(const std::string& group) const {
  const auto prefix = group + ".";
  std::vector<torch::Tensor> out;
  for (const auto& item : named_parameters()) {
    if (item.key().starts_with(prefix)) out.push_back(item.value());
  }
  if (out.empty()) throw InvalidArgument("no parameters in group '" + group + "'");
  return out;
}

DisentangledEmbeddings ModelImpl::embed_images(const torch::Tensor& images) {
  return csdn->extract_visual(encoders->image(images));
}

torch::Tensor ModelImpl::embed_text_tiled(const TokenBatch& tokens, TextMode mode, std::int64_t rows) {
  auto text = csdn->encode_text(encoders->tokens(tokens.ids), tokens.mask, mode);
  return text.pooled.unsqueeze(1).expand({-1, rows, -1}).contiguous();
}

torch::Tensor ModelImpl::style_from_text(const TokenBatch& tokens) {
  return embed_text_tiled(tokens, TextMode::style, config_.style_queries);
}

torch::Tensor ModelImpl::content_from_text(const TokenBatch& tokens) {
  return embed_text_tiled(tokens, TextMode::content, config_.content_queries);
}

ConditionPack ModelImpl::build_content_condition(const TokenBatch* content_tokens, const torch::Tensor& e_c) {
  if (content_tokens == nullptr) return build_content_condition(torch::Tensor(), torch::Tensor(), e_c);
  return build_content_condition(unet->text_encoder(*content_tokens), content_tokens->mask, e_c);
}

ConditionPack ModelImpl::build_content_condition(const torch::Tensor& text_features, const torch::Tensor& text_mask,
                                                  const torch::Tensor& e_c) {
  if (!text_features.defined() && !e_c.defined()) {
    throw InvalidArgument("content condition needs text features, content embeddings, or both");
  }
  std::vector<torch::Tensor> rows, masks;
  if (text_features.defined()) {
    if (text_features.dim() != 3 || text_features.size(2) != config_.cond_dim) {
      throw InvalidArgument("text features must be [B, L, " + std::to_string(config_.cond_dim) + "]");
    }
    rows.push_back(text_features);
    masks.push_back(text_mask.defined() ? text_mask.to(torch::kBool)
                                        : torch::ones({text_features.size(0), text_features.size(1)}, torch::kBool));
  }
  if (e_c.defined()) {
    auto projected = proj->content(e_c);
    rows.push_back(projected);
    masks.push_back(torch::ones({projected.size(0), projected.size(1)}, torch::kBool));
  }
  if (rows.size() == 2 && rows[0].size(0) != rows[1].size(0)) {
    throw InvalidArgument("text features and content embeddings disagree on batch size");
  }
  ConditionPack pack;
  pack.content = rows.size() == 1 ? rows[0] : torch::cat(rows, 1);
  pack.content_mask = masks.size() == 1 ? masks[0] : torch::cat(masks, 1);
  return attach_style(std::move(pack), torch::Tensor());
}

ConditionPack ModelImpl::attach_style(ConditionPack pack, const torch::Tensor& e_s) {
  const auto batch = pack.batch_size();
  if (e_s.defined()) {
    if (e_s.size(0) != batch) throw InvalidArgument("style embeddings disagree with the content batch size");
    pack.style = proj->style(e_s);
    pack.style_is_null = false;
  } else {
    pack.style = null->style.unsqueeze(0).expand({batch, -1, -1});
    pack.style_is_null = true;
  }
  return pack;
}

ConditionPack ModelImpl::null_condition(std::int64_t batch) {
  ConditionPack pack;
  pack.content = null->content.unsqueeze(0).expand({batch, -1, -1});
  pack.content_mask = torch::ones({batch, null->content.size(0)}, torch::kBool);
  pack.content_is_null = true;
  return attach_style(std::move(pack), torch::Tensor());
}

torch::Tensor ModelImpl::latents_from_images(const torch::Tensor& images) const {
  if (images.dim() != 4 || images.size(1) != config_.latent_channels) {
    throw InvalidArgument("images must be [B, " + std::to_string(config_.latent_channels) + ", S, S]");
  }
  const auto size = images.size(2);
  if (size == config_.latent_size) return images;
  if (size % config_.latent_size != 0) throw InvalidArgument("image size must be a multiple of the latent size");
  namespace F = torch::nn::functional;
  return F::avg_pool2d(images, F::AvgPool2dFuncOptions(size / config_.latent_size));
}

torch::Tensor ModelImpl::predict_epsilon(const torch::Tensor& z_t, const torch::Tensor& t, const ConditionPack& cond,
                                         UNetTrace* trace, bool ablate_middle) {
  return unet->forward(z_t, t, cond, mcl, trace, ablate_middle);
}

EpsilonPredictor ModelImpl::epsilon_predictor(bool ablate_middle) {
  return [this, ablate_middle](const torch::Tensor& z_t, const torch::Tensor& t, const ConditionPack& cond) {
    return predict_epsilon(z_t, t, cond, nullptr, ablate_middle);
  };
}

}  // namespace csdiff
