#include "csdiff/stylize.hpp"

namespace csdiff {
namespace {

torch::Tensor tile_image(const torch::Tensor& image, std::int64_t batch) {
  if (image.dim() != 3) throw InvalidArgument("request images must be [C, S, S]");
  return image.unsqueeze(0).expand({batch, -1, -1, -1}).contiguous();
}

}  // namespace

ConditionPack build_request_condition(Model& model, const StylizeRequest& request, std::int64_t batch,
                                      ConditionProvenance* provenance) {
  if (request.style_image && request.style_text) throw InvalidArgument("give a style image or a style text, not both");
  if (batch < 1) throw InvalidArgument("batch must be positive");
  torch::NoGradGuard guard;
  const auto tokenizer = model->tokenizer();
  ConditionProvenance source;

  const bool has_content = request.content_image.has_value() || request.content_text.has_value();
  ConditionPack pack;
  if (!has_content) {
    pack = model->null_condition(batch);
  } else {
    std::optional<TokenBatch> tokens;
    if (request.content_text) tokens = tokenizer.batch(std::vector<std::string>(batch, *request.content_text));
    torch::Tensor e_c;
    if (request.content_image) {
      e_c = model->embed_images(tile_image(*request.content_image, batch)).content_seq;
      source.content = request.content_text ? "image+text" : "image";
    } else {
      e_c = model->content_from_text(*tokens);
      source.content = "text";
    }
    pack = model->build_content_condition(tokens ? &*tokens : nullptr, e_c);
  }

  torch::Tensor e_s;
  if (request.style_image) {
    e_s = model->embed_images(tile_image(*request.style_image, batch)).style_seq;
    source.style = "image";
  } else if (request.style_text) {
    e_s = model->style_from_text(tokenizer.batch(std::vector<std::string>(batch, *request.style_text)));
    source.style = "text";
  }
  pack = model->attach_style(std::move(pack), e_s);
  if (provenance != nullptr) *provenance = source;
  return pack;
}

StylizeResult stylize(Model& model, const StylizeRequest& request) {
  if (request.samples < 1) throw InvalidArgument("samples must be positive");
  model->eval();
  StylizeResult result;
  auto cond = build_request_condition(model, request, request.samples, &result.provenance);
  ConditionPack null_cond;
  {
    torch::NoGradGuard guard;
    null_cond = model->null_condition(request.samples);
  }
  const auto& cfg = model->config();
  const NoiseSchedule schedule(cfg);
  result.latents = ddim_sample(model->epsilon_predictor(), schedule, cond, null_cond,
                               {request.samples, cfg.latent_channels, cfg.latent_size, cfg.latent_size}, request.ddim);
  return result;
}

nlohmann::json stylize_sidecar(const StylizeRequest& request, const ConditionProvenance& provenance) {
  nlohmann::json style = {{"source", provenance.style}};
  if (request.style_text) style["text"] = *request.style_text;
  nlohmann::json content = {{"source", provenance.content}};
  if (request.content_text) content["text"] = *request.content_text;
  return {{"seed", request.ddim.seed},
          {"guidance_scale", request.ddim.guidance_scale},
          {"steps", request.ddim.steps},
          {"samples", request.samples},
          {"eta", 0.0},
          {"style", style},
          {"content", content}};
}

}  // namespace csdiff
