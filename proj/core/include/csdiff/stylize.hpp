#pragma once

#include <optional>
#include <string>

#include <json.hpp>

#include "csdiff/diffusion.hpp"
#include "csdiff/model.hpp"

namespace csdiff {

/// Any of {style image | style text | nothing} × {content image | content
/// text | both | nothing}. Images are [C, S, S] at the model resolution.
struct StylizeRequest {
  std::optional<torch::Tensor> style_image;
  std::optional<std::string> style_text;
  std::optional<torch::Tensor> content_image;
  std::optional<std::string> content_text;
  std::int64_t samples = 1;
  DdimOptions ddim;
};

/// Where each condition came from: "image", "text", "image+text" or "null".
struct ConditionProvenance {
  std::string style = "null";
  std::string content = "null";
};

/// Builds the conditional pack for `batch` copies of the request. A missing
/// style uses the learned null style; a missing content uses the null content.
ConditionPack build_request_condition(Model& model, const StylizeRequest& request, std::int64_t batch,
                                      ConditionProvenance* provenance = nullptr);

struct StylizeResult {
  torch::Tensor latents;  // [samples, C, H, W]
  ConditionProvenance provenance;
};

StylizeResult stylize(Model& model, const StylizeRequest& request);

/// Sidecar contents for one stylize run.
nlohmann::json stylize_sidecar(const StylizeRequest& request, const ConditionProvenance& provenance);

}  // namespace csdiff
