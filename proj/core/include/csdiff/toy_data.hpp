#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <torch/types.h>

#include "csdiff/common.hpp"
#include "csdiff/dataset.hpp"

namespace csdiff {

/// Synthetic factorized latents: content is which half is bright (left or
/// top), style is the orientation of period-2 stripes laid over it.
inline const std::array<std::string, 2> kToyContentTexts{"left", "top"};
inline const std::array<std::string, 2> kToyStyleTexts{"horizontal stripes", "vertical stripes"};

struct ToyOptions {
  std::int64_t samples_per_cell = 64;
  std::int64_t channels = 4;
  std::int64_t size = 16;
  double content_amplitude = 0.5;
  double stripe_amplitude = 0.35;
  double noise = 0.05;
};

/// In-memory training set shared by both stages.
struct TrainingData {
  torch::Tensor images;  // [N, C, S, S]
  std::vector<std::string> content_texts;
  std::vector<StyleText> styles;
  std::vector<int> content_labels;  // empty unless the data is synthetic
  std::vector<int> style_labels;

  std::int64_t size() const { return images.defined() ? images.size(0) : 0; }
};

StyleText toy_style_text(int style_class);

/// One latent [C, S, S] for (content_class, style_class).
torch::Tensor make_toy_latent(int content_class, int style_class, const ToyOptions& options, Rng& rng);

/// All four cells, cell-major (content, then style), `samples_per_cell` each.
TrainingData make_toy_dataset(const ToyOptions& options, std::uint64_t seed);

/// 4×4 average pools of every channel, flattened. Period-2 stripes cancel.
torch::Tensor toy_content_features(const torch::Tensor& latents);
/// Mean squared vertical and horizontal neighbour differences: [N, 2].
torch::Tensor toy_style_features(const torch::Tensor& latents);

class NearestCentroidClassifier {
 public:
  /// features [N, F] (float), labels in [0, classes).
  void fit(const torch::Tensor& features, const std::vector<int>& labels, int classes);
  std::vector<int> predict(const torch::Tensor& features) const;
  double accuracy(const torch::Tensor& features, int expected) const;
  const torch::Tensor& centroids() const { return centroids_; }

 private:
  torch::Tensor centroids_;  // [classes, F]
};

/// Writes the toy set as PNG files (first three channels rendered, or RGBA
/// for four) plus a metadata JSONL that `build-dataset` can ingest.
void write_toy_dataset(const TrainingData& data, const std::filesystem::path& dir);

}  // namespace csdiff
