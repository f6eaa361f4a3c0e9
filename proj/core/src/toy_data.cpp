#include "csdiff/toy_data.hpp"

#include <torch/nn/functional/pooling.h>

#include "csdiff/image_io.hpp"

namespace csdiff {

StyleText toy_style_text(int style_class) {
  if (style_class < 0 || style_class > 1) throw InvalidArgument("toy style class must be 0 or 1");
  return make_style_text({{"artistic style", kToyStyleTexts[static_cast<std::size_t>(style_class)]}});
}

torch::Tensor make_toy_latent(int content_class, int style_class, const ToyOptions& options, Rng& rng) {
  if (content_class < 0 || content_class > 1) throw InvalidArgument("toy content class must be 0 or 1");
  if (style_class < 0 || style_class > 1) throw InvalidArgument("toy style class must be 0 or 1");
  if (options.size < 4 || options.size % 4 != 0) throw InvalidArgument("toy size must be a positive multiple of 4");
  const auto s = options.size;
  auto coords = torch::arange(s, torch::kFloat32);
  auto ys = coords.view({s, 1}).expand({s, s});
  auto xs = coords.view({1, s}).expand({s, s});

  // content: +a on the bright half, -a on the other
  auto bright = content_class == 0 ? (xs < s / 2) : (ys < s / 2);
  auto content = bright.to(torch::kFloat32) * 2.0 - 1.0;

  // fixed phase: each style class is one definite texture
  auto along = style_class == 0 ? ys : xs;
  auto stripes = 1.0 - 2.0 * torch::remainder(along, 2.0);

  auto gen = rng.torch_generator();
  auto out = torch::empty({options.channels, s, s});
  for (std::int64_t c = 0; c < options.channels; ++c) {
    const double gain = 0.8 + 0.4 * rng.uniform();
    out[c] = gain * (options.content_amplitude * content + options.stripe_amplitude * stripes);
  }
  out += options.noise * torch::randn({options.channels, s, s}, gen);
  return out.clamp(-1.0, 1.0);
}

TrainingData make_toy_dataset(const ToyOptions& options, std::uint64_t seed) {
  if (options.samples_per_cell < 1) throw InvalidArgument("toy dataset needs at least one sample per cell");
  Rng root(seed);
  TrainingData data;
  std::vector<torch::Tensor> latents;
  for (int content = 0; content < 2; ++content) {
    for (int style = 0; style < 2; ++style) {
      Rng cell = root.split("toy.cell." + std::to_string(content) + "." + std::to_string(style));
      for (std::int64_t i = 0; i < options.samples_per_cell; ++i) {
        latents.push_back(make_toy_latent(content, style, options, cell));
        data.content_texts.push_back(kToyContentTexts[static_cast<std::size_t>(content)]);
        data.styles.push_back(toy_style_text(style));
        data.content_labels.push_back(content);
        data.style_labels.push_back(style);
      }
    }
  }
  data.images = torch::stack(latents);
  return data;
}

torch::Tensor toy_content_features(const torch::Tensor& latents) {
  if (latents.dim() != 4) throw InvalidArgument("toy features expect [N, C, H, W]");
  namespace F = torch::nn::functional;
  return F::avg_pool2d(latents.to(torch::kFloat32), F::AvgPool2dFuncOptions(4)).flatten(1);
}

torch::Tensor toy_style_features(const torch::Tensor& latents) {
  if (latents.dim() != 4) throw InvalidArgument("toy features expect [N, C, H, W]");
  auto x = latents.to(torch::kFloat32);
  auto dy = (x.slice(2, 1) - x.slice(2, 0, -1)).pow(2).mean({1, 2, 3});
  auto dx = (x.slice(3, 1) - x.slice(3, 0, -1)).pow(2).mean({1, 2, 3});
  return torch::stack({dy, dx}, 1);
}

void NearestCentroidClassifier::fit(const torch::Tensor& features, const std::vector<int>& labels, int classes) {
  if (features.dim() != 2 || features.size(0) != static_cast<std::int64_t>(labels.size())) {
    throw InvalidArgument("classifier features must be [N, F] with one label per row");
  }
  centroids_ = torch::zeros({classes, features.size(1)});
  std::vector<std::int64_t> counts(static_cast<std::size_t>(classes), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int label = labels[i];
    if (label < 0 || label >= classes) throw InvalidArgument("classifier label out of range");
    centroids_[label] += features[static_cast<std::int64_t>(i)].to(torch::kFloat32);
    ++counts[static_cast<std::size_t>(label)];
  }
  for (int c = 0; c < classes; ++c) {
    if (counts[static_cast<std::size_t>(c)] == 0) throw InvalidArgument("class " + std::to_string(c) + " has no samples");
    centroids_[c] /= static_cast<double>(counts[static_cast<std::size_t>(c)]);
  }
}

std::vector<int> NearestCentroidClassifier::predict(const torch::Tensor& features) const {
  if (!centroids_.defined()) throw InvalidArgument("classifier is not fitted");
  auto distances = torch::cdist(features.to(torch::kFloat32), centroids_);
  auto best = distances.argmin(1);
  std::vector<int> out(static_cast<std::size_t>(best.size(0)));
  for (std::int64_t i = 0; i < best.size(0); ++i) out[static_cast<std::size_t>(i)] = static_cast<int>(best[i].item<std::int64_t>());
  return out;
}

double NearestCentroidClassifier::accuracy(const torch::Tensor& features, int expected) const {
  const auto predicted = predict(features);
  if (predicted.empty()) throw InvalidArgument("accuracy of an empty set");
  std::size_t hits = 0;
  for (int p : predicted) hits += p == expected ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

void write_toy_dataset(const TrainingData& data, const std::filesystem::path& dir) {
  if (data.size() == 0) throw InvalidArgument("nothing to write");
  const auto channels = data.images.size(1);
  if (channels != 3 && channels != 4) throw InvalidArgument("toy PNGs need 3 or 4 channels");
  std::filesystem::create_directories(dir / "images");
  Manifest manifest;
  manifest.image_root = dir;
  for (std::int64_t i = 0; i < data.size(); ++i) {
    char name[48];
    std::snprintf(name, sizeof(name), "images/toy_%04lld.png", static_cast<long long>(i));
    write_png(dir / name, tensor_to_image(data.images[i]));
    Triplet t;
    t.record.image_path = name;
    t.record.movement = data.styles[static_cast<std::size_t>(i)].value_of("artistic style");
    t.content = {data.content_texts[static_cast<std::size_t>(i)], ContentSource::manual};
    t.style = data.styles[static_cast<std::size_t>(i)];
    manifest.entries.push_back(std::move(t));
  }
  manifest.stats.total = manifest.stats.kept = data.size();
  write_manifest(manifest, dir);
}

}  // namespace csdiff
