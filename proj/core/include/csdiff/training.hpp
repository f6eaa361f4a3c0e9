#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "csdiff/common.hpp"
#include "csdiff/config.hpp"
#include "csdiff/dataset.hpp"
#include "csdiff/model.hpp"
#include "csdiff/toy_data.hpp"

namespace csdiff {

/// Optimization and sampling knobs for both stages. The contrastive
/// temperature lives in ModelConfig.
struct TrainConfig {
  double learning_rate = 5e-5;
  double weight_decay = 0.01;
  double grad_clip = 1.0;
  std::int64_t batch_size = 8;
  std::int64_t max_steps = 1000;
  double p_swap_style = 0.5;
  double p_swap_content = 0.5;
  double p_keyword_drop = 0.25;
  double p_cond_drop = 0.1;
  /// Per-sample probability of hiding the content prompt's text features so
  /// that image-only content conditioning is seen in training.
  double p_content_text_drop = 0.1;
  std::uint64_t seed = 0;
  /// Fixed batch scored before and after training (0 disables it).
  std::int64_t eval_batch_size = 32;
  /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
  std::int64_t checkpoint_every = 0;
  std::filesystem::path output_dir;

  void validate() const;
  nlohmann::json to_json() const;
  static std::map<std::string, std::string> defaults();
  /// Reads `train.*` keys.
  static TrainConfig from_config(const Config& config);
};

enum class Modality { image, text };
const char* to_string(Modality m);

struct ModalityChoice {
  Modality style_source = Modality::image;
  Modality content_source = Modality::image;
};

/// Style is text-sourced with probability p_swap_style, content
/// independently with p_swap_content.
ModalityChoice sample_condition_sources(Rng& rng, const TrainConfig& config);

/// Removes each keyword independently with probability `p`, keeping one
/// uniformly chosen keyword when every one would go. Order is preserved.
StyleText drop_style_keywords(const StyleText& style, Rng& rng, double p);

/// Raised when a step produces a non-finite loss. A JSON dump of the batch
/// is written next to the log when an output directory is configured.
class TrainingError : public Error {
 public:
  using Error::Error;
};

struct StepRecord {
  std::int64_t step = 0;
  nlohmann::json values;  // the logged line
};

struct TrainResult {
  std::vector<StepRecord> history;
  double initial_eval_loss = 0.0;  // on the fixed evaluation batch
  double final_eval_loss = 0.0;
  std::filesystem::path checkpoint;  // final checkpoint, when written
};

/// Called after every step with the logged line.
using StepObserver = std::function<void(const StepRecord&)>;

/// Stage 1: encoders, CSDN, ITM heads and ITG decoder on the disentangle loss.
TrainResult train_disentangle(Model& model, const TrainingData& data, const TrainConfig& config,
                              const StepObserver& observer = {});

/// Stage 2: MCL, projections, backbone and null embeddings on the
/// reconstruction loss, with encoders and CSDN frozen.
TrainResult train_generative(Model& model, const TrainingData& data, const TrainConfig& config,
                             const StepObserver& observer = {});

/// Stage-1 loss on a fixed batch with fixed ITM negatives.
double evaluate_disentangle(Model& model, const TrainingData& data, const std::vector<std::size_t>& indices,
                            std::uint64_t seed);
/// Stage-2 loss on a fixed batch with image-derived conditions, fixed t and ε.
double evaluate_reconstruction(Model& model, const TrainingData& data, const std::vector<std::size_t>& indices,
                               std::uint64_t seed);

/// Loads every manifest image into memory at the model's resolution.
TrainingData load_training_data(const Manifest& manifest, const ModelConfig& config);

/// `k` distinct indices drawn uniformly from [0, n).
std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k, Rng& rng);

/// Path named by `<dir>/latest`.
std::filesystem::path latest_checkpoint(const std::filesystem::path& dir);

}  // namespace csdiff
