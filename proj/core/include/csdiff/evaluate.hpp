#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "csdiff/dataset.hpp"
#include "csdiff/image_io.hpp"

namespace csdiff {

/// Maps images and texts into one embedding space. Implementations return
/// unit-norm vectors; the metrics renormalize anyway.
class EmbedderInterface {
 public:
  virtual ~EmbedderInterface() = default;
  virtual std::vector<double> embed_image(const Image& image) = 0;
  virtual std::vector<double> embed_text(const std::string& text) = 0;
};

class QualityPredictorInterface {
 public:
  virtual ~QualityPredictorInterface() = default;
  virtual double predict(const Image& image) = 0;
};

/// Deterministic placeholder embedder: texts hash byte trigrams into
/// buckets, images use a coarse grayscale thumbnail. Not a trained model.
class HashingEmbedder final : public EmbedderInterface {
 public:
  explicit HashingEmbedder(int dim = 64) : dim_(dim) {}
  std::vector<double> embed_image(const Image& image) override;
  std::vector<double> embed_text(const std::string& text) override;

 private:
  int dim_;
};

/// Placeholder quality score, NOT an aesthetic predictor: the mean absolute
/// difference between horizontally and vertically adjacent grayscale
/// pixels, with intensities in [0, 1]. Constant images score 0 and a
/// one-pixel black/white checkerboard scores the maximum, 1.
class ContrastQualityStub final : public QualityPredictorInterface {
 public:
  double predict(const Image& image) override;
};

/// Cosine similarity of two vectors after normalization.
double cosine(const std::vector<double>& a, const std::vector<double>& b);

/// "the painter is <artist>, the theme is <genre>". One missing value is
/// rendered as "unknown"; both missing is an error.
std::string render_style_prompt(const StyleText& style);

double style_similarity(const Image& image, const StyleText& style, EmbedderInterface& embedder);
double text_alignment(const Image& image, const std::string& content_prompt, EmbedderInterface& embedder);
double image_quality(const Image& image, QualityPredictorInterface& predictor);

/// One generated image's prompts, keyed by the image's filename stem.
struct PromptEntry {
  std::string stem;
  std::string content_prompt;
  StyleText style;
};

/// JSON Lines: {"stem": ..., "content_prompt": ..., "style": {"artist": ..., "genre": ..., ...}}.
std::vector<PromptEntry> read_prompt_manifest(const std::filesystem::path& path);

struct MetricRow {
  std::string stem;
  double ss = 0.0, ta = 0.0, iq = 0.0;
};

struct MetricSummary {
  double mean = 0.0;
  double stddev = 0.0;  // population
};

struct EvalReport {
  std::vector<MetricRow> rows;  // ordered by filename
  MetricSummary ss, ta, iq;
  /// Images without prompts and prompts without images.
  std::vector<std::string> unmatched;
  std::string checkpoint_id;
  std::string prompt_set_id;

  nlohmann::json to_json() const;
  std::string to_csv() const;
  /// Writes eval_report.json (and eval_report.csv when requested) into `dir`.
  void write(const std::filesystem::path& dir, bool csv) const;
};

MetricSummary summarize(const std::vector<double>& values);

/// Scores every PNG in `images_dir` against its prompt entry. Unmatched
/// files or prompts are listed and excluded from the aggregates.
EvalReport evaluate_run(const std::filesystem::path& images_dir, const std::vector<PromptEntry>& prompts,
                        EmbedderInterface& embedder, QualityPredictorInterface& predictor,
                        const std::string& checkpoint_id = "", const std::string& prompt_set_id = "");

}  // namespace csdiff
