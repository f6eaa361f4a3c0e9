#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <torch/types.h>

#include "csdiff/captioner.hpp"

namespace csdiff {

/// One artwork's metadata as ingested from the JSON Lines source file.
struct ArtworkRecord {
  std::string image_path;
  std::string artist;
  std::string movement;
  std::string genre;
  std::string medium;
  std::map<std::string, std::string> extra;

  bool operator==(const ArtworkRecord&) const = default;
};

/// Style attribute names, in the order they always appear in a StyleText.
inline constexpr const char* kStyleAttributes[] = {"artist", "artistic style", "genre", "medium"};

struct StyleText {
  std::vector<std::pair<std::string, std::string>> keywords;
  std::string rendered;

  /// Looks up a keyword value by attribute name; empty when absent.
  std::string value_of(std::string_view attribute) const;
  bool operator==(const StyleText&) const = default;
};

/// Joins keyword values with ", " in keyword order.
std::string render_style(const std::vector<std::pair<std::string, std::string>>& keywords);
StyleText make_style_text(std::vector<std::pair<std::string, std::string>> keywords);

enum class ContentSource { captioner, manual };

struct ContentText {
  std::string text;
  ContentSource source = ContentSource::captioner;

  bool operator==(const ContentText&) const = default;
};

struct Triplet {
  ArtworkRecord record;
  ContentText content;
  StyleText style;

  bool operator==(const Triplet&) const = default;
};

struct ManifestStats {
  std::int64_t total = 0;
  std::int64_t kept = 0;
  std::int64_t excluded = 0;
  std::int64_t skipped = 0;
  std::map<std::string, std::int64_t> excluded_by_reason;

  bool operator==(const ManifestStats&) const = default;
};

struct Manifest {
  int version = 1;
  std::vector<Triplet> entries;
  ManifestStats stats;
  /// Directory that relative image paths resolve against.
  std::filesystem::path image_root;

  bool operator==(const Manifest&) const = default;
};

struct SkippedRecord {
  std::size_t index = 0;  // position in the kept list
  std::string image_path;
  std::string reason;
};

struct FilterRules {
  std::vector<std::string> excluded_genres{"photography", "architecture", "design drawings", "advertisements"};
  std::vector<std::string> excluded_movements{"abstract", "minimalism"};

  static std::map<std::string, std::string> defaults();
  /// Reads comma-separated `filter.excluded_genres` / `filter.excluded_movements`.
  static FilterRules from_config(const Config& config);
};

struct FilterResult {
  std::vector<ArtworkRecord> kept;
  std::vector<std::pair<ArtworkRecord, std::string>> excluded;
};

/// Drops records whose normalized genre or movement matches an exclusion rule
/// exactly. Reasons read "genre:<rule>" or "movement:<rule>".
FilterResult filter_records(const std::vector<ArtworkRecord>& records, const FilterRules& rules);

/// Present style attributes, always ordered artist, artistic style, genre, medium.
/// Throws InvalidArgument when all four are empty.
StyleText select_style_attributes(const ArtworkRecord& record);

/// Asks the captioner to describe the image, retrying transport errors up to
/// `retries` extra times. `record_id` is quoted in every error.
ContentText generate_content_description(const std::filesystem::path& image_path, CaptionerClient& captioner,
                                         int retries, const std::string& record_id);

struct BuildOptions {
  FilterRules rules;
  int retries = 3;
  int workers = 1;
  /// When set, manifest.jsonl, manifest.stats.json and skipped.jsonl are written here.
  std::filesystem::path output_dir;
};

struct BuildResult {
  Manifest manifest;
  std::vector<SkippedRecord> skipped;
};

/// filter → style attributes → captions, then writes the manifest files.
/// Per-record failures are reported in `skipped`; the build fails only when
/// more than half of the kept records fail.
BuildResult build_manifest(const std::filesystem::path& metadata_file, const std::filesystem::path& image_root,
                           CaptionerClient& captioner, const BuildOptions& options);

std::vector<ArtworkRecord> read_metadata(const std::filesystem::path& metadata_file);

std::string triplet_to_json_line(const Triplet& triplet);
Triplet triplet_from_json_line(const std::string& line);

/// Writes `manifest.jsonl` + `manifest.stats.json` into `dir`.
void write_manifest(const Manifest& manifest, const std::filesystem::path& dir);
void write_skipped(const std::vector<SkippedRecord>& skipped, const std::filesystem::path& dir);
/// Reads a manifest from a directory or from a path to its `manifest.jsonl`.
Manifest read_manifest(const std::filesystem::path& path);

struct TripletBatch {
  torch::Tensor images;  // [N, C, S, S] in [-1, 1]
  std::vector<std::string> content_texts;
  std::vector<StyleText> styles;

  std::int64_t size() const { return images.defined() ? images.size(0) : 0; }
};

/// Decodes, resizes to image_size×image_size and scales the selected entries to [-1, 1].
TripletBatch load_triplet_batch(const Manifest& manifest, const std::vector<std::size_t>& indices, int image_size,
                                int channels = 3);

}  // namespace csdiff
