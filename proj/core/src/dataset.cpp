#include "csdiff/dataset.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <optional>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "csdiff/image_io.hpp"

namespace csdiff {
namespace {

using nlohmann::json;

std::string normalize(std::string_view value) { return to_lower(trim(value)); }

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream stream(text);
  std::string item;
  while (std::getline(stream, item, ',')) {
    if (auto value = normalize(item); !value.empty()) out.push_back(std::move(value));
  }
  return out;
}

std::string join_list(const std::vector<std::string>& items) {
  std::string out;
  for (const auto& item : items) {
    if (!out.empty()) out += ", ";
    out += item;
  }
  return out;
}

std::string json_scalar_to_string(const json& value) {
  if (value.is_string()) return value.get<std::string>();
  if (value.is_null()) return "";
  return value.dump();
}

json record_to_json(const ArtworkRecord& record) {
  return json{{"image_path", record.image_path}, {"artist", record.artist}, {"movement", record.movement},
              {"genre", record.genre},           {"medium", record.medium}, {"extra", record.extra}};
}

ArtworkRecord record_from_json(const json& object) {
  if (!object.is_object()) throw InvalidArgument("metadata line is not a JSON object");
  ArtworkRecord record;
  for (const auto& [key, value] : object.items()) {
    if (key == "image_path") {
      record.image_path = json_scalar_to_string(value);
    } else if (key == "artist") {
      record.artist = json_scalar_to_string(value);
    } else if (key == "movement" || key == "style") {
      record.movement = json_scalar_to_string(value);
    } else if (key == "genre") {
      record.genre = json_scalar_to_string(value);
    } else if (key == "medium") {
      record.medium = json_scalar_to_string(value);
    } else if (key == "extra" && value.is_object()) {
      for (const auto& [k, v] : value.items()) record.extra[k] = json_scalar_to_string(v);
    } else {
      record.extra[key] = json_scalar_to_string(value);
    }
  }
  if (trim(record.image_path).empty()) throw InvalidArgument("metadata record has no image_path");
  return record;
}

std::filesystem::path resolve(const std::filesystem::path& root, const std::string& image_path) {
  std::filesystem::path path(image_path);
  return path.is_absolute() || root.empty() ? path : root / path;
}

}  // namespace

std::string StyleText::value_of(std::string_view attribute) const {
  for (const auto& [name, value] : keywords) {
    if (name == attribute) return value;
  }
  return {};
}

std::string render_style(const std::vector<std::pair<std::string, std::string>>& keywords) {
  std::string out;
  for (const auto& [name, value] : keywords) {
    if (!out.empty()) out += ", ";
    out += value;
  }
  return out;
}

StyleText make_style_text(std::vector<std::pair<std::string, std::string>> keywords) {
  StyleText style;
  style.rendered = render_style(keywords);
  style.keywords = std::move(keywords);
  return style;
}

std::map<std::string, std::string> FilterRules::defaults() {
  FilterRules rules;
  return {{"filter.excluded_genres", join_list(rules.excluded_genres)},
          {"filter.excluded_movements", join_list(rules.excluded_movements)}};
}

FilterRules FilterRules::from_config(const Config& config) {
  FilterRules rules;
  if (auto genres = config.get("filter.excluded_genres")) rules.excluded_genres = split_list(*genres);
  if (auto movements = config.get("filter.excluded_movements")) rules.excluded_movements = split_list(*movements);
  return rules;
}

FilterResult filter_records(const std::vector<ArtworkRecord>& records, const FilterRules& rules) {
  std::vector<std::string> genres, movements;
  std::ranges::transform(rules.excluded_genres, std::back_inserter(genres), normalize);
  std::ranges::transform(rules.excluded_movements, std::back_inserter(movements), normalize);

  FilterResult result;
  for (const auto& record : records) {
    const std::string genre = normalize(record.genre);
    const std::string movement = normalize(record.movement);
    if (std::ranges::find(genres, genre) != genres.end()) {
      result.excluded.emplace_back(record, "genre:" + genre);
    } else if (std::ranges::find(movements, movement) != movements.end()) {
      result.excluded.emplace_back(record, "movement:" + movement);
    } else {
      result.kept.push_back(record);
    }
  }
  return result;
}

StyleText select_style_attributes(const ArtworkRecord& record) {
  const std::string values[] = {trim(record.artist), trim(record.movement), trim(record.genre), trim(record.medium)};
  std::vector<std::pair<std::string, std::string>> keywords;
  for (std::size_t i = 0; i < std::size(values); ++i) {
    if (!values[i].empty()) keywords.emplace_back(kStyleAttributes[i], values[i]);
  }
  if (keywords.empty()) {
    throw InvalidArgument("record " + record.image_path + " has no style attributes");
  }
  return make_style_text(std::move(keywords));
}

ContentText generate_content_description(const std::filesystem::path& image_path, CaptionerClient& captioner,
                                         int retries, const std::string& record_id) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = read_file_bytes(image_path);
  } catch (const IoError& e) {
    throw IoError("record " + record_id + ": " + e.what());
  }
  std::string last_error;
  for (int attempt = 0; attempt <= retries; ++attempt) {
    std::string reply;
    try {
      reply = captioner.caption(bytes, kCaptionPrompt);
    } catch (const CaptionerTransportError& e) {
      last_error = e.what();
      continue;
    }
    std::string text = trim(reply);
    if (text.empty()) throw Error("record " + record_id + ": captioner returned an empty description");
    return ContentText{std::move(text), ContentSource::captioner};
  }
  throw Error("record " + record_id + ": captioner failed after " + std::to_string(retries + 1) +
              " attempts: " + last_error);
}

std::vector<ArtworkRecord> read_metadata(const std::filesystem::path& metadata_file) {
  std::ifstream in(metadata_file);
  if (!in) throw IoError("cannot open metadata file " + metadata_file.string());
  std::vector<ArtworkRecord> records;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      records.push_back(record_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw InvalidArgument(metadata_file.string() + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const InvalidArgument& e) {
      throw InvalidArgument(metadata_file.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return records;
}

BuildResult build_manifest(const std::filesystem::path& metadata_file, const std::filesystem::path& image_root,
                           CaptionerClient& captioner, const BuildOptions& options) {
  const auto records = read_metadata(metadata_file);
  if (records.empty()) throw InvalidArgument("metadata file " + metadata_file.string() + " has no records");

  auto filtered = filter_records(records, options.rules);
  const std::size_t n = filtered.kept.size();

  // Captions may complete out of order; results land in their input slot.
  std::vector<std::optional<Triplet>> slots(n);
  std::vector<std::string> errors(n);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      const auto& record = filtered.kept[i];
      try {
        StyleText style = select_style_attributes(record);
        ContentText content = generate_content_description(resolve(image_root, record.image_path), captioner,
                                                           options.retries, record.image_path);
        slots[i] = Triplet{record, std::move(content), std::move(style)};
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  const int workers = std::clamp<int>(options.workers, 1, static_cast<int>(std::max<std::size_t>(n, 1)));
  {
    std::vector<std::jthread> pool;
    for (int w = 1; w < workers; ++w) pool.emplace_back(work);
    work();
  }

  BuildResult result;
  Manifest& manifest = result.manifest;
  manifest.image_root = image_root;
  for (std::size_t i = 0; i < n; ++i) {
    if (slots[i]) {
      manifest.entries.push_back(std::move(*slots[i]));
    } else {
      result.skipped.push_back({i, filtered.kept[i].image_path, errors[i]});
    }
  }
  manifest.stats.total = static_cast<std::int64_t>(records.size());
  manifest.stats.kept = static_cast<std::int64_t>(n);
  manifest.stats.excluded = static_cast<std::int64_t>(filtered.excluded.size());
  manifest.stats.skipped = static_cast<std::int64_t>(result.skipped.size());
  for (const auto& [record, reason] : filtered.excluded) ++manifest.stats.excluded_by_reason[reason];

  if (n == 0) throw Error("every record was excluded by the filter rules");
  if (2 * result.skipped.size() > n) {
    throw Error("manifest build aborted: " + std::to_string(result.skipped.size()) + " of " + std::to_string(n) +
                " records failed; first error: " + result.skipped.front().reason);
  }

  if (!options.output_dir.empty()) {
    write_manifest(manifest, options.output_dir);
    write_skipped(result.skipped, options.output_dir);
  }
  return result;
}

std::string triplet_to_json_line(const Triplet& triplet) {
  json keywords = json::array();
  for (const auto& [name, value] : triplet.style.keywords) keywords.push_back(json::array({name, value}));
  json line = record_to_json(triplet.record);
  line["content"] = {{"text", triplet.content.text},
                     {"source", triplet.content.source == ContentSource::captioner ? "captioner" : "manual"}};
  line["style"] = {{"keywords", keywords}, {"rendered", triplet.style.rendered}};
  return line.dump();
}

Triplet triplet_from_json_line(const std::string& line) {
  const json object = json::parse(line);
  Triplet triplet;
  json record = object;
  record.erase("content");
  record.erase("style");
  triplet.record = record_from_json(record);
  triplet.content.text = object.at("content").at("text").get<std::string>();
  triplet.content.source =
      object.at("content").value("source", "captioner") == "manual" ? ContentSource::manual : ContentSource::captioner;
  for (const auto& pair : object.at("style").at("keywords")) {
    triplet.style.keywords.emplace_back(pair.at(0).get<std::string>(), pair.at(1).get<std::string>());
  }
  triplet.style.rendered = object.at("style").at("rendered").get<std::string>();
  if (triplet.content.text.empty()) throw InvalidArgument("manifest entry has empty content text");
  return triplet;
}

void write_manifest(const Manifest& manifest, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "manifest.jsonl", std::ios::binary);
    if (!out) throw IoError("cannot write " + (dir / "manifest.jsonl").string());
    for (const auto& entry : manifest.entries) out << triplet_to_json_line(entry) << '\n';
  }
  const auto& s = manifest.stats;
  json stats = {{"version", manifest.version},
                {"image_root", manifest.image_root.generic_string()},
                {"entries", manifest.entries.size()},
                {"total", s.total},
                {"kept", s.kept},
                {"excluded", s.excluded},
                {"skipped", s.skipped},
                {"excluded_by_reason", s.excluded_by_reason}};
  std::ofstream out(dir / "manifest.stats.json", std::ios::binary);
  if (!out) throw IoError("cannot write " + (dir / "manifest.stats.json").string());
  out << stats.dump(2) << '\n';
}

void write_skipped(const std::vector<SkippedRecord>& skipped, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream out(dir / "skipped.jsonl", std::ios::binary);
  if (!out) throw IoError("cannot write " + (dir / "skipped.jsonl").string());
  for (const auto& s : skipped) {
    out << json{{"index", s.index}, {"image_path", s.image_path}, {"reason", s.reason}}.dump() << '\n';
  }
}

Manifest read_manifest(const std::filesystem::path& path) {
  const auto dir = std::filesystem::is_directory(path) ? path : path.parent_path();
  const auto jsonl = std::filesystem::is_directory(path) ? path / "manifest.jsonl" : path;
  std::ifstream in(jsonl);
  if (!in) throw IoError("cannot open manifest " + jsonl.string());
  Manifest manifest;
  std::string line;
  while (std::getline(in, line)) {
    if (!trim(line).empty()) manifest.entries.push_back(triplet_from_json_line(line));
  }
  const auto stats_path = dir / "manifest.stats.json";
  if (std::ifstream stats_in(stats_path); stats_in) {
    const json stats = json::parse(stats_in);
    manifest.version = stats.value("version", 1);
    manifest.image_root = stats.value("image_root", std::string());
    manifest.stats.total = stats.value("total", 0);
    manifest.stats.kept = stats.value("kept", 0);
    manifest.stats.excluded = stats.value("excluded", 0);
    manifest.stats.skipped = stats.value("skipped", 0);
    if (stats.contains("excluded_by_reason")) {
      manifest.stats.excluded_by_reason = stats.at("excluded_by_reason").get<std::map<std::string, std::int64_t>>();
    }
  } else {
    manifest.image_root = dir;
    manifest.stats.total = manifest.stats.kept = static_cast<std::int64_t>(manifest.entries.size());
  }
  return manifest;
}

TripletBatch load_triplet_batch(const Manifest& manifest, const std::vector<std::size_t>& indices, int image_size,
                                int channels) {
  if (indices.empty()) throw InvalidArgument("load_triplet_batch: no indices");
  TripletBatch batch;
  std::vector<torch::Tensor> images;
  for (std::size_t index : indices) {
    if (index >= manifest.entries.size()) {
      throw InvalidArgument("index " + std::to_string(index) + " out of range for manifest of " +
                            std::to_string(manifest.entries.size()) + " entries");
    }
    const auto& entry = manifest.entries[index];
    const auto path = resolve(manifest.image_root, entry.record.image_path);
    if (!std::filesystem::exists(path)) {
      throw IoError("entry " + std::to_string(index) + " (" + entry.record.image_path + "): missing image " +
                    path.string());
    }
    images.push_back(resize_square(image_to_tensor(read_png(path, channels)), image_size));
    batch.content_texts.push_back(entry.content.text);
    batch.styles.push_back(entry.style);
  }
  batch.images = torch::stack(images);
  return batch;
}

}  // namespace csdiff
