#include "csdiff/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace csdiff {
namespace {

std::vector<double> normalized(std::vector<double> v) {
  double sq = 0.0;
  for (double x : v) sq += x * x;
  const double norm = std::sqrt(sq);
  if (!(norm > 1e-12)) throw InvalidArgument("cannot normalize a zero embedding");
  for (double& x : v) x /= norm;
  return v;
}

// Rec. 601 luma of one pixel in [0, 1].
double gray_at(const Image& image, int x, int y) {
  const auto* p = &image.pixels[(static_cast<std::size_t>(y) * image.width + x) * image.channels];
  if (image.channels < 3) return p[0] / 255.0;
  return (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]) / 255.0;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

}  // namespace

std::vector<double> HashingEmbedder::embed_image(const Image& image) {
  if (image.width < 1 || image.height < 1) throw InvalidArgument("empty image");
  std::vector<double> out(static_cast<std::size_t>(dim_), 0.0);
  constexpr int grid = 4;
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      const int cell = (y * grid / image.height) * grid + x * grid / image.width;
      out[static_cast<std::size_t>(cell % dim_)] += gray_at(image, x, y) - 0.5;
    }
  }
  out[static_cast<std::size_t>(dim_ - 1)] += 1.0;
  return normalized(std::move(out));
}

std::vector<double> HashingEmbedder::embed_text(const std::string& text) {
  std::vector<double> out(static_cast<std::size_t>(dim_), 0.0);
  const auto padded = "  " + to_lower(text) + " ";
  for (std::size_t i = 0; i + 3 <= padded.size(); ++i) {
    std::uint64_t h = 1469598103934665603ull;
    for (std::size_t j = i; j < i + 3; ++j) h = (h ^ static_cast<unsigned char>(padded[j])) * 1099511628211ull;
    out[h % static_cast<std::uint64_t>(dim_)] += 1.0;
  }
  return normalized(std::move(out));
}

double ContrastQualityStub::predict(const Image& image) {
  if (image.width < 1 || image.height < 1) throw InvalidArgument("empty image");
  double total = 0.0;
  std::size_t pairs = 0;
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      const double g = gray_at(image, x, y);
      if (x + 1 < image.width) total += std::abs(g - gray_at(image, x + 1, y)), ++pairs;
      if (y + 1 < image.height) total += std::abs(g - gray_at(image, x, y + 1)), ++pairs;
    }
  }
  return pairs == 0 ? 0.0 : total / static_cast<double>(pairs);
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.empty()) throw InvalidArgument("cosine: vectors must be non-empty and equally long");
  const auto ua = normalized(a), ub = normalized(b);
  double dot = 0.0;
  for (std::size_t i = 0; i < ua.size(); ++i) dot += ua[i] * ub[i];
  return std::clamp(dot, -1.0, 1.0);
}

std::string render_style_prompt(const StyleText& style) {
  auto artist = style.value_of("artist");
  auto genre = style.value_of("genre");
  if (artist.empty() && genre.empty()) throw InvalidArgument("style prompt needs an artist or a genre");
  if (artist.empty()) artist = "unknown";
  if (genre.empty()) genre = "unknown";
  return "the painter is " + artist + ", the theme is " + genre;
}

double style_similarity(const Image& image, const StyleText& style, EmbedderInterface& embedder) {
  const auto prompt = render_style_prompt(style);
  return cosine(embedder.embed_image(image), embedder.embed_text(prompt));
}

double text_alignment(const Image& image, const std::string& content_prompt, EmbedderInterface& embedder) {
  return cosine(embedder.embed_image(image), embedder.embed_text(content_prompt));
}

double image_quality(const Image& image, QualityPredictorInterface& predictor) { return predictor.predict(image); }

std::vector<PromptEntry> read_prompt_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open prompt manifest " + path.string());
  std::vector<PromptEntry> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      PromptEntry entry;
      entry.stem = j.at("stem").get<std::string>();
      entry.content_prompt = j.value("content_prompt", std::string());
      std::vector<std::pair<std::string, std::string>> keywords;
      if (j.contains("style")) {
        for (const char* attribute : kStyleAttributes) {
          if (j["style"].contains(attribute)) keywords.emplace_back(attribute, j["style"][attribute].get<std::string>());
        }
      }
      entry.style = make_style_text(std::move(keywords));
      out.push_back(std::move(entry));
    } catch (const nlohmann::json::exception& e) {
      throw InvalidArgument(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

MetricSummary summarize(const std::vector<double>& values) {
  if (values.empty()) throw InvalidArgument("cannot summarize an empty metric column");
  double sum = 0.0;
  for (double v : values) sum += v;
  const double mean = sum / static_cast<double>(values.size());
  double sq = 0.0;
  for (double v : values) sq += (v - mean) * (v - mean);
  return {mean, std::sqrt(sq / static_cast<double>(values.size()))};
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["metadata"] = {{"checkpoint_id", checkpoint_id}, {"prompt_set_id", prompt_set_id}, {"images", rows.size()}};
  for (const auto& r : rows) j["rows"].push_back({{"stem", r.stem}, {"ss", r.ss}, {"ta", r.ta}, {"iq", r.iq}});
  if (rows.empty()) j["rows"] = nlohmann::json::array();
  auto agg = [](const MetricSummary& m) { return nlohmann::json{{"mean", m.mean}, {"std", m.stddev}}; };
  j["aggregates"] = {{"ss", agg(ss)}, {"ta", agg(ta)}, {"iq", agg(iq)}};
  j["unmatched"] = unmatched;
  j["notes"] = "iq is the contrast placeholder unless an aesthetic predictor is plugged in";
  return j;
}

std::string EvalReport::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "stem,ss,ta,iq\n";
  for (const auto& r : rows) out << csv_field(r.stem) << ',' << r.ss << ',' << r.ta << ',' << r.iq << '\n';
  return out.str();
}

void EvalReport::write(const std::filesystem::path& dir, bool csv) const {
  std::filesystem::create_directories(dir);
  std::ofstream json_out(dir / "eval_report.json");
  json_out << to_json().dump(2) << '\n';
  if (!json_out) throw IoError("cannot write " + (dir / "eval_report.json").string());
  if (csv) {
    std::ofstream csv_out(dir / "eval_report.csv");
    csv_out << to_csv();
    if (!csv_out) throw IoError("cannot write " + (dir / "eval_report.csv").string());
  }
}

EvalReport evaluate_run(const std::filesystem::path& images_dir, const std::vector<PromptEntry>& prompts,
                        EmbedderInterface& embedder, QualityPredictorInterface& predictor,
                        const std::string& checkpoint_id, const std::string& prompt_set_id) {
  if (!std::filesystem::is_directory(images_dir)) throw IoError(images_dir.string() + " is not a directory");
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(images_dir)) {
    if (entry.is_regular_file() && to_lower(entry.path().extension().string()) == ".png") files.push_back(entry.path());
  }
  if (files.empty()) throw InvalidArgument("no PNG images in " + images_dir.string());
  std::sort(files.begin(), files.end());

  std::map<std::string, const PromptEntry*> by_stem;
  for (const auto& p : prompts) by_stem[p.stem] = &p;

  EvalReport report;
  report.checkpoint_id = checkpoint_id;
  report.prompt_set_id = prompt_set_id;
  std::set<std::string> matched;
  std::vector<double> ss, ta, iq;
  for (const auto& file : files) {
    const auto stem = file.stem().string();
    auto it = by_stem.find(stem);
    if (it == by_stem.end()) {
      report.unmatched.push_back(file.filename().string());
      continue;
    }
    matched.insert(stem);
    const auto image = read_png(file, 3);
    MetricRow row{stem, style_similarity(image, it->second->style, embedder),
                  text_alignment(image, it->second->content_prompt, embedder), image_quality(image, predictor)};
    ss.push_back(row.ss);
    ta.push_back(row.ta);
    iq.push_back(row.iq);
    report.rows.push_back(row);
  }
  for (const auto& p : prompts) {
    if (!matched.contains(p.stem)) report.unmatched.push_back("prompt:" + p.stem);
  }
  if (report.rows.empty()) throw InvalidArgument("no image in " + images_dir.string() + " matches a prompt");
  report.ss = summarize(ss);
  report.ta = summarize(ta);
  report.iq = summarize(iq);
  return report;
}

}  // namespace csdiff
