#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>

namespace csdiff {

/// Flat key/value configuration.
///
/// File format: one `key = value` pair per line; `#` starts a comment; blank
/// lines are ignored; keys are lowercase snake_case and may be dotted
/// (`captioner.url`). Values are kept as strings and converted on access.
///
/// Layering: defaults < config file < environment < explicit overrides (CLI).
/// The environment variable for `captioner.url` is `CSDIFF_CAPTIONER_URL`.
class Config {
 public:
  Config() = default;
  explicit Config(std::map<std::string, std::string> defaults);

  /// Merges a config file. Unknown keys are rejected when `strict` is set.
  void merge_file(const std::filesystem::path& path, bool strict = true);
  /// Overrides every known key that has a matching environment variable.
  void merge_env(std::string_view prefix = "CSDIFF_");
  void set(const std::string& key, std::string value);

  bool contains(const std::string& key) const { return values_.contains(key); }
  std::optional<std::string> get(const std::string& key) const;
  std::string get_string(const std::string& key) const;
  double get_double(const std::string& key) const;
  long long get_int(const std::string& key) const;
  bool get_bool(const std::string& key) const;

  const std::map<std::string, std::string>& values() const { return values_; }

  static std::string env_name(std::string_view prefix, std::string_view key);

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace csdiff
