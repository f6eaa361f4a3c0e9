#include "csdiff/config.hpp"

#include <cctype>
#include <charconv>
#include <cstdlib>
#include <fstream>

#include "csdiff/common.hpp"

namespace csdiff {

Config::Config(std::map<std::string, std::string> defaults) : values_(std::move(defaults)) {}

void Config::merge_file(const std::filesystem::path& path, bool strict) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path.string());
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::string stripped = trim(line);
    if (stripped.empty()) continue;
    auto eq = stripped.find('=');
    if (eq == std::string::npos) {
      throw InvalidArgument(path.string() + ":" + std::to_string(line_no) + ": expected key = value");
    }
    std::string key = trim(stripped.substr(0, eq));
    std::string value = trim(stripped.substr(eq + 1));
    if (key.empty()) {
      throw InvalidArgument(path.string() + ":" + std::to_string(line_no) + ": empty key");
    }
    if (strict && !values_.empty() && !values_.contains(key)) {
      throw InvalidArgument(path.string() + ":" + std::to_string(line_no) + ": unknown key '" + key + "'");
    }
    values_[key] = value;
  }
}

std::string Config::env_name(std::string_view prefix, std::string_view key) {
  std::string name(prefix);
  for (char c : key) {
    name.push_back(c == '.' || c == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
  }
  return name;
}

void Config::merge_env(std::string_view prefix) {
  for (auto& [key, value] : values_) {
    if (const char* env = std::getenv(env_name(prefix, key).c_str())) value = env;
  }
}

void Config::set(const std::string& key, std::string value) { values_[key] = std::move(value); }

std::optional<std::string> Config::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) return std::nullopt;
  return it->second;
}

std::string Config::get_string(const std::string& key) const {
  auto value = get(key);
  if (!value) throw InvalidArgument("missing config key '" + key + "'");
  return *value;
}

double Config::get_double(const std::string& key) const {
  const std::string text = get_string(key);
  try {
    std::size_t used = 0;
    double value = std::stod(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return value;
  } catch (const std::exception&) {
    throw InvalidArgument("config key '" + key + "' is not a number: '" + text + "'");
  }
}

long long Config::get_int(const std::string& key) const {
  const std::string text = get_string(key);
  long long value = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw InvalidArgument("config key '" + key + "' is not an integer: '" + text + "'");
  }
  return value;
}

bool Config::get_bool(const std::string& key) const {
  const std::string text = to_lower(get_string(key));
  if (text == "1" || text == "true" || text == "yes" || text == "on") return true;
  if (text == "0" || text == "false" || text == "no" || text == "off") return false;
  throw InvalidArgument("config key '" + key + "' is not a boolean: '" + text + "'");
}

}  // namespace csdiff
