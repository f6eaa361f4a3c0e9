#include "csdiff/captioner.hpp"

#include <httplib.h>
#include <json.hpp>

namespace csdiff {

std::string EchoCaptioner::caption(std::span<const std::uint8_t> image_bytes, std::string_view /*prompt*/) {
  if (!fixed_reply_.empty()) return fixed_reply_;
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : image_bytes) {
    hash ^= b;
    hash *= 0x100000001b3ULL;
  }
  static constexpr const char* kSubjects[] = {"a portrait of a person", "a still life with fruit",
                                              "a natural landscape", "a city street",
                                              "a vase of flowers on a table", "a seascape with boats"};
  return std::string(kSubjects[hash % std::size(kSubjects)]) + ".";
}

std::map<std::string, std::string> CaptionerSettings::defaults() {
  CaptionerSettings d;
  return {{"captioner.url", d.url},
          {"captioner.timeout_ms", std::to_string(d.timeout.count())},
          {"captioner.retries", std::to_string(d.retries)}};
}

CaptionerSettings CaptionerSettings::from_config(const Config& config) {
  CaptionerSettings settings;
  if (config.contains("captioner.url")) settings.url = config.get_string("captioner.url");
  if (config.contains("captioner.timeout_ms")) {
    settings.timeout = std::chrono::milliseconds(config.get_int("captioner.timeout_ms"));
  }
  if (config.contains("captioner.retries")) settings.retries = static_cast<int>(config.get_int("captioner.retries"));
  if (settings.retries < 0) throw InvalidArgument("captioner.retries must be non-negative");
  return settings;
}

HttpCaptioner::HttpCaptioner(CaptionerSettings settings) : settings_(std::move(settings)) {
  const std::string& url = settings_.url;
  auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw InvalidArgument("captioner url needs a scheme: " + url);
  auto path_begin = url.find('/', scheme_end + 3);
  scheme_host_port_ = url.substr(0, path_begin);
  path_ = path_begin == std::string::npos ? "/" : url.substr(path_begin);
}

std::string HttpCaptioner::caption(std::span<const std::uint8_t> image_bytes, std::string_view prompt) {
  httplib::Client client(scheme_host_port_);
  const auto seconds = std::chrono::duration_cast<std::chrono::seconds>(settings_.timeout);
  const auto micros = std::chrono::duration_cast<std::chrono::microseconds>(settings_.timeout - seconds);
  client.set_connection_timeout(seconds.count(), micros.count());
  client.set_read_timeout(seconds.count(), micros.count());

  nlohmann::json body = {{"prompt", std::string(prompt)}, {"image_base64", base64_encode(image_bytes)}};
  auto result = client.Post(path_, body.dump(), "application/json");
  if (!result) {
    throw CaptionerTransportError("captioner request failed: " + httplib::to_string(result.error()));
  }
  if (result->status >= 500 || result->status == 429) {
    throw CaptionerTransportError("captioner returned HTTP " + std::to_string(result->status));
  }
  if (result->status != 200) {
    throw Error("captioner rejected request with HTTP " + std::to_string(result->status));
  }
  auto parsed = nlohmann::json::parse(result->body, nullptr, /*allow_exceptions=*/false);
  if (parsed.is_object()) {
    for (const char* key : {"text", "response"}) {
      if (parsed.contains(key) && parsed[key].is_string()) return parsed[key].get<std::string>();
    }
    throw Error("captioner JSON response has no 'text' field");
  }
  if (parsed.is_string()) return parsed.get<std::string>();
  return result->body;
}

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  static constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += kAlphabet[v & 63];
  }
  if (i + 1 == bytes.size()) {
    const std::uint32_t v = bytes[i] << 16;
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += "==";
  } else if (i + 2 == bytes.size()) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8);
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += '=';
  }
  return out;
}

}  // namespace csdiff
