#pragma once

#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>

#include "csdiff/common.hpp"
#include "csdiff/config.hpp"

namespace csdiff {

/// The request sent for every artwork; "<image>" marks where the image is bound.
inline constexpr std::string_view kCaptionPrompt = "<image>, describe the content of this picture briefly.";

/// Transient failure talking to a captioner (connection refused, timeout, 5xx).
/// Content-description generation retries these; any other exception is final.
class CaptionerTransportError : public Error {
 public:
  using Error::Error;
};

/// Vision-language captioner. Implementations must be safe to call from
/// several threads at once.
class CaptionerClient {
 public:
  virtual ~CaptionerClient() = default;
  virtual std::string caption(std::span<const std::uint8_t> image_bytes, std::string_view prompt) = 0;
};

/// Deterministic stand-in: answers "a picture of <n> bytes" style captions
/// derived from a hash of the image bytes, or a fixed text when one is given.
class EchoCaptioner final : public CaptionerClient {
 public:
  EchoCaptioner() = default;
  explicit EchoCaptioner(std::string fixed_reply) : fixed_reply_(std::move(fixed_reply)) {}
  std::string caption(std::span<const std::uint8_t> image_bytes, std::string_view prompt) override;

 private:
  std::string fixed_reply_;
};

struct CaptionerSettings {
  std::string url = "http://127.0.0.1:8080/caption";
  std::chrono::milliseconds timeout{30000};
  int retries = 3;

  /// Reads `captioner.url`, `captioner.timeout_ms`, `captioner.retries`.
  static CaptionerSettings from_config(const Config& config);
  static std::map<std::string, std::string> defaults();
};

/// Posts `{"prompt": ..., "image_base64": ...}` as JSON and accepts either a
/// JSON body with a `text` (or `response`) field or a plain-text body.
class HttpCaptioner final : public CaptionerClient {
 public:
  explicit HttpCaptioner(CaptionerSettings settings);
  std::string caption(std::span<const std::uint8_t> image_bytes, std::string_view prompt) override;

 private:
  CaptionerSettings settings_;
  std::string scheme_host_port_;
  std::string path_;
};

std::string base64_encode(std::span<const std::uint8_t> bytes);

}  // namespace csdiff
