#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/optim/adamw.h>

#include "csdiff/model.hpp"

namespace csdiff {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Archive layout: the 8-byte magic "CSDFCKPT", u32 version, u64 header
/// length, a JSON header, then the raw little-endian tensor bytes at the
/// offsets listed in the header. Parameter entries are sorted by name;
/// optimizer moments follow under `optim.<param>.exp_avg[_sq]`.
struct CheckpointMeta {
  std::int64_t step = 0;
  std::string stage;           // "init", "disentangle" or "generative"
  nlohmann::json config;       // {"model": ..., "train": ...}
};

void save_checkpoint(const std::filesystem::path& path, Model& model, const CheckpointMeta& meta,
                     const torch::optim::AdamW* optimizer = nullptr);

/// Restores every parameter of `model` (all must be present with matching
/// shapes) and, when given, the AdamW moments of parameters it optimizes.
CheckpointMeta load_checkpoint(const std::filesystem::path& path, Model& model,
                               torch::optim::AdamW* optimizer = nullptr);

/// Header only: meta, tensor table and group sizes, without reading payloads.
nlohmann::json read_checkpoint_header(const std::filesystem::path& path);
ModelConfig checkpoint_model_config(const std::filesystem::path& path);

/// Builds a model from the checkpoint's own config and loads it.
Model load_model(const std::filesystem::path& path, CheckpointMeta* meta = nullptr);

/// Raw bytes of every parameter whose name starts with one of `groups`
/// (all groups when empty), concatenated in name order.
std::vector<std::uint8_t> parameter_payload(const Model& model, const std::vector<std::string>& groups = {});

/// Summary used by `inspect-checkpoint`: meta plus per-group tensor and
/// element counts.
nlohmann::json describe_checkpoint(const std::filesystem::path& path);

}  // namespace csdiff
