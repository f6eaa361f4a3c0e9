#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <torch/types.h>

namespace csdiff {

/// 8-bit interleaved image (HWC).
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;  // 1, 3, or 4
  std::vector<std::uint8_t> pixels;
};

/// Decodes a PNG and converts it to `channels` (1, 3, or 4) channels.
Image read_png(const std::filesystem::path& path, int channels);
void write_png(const std::filesystem::path& path, const Image& image);

/// [C,H,W] float tensor in [-1, 1], via x = 2·v/255 − 1.
torch::Tensor image_to_tensor(const Image& image);
/// Inverse of image_to_tensor; values are clamped to [-1, 1] before quantization.
Image tensor_to_image(const torch::Tensor& chw);

/// Bilinear resize of a [C,H,W] tensor to size×size (no-op when already that size).
torch::Tensor resize_square(const torch::Tensor& chw, int size);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);

}  // namespace csdiff
