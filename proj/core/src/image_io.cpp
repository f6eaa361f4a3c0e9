#include "csdiff/image_io.hpp"

#include <cstring>
#include <fstream>

#include <png.h>
#include <torch/nn/functional/upsampling.h>

#include "csdiff/common.hpp"

namespace csdiff {
namespace {

png_uint_32 png_format_for(int channels) {
  switch (channels) {
    case 1:
      return PNG_FORMAT_GRAY;
    case 3:
      return PNG_FORMAT_RGB;
    case 4:
      return PNG_FORMAT_RGBA;
    default:
      throw InvalidArgument("unsupported channel count " + std::to_string(channels));
  }
}

}  // namespace

Image read_png(const std::filesystem::path& path, int channels) {
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.string().c_str())) {
    throw IoError("cannot decode image " + path.string() + ": " + png.message);
  }
  png.format = png_format_for(channels);
  Image image;
  image.width = static_cast<int>(png.width);
  image.height = static_cast<int>(png.height);
  image.channels = channels;
  image.pixels.resize(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, image.pixels.data(), 0, nullptr)) {
    std::string message = png.message;
    png_image_free(&png);
    throw IoError("cannot decode image " + path.string() + ": " + message);
  }
  return image;
}

void write_png(const std::filesystem::path& path, const Image& image) {
  if (image.pixels.size() != static_cast<std::size_t>(image.width) * image.height * image.channels) {
    throw InvalidArgument("write_png: pixel buffer does not match dimensions");
  }
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = png_format_for(image.channels);
  if (!png_image_write_to_file(&png, path.string().c_str(), 0, image.pixels.data(), 0, nullptr)) {
    throw IoError("cannot write image " + path.string() + ": " + png.message);
  }
}

torch::Tensor image_to_tensor(const Image& image) {
  auto hwc = torch::from_blob(const_cast<std::uint8_t*>(image.pixels.data()),
                              {image.height, image.width, image.channels}, torch::kUInt8);
  return hwc.permute({2, 0, 1}).to(torch::kFloat32).mul(2.0 / 255.0).sub(1.0).contiguous();
}

Image tensor_to_image(const torch::Tensor& chw) {
  if (chw.dim() != 3) throw InvalidArgument("tensor_to_image expects [C,H,W]");
  auto hwc = chw.detach()
                 .to(torch::kFloat64)
                 .clamp(-1.0, 1.0)
                 .add(1.0)
                 .mul(127.5)
                 .round()
                 .to(torch::kUInt8)
                 .permute({1, 2, 0})
                 .contiguous();
  Image image;
  image.channels = static_cast<int>(chw.size(0));
  image.height = static_cast<int>(chw.size(1));
  image.width = static_cast<int>(chw.size(2));
  image.pixels.assign(hwc.data_ptr<std::uint8_t>(), hwc.data_ptr<std::uint8_t>() + hwc.numel());
  return image;
}

torch::Tensor resize_square(const torch::Tensor& chw, int size) {
  if (size <= 0) throw InvalidArgument("resize_square: size must be positive");
  if (chw.size(1) == size && chw.size(2) == size) return chw;
  namespace F = torch::nn::functional;
  return F::interpolate(chw.unsqueeze(0), F::InterpolateFuncOptions()
                                              .size(std::vector<int64_t>{size, size})
                                              .mode(torch::kBilinear)
                                              .align_corners(false))
      .squeeze(0);
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace csdiff
