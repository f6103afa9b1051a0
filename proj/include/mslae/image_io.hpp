#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "mslae/tensor.hpp"

namespace mslae {

/// Decodes PNG, TIFF, PPM/PGM, BMP (via OpenCV) or the first frame of a GIF.
/// Returns a 1 x channels x H x W tensor scaled to [0, 1]; `channels` is 3
/// (RGB) or 1 (luma, or the first channel of colour input).
Tensor read_image(const std::filesystem::path& path, int channels);

/// 16-bit grayscale PNG, value round(p * 65535) for p in [0, 1].
void write_probability_png(const std::filesystem::path& path, const Tensor& probabilities);
std::vector<uint16_t> quantize_probabilities(std::span<const float> probabilities);

/// 1-bit PNG; nonzero entries are written as foreground.
void write_mask_png(const std::filesystem::path& path, std::span<const uint8_t> mask, int64_t height, int64_t width);

/// 8-bit image from a 1 x {1,3} x H x W tensor in [0, 1] (fixtures, synthetic data).
void write_image_png(const std::filesystem::path& path, const Tensor& image);

struct GifFrame {
  int64_t width = 0;
  int64_t height = 0;
  std::vector<uint8_t> rgb;  // width * height * 3
};

/// First frame of a GIF87a/GIF89a stream composited onto a zero canvas.
GifFrame decode_gif(std::span<const uint8_t> bytes);

}  // namespace mslae
