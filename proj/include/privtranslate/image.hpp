#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <vector>

namespace privtranslate {

/// A batch of RGB images stored as a float32 [N, 3, H, W] tensor with every
/// value in [-1, 1].
struct ImageBatch {
  torch::Tensor pixels;

  ImageBatch() = default;
  explicit ImageBatch(torch::Tensor t);

  int64_t count() const { return pixels.defined() ? pixels.size(0) : 0; }
  int64_t height() const { return pixels.size(2); }
  int64_t width() const { return pixels.size(3); }

  ImageBatch slice(const std::vector<int64_t>& indices) const;
  ImageBatch concat(const ImageBatch& other) const;
  static ImageBatch concat(const std::vector<ImageBatch>& batches);

  /// Throws ShapeError / InvalidArgumentError when the tensor is not a valid
  /// [N, 3, H, W] float batch bounded by [-1, 1].
  static void validate(const torch::Tensor& t);
  void validate() const { validate(pixels); }
};

/// Maps a uint8 channel value to [-1, 1]: v / 127.5 - 1.
torch::Tensor uint8_to_unit(const torch::Tensor& u8);

/// Inverse of uint8_to_unit; rounds and clamps so the uint8 round trip is the
/// identity for all 256 values.
torch::Tensor unit_to_uint8(const torch::Tensor& f);

void save_png(const torch::Tensor& image_chw, const std::filesystem::path& path);
torch::Tensor load_png(const std::filesystem::path& path, int size);

/// Tiles images into a rows x cols grid (row-major) and writes one PNG.
void save_grid_png(const ImageBatch& batch, int cols, const std::filesystem::path& path);

}  // namespace privtranslate
