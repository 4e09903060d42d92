#include "privtranslate/image.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "privtranslate/errors.hpp"

namespace privtranslate {

ImageBatch::ImageBatch(torch::Tensor t) : pixels(std::move(t)) { validate(pixels); }

void ImageBatch::validate(const torch::Tensor& t) {
  if (!t.defined() || t.dim() != 4 || t.size(1) != 3) {
    throw ShapeError("image batch must be a [N, 3, H, W] tensor");
  }
  if (t.scalar_type() != torch::kFloat32 && t.scalar_type() != torch::kFloat64) {
    throw InvalidArgumentError("image batch must be a float tensor");
  }
  if (t.numel() > 0) {
    const double lo = t.min().item<double>();
    const double hi = t.max().item<double>();
    if (lo < -1.0 || hi > 1.0 || !std::isfinite(lo) || !std::isfinite(hi)) {
      throw InvalidArgumentError("image batch values must lie in [-1, 1]");
    }
  }
}

ImageBatch ImageBatch::slice(const std::vector<int64_t>& indices) const {
  auto idx = torch::tensor(indices, torch::kInt64);
  return ImageBatch(pixels.index_select(0, idx).contiguous());
}

ImageBatch ImageBatch::concat(const ImageBatch& other) const {
  if (count() == 0) return other;
  if (other.count() == 0) return *this;
  if (height() != other.height() || width() != other.width()) {
    throw ShapeError("cannot concatenate image batches of different sizes");
  }
  return ImageBatch(torch::cat({pixels, other.pixels}, 0));
}

ImageBatch ImageBatch::concat(const std::vector<ImageBatch>& batches) {
  ImageBatch out;
  for (const auto& b : batches) out = out.concat(b);
  return out;
}

torch::Tensor uint8_to_unit(const torch::Tensor& u8) {
  return u8.to(torch::kFloat32) / 127.5f - 1.0f;
}

torch::Tensor unit_to_uint8(const torch::Tensor& f) {
  return ((f + 1.0f) * 127.5f).round().clamp(0, 255).to(torch::kUInt8);
}

namespace {

cv::Mat tensor_to_bgr(const torch::Tensor& image_chw) {
  auto u8 = unit_to_uint8(image_chw).permute({1, 2, 0}).contiguous();  // HWC, RGB
  cv::Mat rgb(static_cast<int>(u8.size(0)), static_cast<int>(u8.size(1)), CV_8UC3,
              u8.data_ptr());
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  return bgr;
}

}  // namespace

void save_png(const torch::Tensor& image_chw, const std::filesystem::path& path) {
  std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), tensor_to_bgr(image_chw))) {
    throw Error("failed to write " + path.string());
  }
}

torch::Tensor load_png(const std::filesystem::path& path, int size) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) {
    throw NotFoundError("cannot decode image " + path.string());
  }
  if (size > 0 && (bgr.rows != size || bgr.cols != size)) {
    cv::Mat resized;
    cv::resize(bgr, resized, cv::Size(size, size), 0, 0, cv::INTER_AREA);
    bgr = resized;
  }
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  auto u8 = torch::from_blob(rgb.data, {rgb.rows, rgb.cols, 3}, torch::kUInt8).clone();
  return uint8_to_unit(u8.permute({2, 0, 1}).contiguous());
}

void save_grid_png(const ImageBatch& batch, int cols, const std::filesystem::path& path) {
  const int64_t n = batch.count();
  if (n == 0) throw EmptyDatasetError("cannot render a grid from an empty batch");
  cols = std::max(1, std::min<int>(cols, static_cast<int>(n)));
  const int64_t rows = (n + cols - 1) / cols;
  auto canvas = torch::ones({3, rows * batch.height(), cols * batch.width()});
  for (int64_t i = 0; i < n; ++i) {
    const int64_t r = i / cols, c = i % cols;
    canvas.index_put_({torch::indexing::Slice(),
                       torch::indexing::Slice(r * batch.height(), (r + 1) * batch.height()),
                       torch::indexing::Slice(c * batch.width(), (c + 1) * batch.width())},
                      batch.pixels[i]);
  }
  save_png(canvas, path);
}

}  // namespace privtranslate
