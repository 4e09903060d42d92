#include <opencv2/imgproc.hpp>
#include <random>

#include "privtranslate/data.hpp"
#include "privtranslate/errors.hpp"

namespace privtranslate {

void AugmentParams::validate() const {
  if (max_rotation_deg < 0 || zoom_range < 0 || background_jitter < 0) {
    throw InvalidArgumentError("augmentation ranges must be non-negative");
  }
  if (hue_shift_range < 0 || hue_shift_range > 0.5) {
    throw InvalidArgumentError("hue_shift_range must lie in [0, 0.5]");
  }
}

bool AugmentParams::is_zero() const {
  return max_rotation_deg == 0 && hue_shift_range == 0 && zoom_range == 0 &&
         background_jitter == 0;
}

namespace {

// SVG-style hue rotation matrix applied in [0, 1] RGB space.
torch::Tensor hue_rotation_matrix(double turns) {
  const double a = turns * 2.0 * M_PI;
  const double c = std::cos(a), s = std::sin(a);
  return torch::tensor({{0.213 + 0.787 * c - 0.213 * s, 0.715 - 0.715 * c - 0.715 * s,
                         0.072 - 0.072 * c + 0.928 * s},
                        {0.213 - 0.213 * c + 0.143 * s, 0.715 + 0.285 * c + 0.140 * s,
                         0.072 - 0.072 * c - 0.283 * s},
                        {0.213 - 0.213 * c - 0.787 * s, 0.715 - 0.715 * c + 0.715 * s,
                         0.072 + 0.285 * c + 0.072 * s}},
                       torch::kFloat32);
}

// 1 near the borders, 0 at the center; background offsets fade in radially.
torch::Tensor border_mask(int64_t h, int64_t w) {
  auto ys = torch::linspace(-1.0, 1.0, h).view({h, 1});
  auto xs = torch::linspace(-1.0, 1.0, w).view({1, w});
  auto r = (ys * ys + xs * xs).sqrt() / std::sqrt(2.0);
  return ((r - 0.35) * 2.2).clamp(0.0, 1.0).to(torch::kFloat32);
}

torch::Tensor warp_rotate_zoom(const torch::Tensor& chw01, double angle_deg, double zoom) {
  const int h = static_cast<int>(chw01.size(1));
  const int w = static_cast<int>(chw01.size(2));
  auto hwc = chw01.permute({1, 2, 0}).contiguous();
  cv::Mat src(h, w, CV_32FC3, hwc.data_ptr<float>());
  cv::Mat m = cv::getRotationMatrix2D(cv::Point2f(w / 2.0f, h / 2.0f), angle_deg, zoom);
  cv::Mat dst;
  cv::warpAffine(src, dst, m, src.size(), cv::INTER_LINEAR, cv::BORDER_REFLECT_101);
  auto out = torch::from_blob(dst.data, {h, w, 3}, torch::kFloat32).clone();
  return out.permute({2, 0, 1}).contiguous();
}

}  // namespace

ImageBatch augment_identity(const ImageBatch& images, const AugmentParams& params, int copies,
                            AugmentTrace* trace) {
  params.validate();
  if (copies < 1) throw InvalidArgumentError("copies must be >= 1");
  const int64_t n = images.count();
  if (n == 0) throw EmptyDatasetError("cannot augment an empty batch");

  // Field streams drawn back to back in output order (image-major), each
  // draw uniform in [0, 1) mapped affinely onto its parameter range.
  const int64_t total = n * copies;
  std::mt19937_64 rng(params.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto draw_signed = [&](double range) { return (2.0 * unit(rng) - 1.0) * range; };

  std::vector<double> rot(total), hue(total), zoom(total);
  std::vector<std::array<double, 3>> background(total);
  for (int64_t j = 0; j < total; ++j) rot[j] = draw_signed(params.max_rotation_deg);
  for (int64_t j = 0; j < total; ++j) hue[j] = draw_signed(params.hue_shift_range);
  for (int64_t j = 0; j < total; ++j) zoom[j] = 1.0 + draw_signed(params.zoom_range);
  for (int64_t j = 0; j < total; ++j) {
    background[j] = {draw_signed(params.background_jitter),
                     draw_signed(params.background_jitter),
                     draw_signed(params.background_jitter)};
  }
  if (trace) {
    trace->rotation_deg = rot;
    trace->hue_shift = hue;
    trace->zoom = zoom;
    trace->background = background;
  }

  const int64_t h = images.height(), w = images.width();
  torch::Tensor mask;  // lazily built
  std::vector<torch::Tensor> out;
  out.reserve(total);
  for (int64_t i = 0; i < n; ++i) {
    for (int c = 0; c < copies; ++c) {
      const int64_t j = i * copies + c;
      auto img01 = (images.pixels[i] + 1.0f) * 0.5f;
      bool touched = false;
      if (hue[j] != 0.0) {
        auto m = hue_rotation_matrix(hue[j]);
        img01 = torch::matmul(m, img01.reshape({3, h * w})).reshape({3, h, w});
        touched = true;
      }
      if (rot[j] != 0.0 || zoom[j] != 1.0) {
        img01 = warp_rotate_zoom(img01.contiguous(), rot[j], zoom[j]);
        touched = true;
      }
      if (background[j][0] != 0.0 || background[j][1] != 0.0 || background[j][2] != 0.0) {
        if (!mask.defined()) mask = border_mask(h, w);
        auto offset = torch::tensor({static_cast<float>(background[j][0]),
                                     static_cast<float>(background[j][1]),
                                     static_cast<float>(background[j][2])})
                          .view({3, 1, 1});
        img01 = img01 + mask.unsqueeze(0) * offset;
        touched = true;
      }
      if (touched) {
        out.push_back((img01.clamp(0.0, 1.0) * 2.0f - 1.0f).contiguous());
      } else {
        out.push_back(images.pixels[i].clone());
      }
    }
  }
  return ImageBatch(torch::stack(out));
}

}  // namespace privtranslate
