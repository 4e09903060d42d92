#include <opencv2/imgproc.hpp>
#include <random>

#include "privtranslate/data.hpp"
#include "privtranslate/errors.hpp"
#include "privtranslate/hash.hpp"

namespace privtranslate {

namespace {

// All colors are handled as RGB; the canvas is only converted once at the end.
cv::Scalar hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp) % 6) {
    case 0: r = c; g = x; break;
    case 1: r = x; g = c; break;
    case 2: g = c; b = x; break;
    case 3: g = x; b = c; break;
    case 4: r = x; b = c; break;
    default: r = c; b = x; break;
  }
  const double m = v - c;
  return cv::Scalar((r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0);
}

struct Rng {
  std::mt19937_64 gen;
  explicit Rng(uint64_t seed) : gen(seed) {}
  double uniform(double lo, double hi) {
    return lo + (hi - lo) * std::uniform_real_distribution<double>(0.0, 1.0)(gen);
  }
  int uniform_int(int lo, int hi) {  // inclusive
    return static_cast<int>(std::uniform_int_distribution<int>(lo, hi)(gen));
  }
  bool bernoulli(double p) { return std::uniform_real_distribution<double>(0.0, 1.0)(gen) < p; }
};

struct FaceoidIdentity {
  cv::Scalar face_color, eye_color, mouth_color, hair_color;
  double face_ax, face_ay;
  double eye_dx, eye_y, eye_r, pupil_ratio;
  double mouth_w, mouth_y, mouth_curve, mouth_thick;
  bool has_hair = false;
  double hair_extent = 0.0;
  bool has_brows = false;
  double brow_tilt = 0.0;

  static FaceoidIdentity draw(Rng& rng) {
    FaceoidIdentity p;
    p.face_color = hsv_to_rgb(rng.uniform(0.0, 1.0), rng.uniform(0.35, 0.85),
                              rng.uniform(0.60, 0.95));
    p.face_ax = rng.uniform(0.28, 0.40);
    p.face_ay = rng.uniform(0.34, 0.47);
    p.eye_dx = rng.uniform(0.10, 0.20);
    p.eye_y = rng.uniform(-0.16, -0.04);
    p.eye_r = rng.uniform(0.035, 0.075);
    p.pupil_ratio = rng.uniform(0.30, 0.65);
    p.eye_color = hsv_to_rgb(rng.uniform(0.0, 1.0), rng.uniform(0.3, 0.9),
                             rng.uniform(0.35, 0.85));
    p.mouth_w = rng.uniform(0.13, 0.28);
    p.mouth_y = rng.uniform(0.16, 0.30);
    p.mouth_curve = rng.uniform(-0.10, 0.16);
    p.mouth_thick = rng.uniform(0.015, 0.040);
    p.mouth_color = hsv_to_rgb(rng.uniform(0.93, 1.04), rng.uniform(0.5, 0.95),
                               rng.uniform(0.35, 0.8));
    p.has_hair = rng.bernoulli(0.7);
    p.hair_color = hsv_to_rgb(rng.uniform(0.0, 0.15), rng.uniform(0.3, 0.9),
                              rng.uniform(0.1, 0.6));
    p.hair_extent = rng.uniform(0.25, 0.55);
    p.has_brows = rng.bernoulli(0.6);
    p.brow_tilt = rng.uniform(-10.0, 10.0);
    return p;
  }
};

struct FlowroidIdentity {
  int petal_count = 5;
  cv::Scalar petal_color, inner_color, core_color;
  double petal_len, petal_w, core_r;
  bool inner_ring = false;
  double inner_scale = 0.5;

  static FlowroidIdentity draw(Rng& rng) {
    FlowroidIdentity p;
    p.petal_count = rng.uniform_int(4, 9);
    p.petal_color = hsv_to_rgb(rng.uniform(0.0, 1.0), rng.uniform(0.45, 0.95),
                               rng.uniform(0.55, 0.98));
    p.petal_len = rng.uniform(0.26, 0.40);
    p.petal_w = rng.uniform(0.10, 0.22);
    p.core_r = rng.uniform(0.07, 0.15);
    p.core_color = hsv_to_rgb(rng.uniform(0.07, 0.17), rng.uniform(0.5, 0.95),
                              rng.uniform(0.45, 0.9));
    p.inner_ring = rng.bernoulli(0.5);
    p.inner_color = hsv_to_rgb(rng.uniform(0.0, 1.0), rng.uniform(0.4, 0.9),
                               rng.uniform(0.5, 0.95));
    p.inner_scale = rng.uniform(0.4, 0.65);
    return p;
  }
};

const cv::Scalar kFaceBackground(204, 208, 214);
const cv::Scalar kFlowerBackground(214, 219, 206);

void render_faceoid(cv::Mat& canvas, const FaceoidIdentity& p) {
  const int ss = canvas.rows;
  const cv::Point center(ss / 2, ss / 2);
  auto px = [&](double f) { return static_cast<int>(std::lround(f * ss)); };

  if (p.has_hair) {
    cv::ellipse(canvas, center, cv::Size(px(p.face_ax * 1.12), px(p.face_ay * 1.12)), 0, 180,
                360 + p.hair_extent * 180, p.hair_color, cv::FILLED, cv::LINE_AA);
  }
  cv::ellipse(canvas, center, cv::Size(px(p.face_ax), px(p.face_ay)), 0, 0, 360, p.face_color,
              cv::FILLED, cv::LINE_AA);

  for (int side : {-1, 1}) {
    const cv::Point eye(center.x + side * px(p.eye_dx), center.y + px(p.eye_y));
    cv::circle(canvas, eye, px(p.eye_r), cv::Scalar(245, 245, 245), cv::FILLED, cv::LINE_AA);
    cv::circle(canvas, eye, px(p.eye_r * p.pupil_ratio), p.eye_color, cv::FILLED, cv::LINE_AA);
    if (p.has_brows) {
      const cv::Point b0(eye.x - px(p.eye_r), eye.y - px(p.eye_r * 1.7));
      const cv::Point b1(eye.x + px(p.eye_r),
                         eye.y - px(p.eye_r * 1.7) - side * px(p.brow_tilt / 400.0));
      cv::line(canvas, b0, b1, cv::Scalar(40, 30, 25), std::max(1, px(0.012)), cv::LINE_AA);
    }
  }

  const int mouth_h = std::max(1, px(std::abs(p.mouth_curve)));
  const int thick = std::max(1, px(p.mouth_thick));
  const cv::Point mouth(center.x, center.y + px(p.mouth_y));
  if (p.mouth_curve >= 0) {
    cv::ellipse(canvas, mouth, cv::Size(px(p.mouth_w), mouth_h), 0, 20, 160, p.mouth_color,
                thick, cv::LINE_AA);
  } else {
    cv::ellipse(canvas, cv::Point(mouth.x, mouth.y + mouth_h), cv::Size(px(p.mouth_w), mouth_h),
                0, 200, 340, p.mouth_color, thick, cv::LINE_AA);
  }
}

void render_flowroid(cv::Mat& canvas, const FlowroidIdentity& p) {
  const int ss = canvas.rows;
  const cv::Point center(ss / 2, ss / 2);
  auto px = [&](double f) { return static_cast<int>(std::lround(f * ss)); };

  for (int ring = 0; ring < (p.inner_ring ? 2 : 1); ++ring) {
    const double scale = ring == 0 ? 1.0 : p.inner_scale;
    const cv::Scalar color = ring == 0 ? p.petal_color : p.inner_color;
    const double offset = ring == 0 ? 0.0 : 180.0 / p.petal_count;
    for (int i = 0; i < p.petal_count; ++i) {
      const double theta = 360.0 * i / p.petal_count + offset;
      const double rad = theta * CV_PI / 180.0;
      const double dist = p.petal_len * 0.55 * scale;
      const cv::Point pc(center.x + static_cast<int>(std::lround(std::cos(rad) * dist * ss)),
                         center.y + static_cast<int>(std::lround(std::sin(rad) * dist * ss)));
      cv::ellipse(canvas, pc, cv::Size(px(p.petal_len * 0.5 * scale), px(p.petal_w * 0.5 * scale)),
                  theta, 0, 360, color, cv::FILLED, cv::LINE_AA);
    }
  }
  cv::circle(canvas, center, px(p.core_r), p.core_color, cv::FILLED, cv::LINE_AA);
}

torch::Tensor finish_image(cv::Mat canvas, int size, Rng& variation, const cv::Scalar& bg) {
  const int ss = canvas.rows;
  const double angle = variation.uniform(-5.0, 5.0);
  const double scale = variation.uniform(0.95, 1.05);
  const double dx = variation.uniform(-0.02, 0.02) * ss;
  const double dy = variation.uniform(-0.02, 0.02) * ss;
  const double brightness = variation.uniform(0.92, 1.08);

  cv::Mat m = cv::getRotationMatrix2D(cv::Point2f(ss / 2.0f, ss / 2.0f), angle, scale);
  m.at<double>(0, 2) += dx;
  m.at<double>(1, 2) += dy;
  cv::Mat warped;
  cv::warpAffine(canvas, warped, m, canvas.size(), cv::INTER_LINEAR, cv::BORDER_CONSTANT, bg);
  cv::Mat small;
  cv::resize(warped, small, cv::Size(size, size), 0, 0, cv::INTER_AREA);

  auto u8 = torch::from_blob(small.data, {size, size, 3}, torch::kUInt8).clone();
  auto f = uint8_to_unit(u8.permute({2, 0, 1}).contiguous());
  auto f01 = ((f + 1.0f) * 0.5f * brightness).clamp(0.0, 1.0);
  return f01 * 2.0f - 1.0f;
}

}  // namespace

DomainDataset synth_identity_dataset(int n_identities, int per_identity, int size,
                                     const std::string& domain_tag, uint64_t seed) {
  if (n_identities < 1) throw InvalidArgumentError("n_identities must be >= 1");
  if (per_identity < 1) throw InvalidArgumentError("per_identity must be >= 1");
  if (size < 8) throw InvalidArgumentError("size must be >= 8");
  const bool face = domain_tag == "faceoid";
  if (!face && domain_tag != "flowroid") {
    throw InvalidDomainError("unknown synthetic domain: " + domain_tag);
  }

  const int ss = size * 2;  // supersample for cleaner edges
  const cv::Scalar bg = face ? kFaceBackground : kFlowerBackground;

  std::vector<torch::Tensor> images;
  std::vector<int64_t> ids;
  images.reserve(static_cast<size_t>(n_identities) * per_identity);
  for (int id = 0; id < n_identities; ++id) {
    Rng id_rng(derive_seed(seed, face ? "faceoid-identity" : "flowroid-identity",
                           static_cast<uint64_t>(id)));
    FaceoidIdentity fp;
    FlowroidIdentity wp;
    if (face) {
      fp = FaceoidIdentity::draw(id_rng);
    } else {
      wp = FlowroidIdentity::draw(id_rng);
    }
    for (int copy = 0; copy < per_identity; ++copy) {
      cv::Mat canvas(ss, ss, CV_8UC3, bg);
      if (face) {
        render_faceoid(canvas, fp);
      } else {
        render_flowroid(canvas, wp);
      }
      Rng var(derive_seed(seed, "variation",
                          static_cast<uint64_t>(id) * 1000003ull + static_cast<uint64_t>(copy)));
      images.push_back(finish_image(std::move(canvas), size, var, bg));
      ids.push_back(id);
    }
  }

  DomainDataset out;
  out.domain_tag = domain_tag;
  out.images = ImageBatch(torch::stack(images));
  out.identity_ids = std::move(ids);
  return out;
}

}  // namespace privtranslate
