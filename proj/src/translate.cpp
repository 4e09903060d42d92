#include "privtranslate/translate.hpp"

#include "privtranslate/errors.hpp"
#include "privtranslate/hash.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <unordered_map>

namespace privtranslate {

namespace {

constexpr int64_t kInferenceChunk = 32;
constexpr int kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;

torch::Tensor gaussian_window(torch::ScalarType dtype) {
  auto coords = torch::arange(kSsimWindow, torch::kDouble) - (kSsimWindow - 1) / 2.0;
  auto g = torch::exp(-coords.pow(2) / (2.0 * kSsimSigma * kSsimSigma));
  g = g / g.sum();
  return g.outer(g).to(dtype);
}

torch::Tensor as_batch(const torch::Tensor& t) {
  if (t.dim() == 3) return t.unsqueeze(0);
  if (t.dim() == 4) return t;
  throw ShapeError("expected [C, H, W] or [N, C, H, W]");
}

}  // namespace

ImageBatch translate(const TranslationModel& model, const ImageBatch& images) {
  if (model.generator.is_empty()) throw Error("model has no generator");
  images.validate();
  torch::NoGradGuard guard;
  Generator gen = model.generator;  // holders share the module
  const bool was_training = gen->is_training();
  gen->eval();
  std::vector<torch::Tensor> chunks;
  for (int64_t begin = 0; begin < images.count(); begin += kInferenceChunk) {
    const int64_t end = std::min(begin + kInferenceChunk, images.count());
    auto out = gen->forward(images.pixels.slice(0, begin, end).to(torch::kFloat32));
    chunks.push_back(out.clamp(-1.0, 1.0));
  }
  gen->train(was_training);
  return ImageBatch{torch::cat(chunks, 0)};
}

Similarity similarity_from_string(const std::string& s) {
  if (s == "neg_l2") return Similarity::NegL2;
  if (s == "ssim") return Similarity::Ssim;
  throw InvalidArgumentError("unknown similarity: " + s);
}

torch::Tensor ssim(const torch::Tensor& a_in, const torch::Tensor& b_in) {
  auto a = as_batch(a_in);
  auto b = as_batch(b_in);
  if (a.sizes() != b.sizes()) throw ShapeError("ssim: shape mismatch");
  if (a.size(2) < kSsimWindow || a.size(3) < kSsimWindow) {
    throw ShapeError("ssim: images smaller than the 11x11 window");
  }
  torch::NoGradGuard guard;
  const auto dtype = a.scalar_type() == torch::kDouble ? torch::kDouble : torch::kFloat32;
  a = a.to(dtype);
  b = b.to(dtype);
  const int64_t channels = a.size(1);
  auto window = gaussian_window(dtype).expand({channels, 1, kSsimWindow, kSsimWindow}).contiguous();

  namespace F = torch::nn::functional;
  auto opts = F::Conv2dFuncOptions().groups(channels);
  auto mu_a = F::conv2d(a, window, opts);
  auto mu_b = F::conv2d(b, window, opts);
  auto mu_aa = mu_a * mu_a;
  auto mu_bb = mu_b * mu_b;
  auto mu_ab = mu_a * mu_b;
  auto sigma_aa = F::conv2d(a * a, window, opts) - mu_aa;
  auto sigma_bb = F::conv2d(b * b, window, opts) - mu_bb;
  auto sigma_ab = F::conv2d(a * b, window, opts) - mu_ab;

  // Dynamic range 2 for pixels in [-1, 1].
  const double c1 = std::pow(0.01 * 2.0, 2);
  const double c2 = std::pow(0.03 * 2.0, 2);
  auto ssim_map = ((2.0 * mu_ab + c1) * (2.0 * sigma_ab + c2)) /
                  ((mu_aa + mu_bb + c1) * (sigma_aa + sigma_bb + c2));
  return ssim_map.mean({1, 2, 3});
}

double pair_similarity(const torch::Tensor& a, const torch::Tensor& b, Similarity sim) {
  auto ab = as_batch(a);
  auto bb = as_batch(b);
  if (ab.sizes() != bb.sizes()) throw ShapeError("pair_similarity: shape mismatch");
  torch::NoGradGuard guard;
  if (sim == Similarity::Ssim) {
    const double s = ssim(ab, bb).mean().item<double>();
    return std::clamp((s + 1.0) / 2.0, 0.0, 1.0);
  }
  const double mse = (ab.to(torch::kDouble) - bb.to(torch::kDouble)).pow(2).mean().item<double>();
  return 1.0 / (1.0 + mse);
}

namespace {

double batched_pair_similarity(const torch::Tensor& pixels,
                               const std::vector<std::pair<int64_t, int64_t>>& pairs,
                               Similarity sim, std::vector<double>* per_pair = nullptr) {
  if (pairs.empty()) return 0.0;
  torch::NoGradGuard guard;
  double total = 0.0;
  constexpr size_t kChunk = 256;
  for (size_t begin = 0; begin < pairs.size(); begin += kChunk) {
    const size_t end = std::min(begin + kChunk, pairs.size());
    std::vector<int64_t> left, right;
    left.reserve(end - begin);
    right.reserve(end - begin);
    for (size_t k = begin; k < end; ++k) {
      left.push_back(pairs[k].first);
      right.push_back(pairs[k].second);
    }
    auto a = pixels.index_select(0, torch::tensor(left, torch::kLong));
    auto b = pixels.index_select(0, torch::tensor(right, torch::kLong));
    torch::Tensor scores;
    if (sim == Similarity::Ssim) {
      scores = ((ssim(a, b) + 1.0) / 2.0).clamp(0.0, 1.0);
    } else {
      auto mse = (a.to(torch::kDouble) - b.to(torch::kDouble))
                     .pow(2)
                     .mean({1, 2, 3});
      scores = 1.0 / (1.0 + mse);
    }
    auto acc = scores.to(torch::kDouble);
    total += acc.sum().item<double>();
    if (per_pair != nullptr) {
      for (int64_t k = 0; k < acc.size(0); ++k) per_pair->push_back(acc[k].item<double>());
    }
  }
  return total / static_cast<double>(pairs.size());
}

}  // namespace

ConsistencyReport consistency_report(const TranslationModel& model, const DomainDataset& dataset,
                                     Similarity similarity, int max_cross_pairs) {
  dataset.validate();
  if (!dataset.identity_ids.has_value()) {
    throw InvalidArgumentError("consistency_report needs identity labels");
  }
  if (max_cross_pairs < 1) throw InvalidArgumentError("max_cross_pairs must be >= 1");

  auto translated = translate(model, dataset.images);
  const auto& ids = *dataset.identity_ids;

  std::unordered_map<int64_t, std::vector<int64_t>> by_identity;
  for (size_t i = 0; i < ids.size(); ++i) by_identity[ids[i]].push_back(static_cast<int64_t>(i));
  if (by_identity.size() < 2) {
    throw TooFewSamplesError("consistency_report needs at least 2 identities");
  }

  ConsistencyReport report;
  std::vector<std::pair<int64_t, int64_t>> all_within;
  std::vector<int64_t> sorted_ids;
  for (const auto& [id, idx] : by_identity) sorted_ids.push_back(id);
  std::sort(sorted_ids.begin(), sorted_ids.end());

  for (int64_t id : sorted_ids) {
    const auto& idx = by_identity[id];
    if (idx.size() < 2) {
      ++report.skipped_identities;
      continue;
    }
    std::vector<std::pair<int64_t, int64_t>> pairs;
    for (size_t i = 0; i < idx.size(); ++i) {
      for (size_t j = i + 1; j < idx.size(); ++j) pairs.emplace_back(idx[i], idx[j]);
    }
    report.per_identity_within[id] =
        batched_pair_similarity(translated.pixels, pairs, similarity);
    all_within.insert(all_within.end(), pairs.begin(), pairs.end());
  }
  if (all_within.empty()) {
    throw TooFewSamplesError("no identity has 2 or more images");
  }
  report.within_identity = batched_pair_similarity(translated.pixels, all_within, similarity);

  // Cross-identity pairs: exhaustive when small, otherwise a seeded sample.
  std::vector<std::pair<int64_t, int64_t>> cross;
  const int64_t n = dataset.count();
  int64_t total_cross = 0;
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = i + 1; j < n; ++j) total_cross += (ids[i] != ids[j]) ? 1 : 0;
  }
  if (total_cross <= max_cross_pairs) {
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t j = i + 1; j < n; ++j) {
        if (ids[i] != ids[j]) cross.emplace_back(i, j);
      }
    }
  } else {
    std::mt19937_64 rng(derive_seed(model.seed, "consistency-cross"));
    std::uniform_int_distribution<int64_t> pick(0, n - 1);
    while (cross.size() < static_cast<size_t>(max_cross_pairs)) {
      const int64_t i = pick(rng);
      const int64_t j = pick(rng);
      if (ids[i] != ids[j]) cross.emplace_back(i, j);
    }
  }
  report.cross_identity = batched_pair_similarity(translated.pixels, cross, similarity);

  const double denom = std::max(report.cross_identity, 1e-12);
  report.separation_ratio = report.within_identity / denom;
  return report;
}

double perturbation_stability(const TranslationModel& model, const ImageBatch& images,
                              const AugmentParams& params, Similarity similarity) {
  images.validate();
  auto perturbed = augment_identity(images, params, /*copies=*/1);
  auto base = translate(model, images);
  auto moved = translate(model, perturbed);
  auto stacked = ImageBatch::concat({base, moved});
  std::vector<std::pair<int64_t, int64_t>> offset_pairs;
  for (int64_t i = 0; i < images.count(); ++i) offset_pairs.emplace_back(i, i + images.count());
  return batched_pair_similarity(stacked.pixels, offset_pairs, similarity);
}

}  // namespace privtranslate
