#pragma once

#include <torch/torch.h>

#include <map>
#include <string>

#include "privtranslate/data.hpp"
#include "privtranslate/trainers.hpp"

namespace privtranslate {

/// Deterministic inference through the forward generator; output bounded in
/// [-1, 1] with the input's shape.
ImageBatch translate(const TranslationModel& model, const ImageBatch& images);

enum class Similarity { NegL2, Ssim };

Similarity similarity_from_string(const std::string& s);

/// Mean structural similarity per image pair, in [-1, 1]. 1 for identical
/// inputs.
torch::Tensor ssim(const torch::Tensor& a, const torch::Tensor& b);

/// Pairwise similarity mapped to [0, 1] under the chosen index.
double pair_similarity(const torch::Tensor& a, const torch::Tensor& b, Similarity sim);

struct ConsistencyReport {
  double within_identity = 0.0;  // mean similarity, translated images, same identity
  double cross_identity = 0.0;   // mean similarity across identities
  double separation_ratio = 0.0; // within / cross
  std::map<int64_t, double> per_identity_within;
  int skipped_identities = 0;    // identities with < 2 images
};

/// Translates the dataset and scores how tightly translations of one identity
/// cluster versus translations of different identities.
ConsistencyReport consistency_report(const TranslationModel& model, const DomainDataset& dataset,
                                     Similarity similarity = Similarity::Ssim,
                                     int max_cross_pairs = 2000);

/// Mean similarity between translate(x) and translate(augment(x)), in [0, 1].
double perturbation_stability(const TranslationModel& model, const ImageBatch& images,
                              const AugmentParams& params,
                              Similarity similarity = Similarity::Ssim);

}  // namespace privtranslate
