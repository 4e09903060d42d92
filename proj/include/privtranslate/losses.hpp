#pragma once

#include <torch/torch.h>

#include <functional>
#include <optional>
#include <vector>

namespace privtranslate {

struct LossWeights {
  double adv = 1.0;
  double cycle = 10.0;
  double feature_match = 1.0;
  double gradient_penalty = 10.0;
  double travel = 10.0;
  double siamese_margin = 10.0;
  double margin = 10.0;  // target pairwise embedding distance

  void validate() const;
};

/// Cross-entropy adversarial losses on raw scores. The generator side is the
/// non-saturating form -mean(log sigma(d_fake)). Probabilities are clamped to
/// [1e-8, 1 - 1e-8] so both values stay finite.
std::pair<torch::Tensor, torch::Tensor> adv_loss_minimax(const torch::Tensor& d_real,
                                                         const torch::Tensor& d_fake);

/// Least-squares adversarial losses with real label 1 and fake label 0.
std::pair<torch::Tensor, torch::Tensor> lsgan_loss(const torch::Tensor& d_real,
                                                   const torch::Tensor& d_fake);

/// Wasserstein critic/generator objectives (no penalty term).
std::pair<torch::Tensor, torch::Tensor> wgan_loss(const torch::Tensor& d_real,
                                                  const torch::Tensor& d_fake);

/// Mean absolute difference between an image batch and its reconstruction.
torch::Tensor cycle_loss(const torch::Tensor& original, const torch::Tensor& reconstructed);

/// Sum over layers of the L2 distance between batch-averaged features.
torch::Tensor feature_matching_loss(const std::vector<torch::Tensor>& real_feats,
                                    const std::vector<torch::Tensor>& fake_feats);

using ForwardFn = std::function<torch::Tensor(const torch::Tensor&)>;

/// lambda_gp * E[(||grad D(x_hat)||_2 - 1)^2] at random interpolates between
/// real and fake. `eps` overrides the per-sample mix factors (testing).
torch::Tensor gradient_penalty(const ForwardFn& discriminator, const torch::Tensor& real,
                               const torch::Tensor& fake, double lambda_gp,
                               std::optional<torch::Tensor> eps = std::nullopt);

/// Transformation-vector loss on precomputed embeddings: mean over unordered
/// pairs of (1 - cos(v_ij, v'_ij)) + ||v_ij - v'_ij||_2, where
/// v_ij = s_i - s_j. A zero vector in a pair contributes cosine similarity 0.
torch::Tensor travel_loss_from_embeddings(const torch::Tensor& source_emb,
                                          const torch::Tensor& translated_emb);

torch::Tensor travel_loss(const ForwardFn& siamese, const torch::Tensor& inputs,
                          const torch::Tensor& translated);

/// Anti-collapse hinge on embeddings: mean over unordered pairs of
/// max(0, margin - ||s_i - s_j||).
torch::Tensor siamese_margin_loss_from_embeddings(const torch::Tensor& emb, double margin);

torch::Tensor siamese_margin_loss(const ForwardFn& siamese, const torch::Tensor& inputs,
                                  double margin);

}  // namespace privtranslate
