#include "privtranslate/losses.hpp"

#include "privtranslate/errors.hpp"

#include <cmath>

namespace privtranslate {

namespace {

constexpr double kProbEps = 1e-8;

void check_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) throw ShapeError(std::string(what) + ": shape mismatch");
}

void check_finite_weight(double v, const char* name) {
  if (!std::isfinite(v) || v < 0.0) {
    throw InvalidConfigError(std::string("loss weight ") + name + " must be finite and >= 0");
  }
}

// Unordered pair index lists (i < j) for a batch of n embeddings.
std::pair<torch::Tensor, torch::Tensor> pair_indices(int64_t n) {
  if (n < 2) throw TooFewSamplesError("need at least 2 embeddings to form pairs");
  auto idx = torch::triu_indices(n, n, 1);
  return {idx[0], idx[1]};
}

}  // namespace

void LossWeights::validate() const {
  check_finite_weight(adv, "adv");
  check_finite_weight(cycle, "cycle");
  check_finite_weight(feature_match, "feature_match");
  check_finite_weight(gradient_penalty, "gradient_penalty");
  check_finite_weight(travel, "travel");
  check_finite_weight(siamese_margin, "siamese_margin");
  check_finite_weight(margin, "margin");
}

std::pair<torch::Tensor, torch::Tensor> adv_loss_minimax(const torch::Tensor& d_real,
                                                         const torch::Tensor& d_fake) {
  auto p_real = torch::sigmoid(d_real).clamp(kProbEps, 1.0 - kProbEps);
  auto p_fake = torch::sigmoid(d_fake).clamp(kProbEps, 1.0 - kProbEps);
  auto loss_d = -p_real.log().mean() - (1.0 - p_fake).log().mean();
  auto loss_g = -p_fake.log().mean();
  return {loss_d, loss_g};
}

std::pair<torch::Tensor, torch::Tensor> lsgan_loss(const torch::Tensor& d_real,
                                                   const torch::Tensor& d_fake) {
  auto loss_d = 0.5 * ((d_real - 1.0).pow(2).mean() + d_fake.pow(2).mean());
  auto loss_g = 0.5 * (d_fake - 1.0).pow(2).mean();
  return {loss_d, loss_g};
}

std::pair<torch::Tensor, torch::Tensor> wgan_loss(const torch::Tensor& d_real,
                                                  const torch::Tensor& d_fake) {
  auto loss_d = d_fake.mean() - d_real.mean();
  auto loss_g = -d_fake.mean();
  return {loss_d, loss_g};
}

torch::Tensor cycle_loss(const torch::Tensor& original, const torch::Tensor& reconstructed) {
  check_same_shape(original, reconstructed, "cycle_loss");
  return (original - reconstructed).abs().mean();
}

torch::Tensor feature_matching_loss(const std::vector<torch::Tensor>& real_feats,
                                    const std::vector<torch::Tensor>& fake_feats) {
  if (real_feats.size() != fake_feats.size()) {
    throw ShapeError("feature_matching_loss: layer count mismatch");
  }
  if (real_feats.empty()) throw ShapeError("feature_matching_loss: no layers");
  torch::Tensor total;
  for (size_t i = 0; i < real_feats.size(); ++i) {
    auto mean_real = real_feats[i].mean(0);
    auto mean_fake = fake_feats[i].mean(0);
    check_same_shape(mean_real, mean_fake, "feature_matching_loss");
    auto term = (mean_real - mean_fake).flatten().norm(2);
    total = total.defined() ? total + term : term;
  }
  return total;
}

torch::Tensor gradient_penalty(const ForwardFn& discriminator, const torch::Tensor& real,
                               const torch::Tensor& fake, double lambda_gp,
                               std::optional<torch::Tensor> eps) {
  check_same_shape(real, fake, "gradient_penalty");
  const int64_t n = real.size(0);
  torch::Tensor mix;
  if (eps.has_value()) {
    mix = eps->to(real.dtype());
  } else {
    mix = torch::rand({n}, real.options());
  }
  std::vector<int64_t> shape(real.dim(), 1);
  shape[0] = n;
  mix = mix.reshape(shape);
  auto x_hat = (mix * real.detach() + (1.0 - mix) * fake.detach()).requires_grad_(true);
  auto out = discriminator(x_hat);
  if (!out.requires_grad()) {
    throw UnsupportedModelError("gradient_penalty: discriminator output does not depend "
                                "differentiably on its input");
  }
  torch::Tensor grads;
  try {
    grads = torch::autograd::grad({out.sum()}, {x_hat}, /*grad_outputs=*/{},
                                  /*retain_graph=*/true, /*create_graph=*/true)[0];
  } catch (const c10::Error& e) {
    throw UnsupportedModelError(std::string("gradient_penalty: ") + e.what_without_backtrace());
  }
  auto norms = grads.reshape({n, -1}).norm(2, 1);
  return lambda_gp * (norms - 1.0).pow(2).mean();
}

torch::Tensor travel_loss_from_embeddings(const torch::Tensor& source_emb,
                                          const torch::Tensor& translated_emb) {
  check_same_shape(source_emb, translated_emb, "travel_loss");
  if (source_emb.dim() != 2) throw ShapeError("travel_loss: embeddings must be [N, E]");
  auto [i, j] = pair_indices(source_emb.size(0));
  auto v = source_emb.index_select(0, i) - source_emb.index_select(0, j);
  auto v_prime = translated_emb.index_select(0, i) - translated_emb.index_select(0, j);
  auto cos = torch::nn::functional::cosine_similarity(
      v, v_prime, torch::nn::functional::CosineSimilarityFuncOptions().dim(1));
  auto dist = (v - v_prime).norm(2, 1);
  return (1.0 - cos + dist).mean();
}

torch::Tensor travel_loss(const ForwardFn& siamese, const torch::Tensor& inputs,
                          const torch::Tensor& translated) {
  return travel_loss_from_embeddings(siamese(inputs), siamese(translated));
}

torch::Tensor siamese_margin_loss_from_embeddings(const torch::Tensor& emb, double margin) {
  if (emb.dim() != 2) throw ShapeError("siamese_margin_loss: embeddings must be [N, E]");
  if (!std::isfinite(margin) || margin < 0.0) {
    throw InvalidArgumentError("siamese_margin_loss: margin must be finite and >= 0");
  }
  auto [i, j] = pair_indices(emb.size(0));
  auto dist = (emb.index_select(0, i) - emb.index_select(0, j)).norm(2, 1);
  return (margin - dist).clamp_min(0.0).mean();
}

torch::Tensor siamese_margin_loss(const ForwardFn& siamese, const torch::Tensor& inputs,
                                  double margin) {
  return siamese_margin_loss_from_embeddings(siamese(inputs), margin);
}

}  // namespace privtranslate
