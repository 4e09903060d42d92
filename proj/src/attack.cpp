#include "privtranslate/attack.hpp"

#include "privtranslate/errors.hpp"
#include "privtranslate/hash.hpp"
#include "privtranslate/translate.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

namespace privtranslate {

std::string to_string(AttackMode mode) { return mode == AttackMode::Naive ? "naive" : "itn"; }

AttackMode attack_mode_from_string(const std::string& s) {
  if (s == "naive") return AttackMode::Naive;
  if (s == "itn") return AttackMode::Itn;
  throw InvalidConfigError("unknown attack mode: " + s);
}

ReconLoss recon_loss_from_string(const std::string& s) {
  if (s == "l1") return ReconLoss::L1;
  if (s == "l2") return ReconLoss::L2;
  throw InvalidConfigError("unknown reconstruction loss: " + s);
}

void AttackConfig::validate() const {
  if (epochs < 1) throw InvalidConfigError("epochs must be >= 1");
  if (batch_size < 1) throw InvalidConfigError("batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw InvalidConfigError("learning_rate must be > 0");
  if (base_channels < 1) throw InvalidConfigError("base_channels must be >= 1");
  if (n_down_blocks < 1) throw InvalidConfigError("n_down_blocks must be >= 1");
  if (n_res_blocks < 0) throw InvalidConfigError("n_res_blocks must be >= 0");
}

uint64_t AttackConfig::hash() const {
  std::ostringstream os;
  os << std::hexfloat;
  os << to_string(mode) << '|' << epochs << '|' << batch_size << '|' << learning_rate << '|' << seed
     << '|' << (reconstruction_loss == ReconLoss::L1 ? "l1" : "l2") << '|' << to_string(framework)
     << '|' << base_channels << '|' << n_down_blocks << '|' << n_res_blocks;
  return fnv1a64(os.str());
}

VictimView VictimView::from_model(const TranslationModel& model) {
  if (model.generator.is_empty()) throw Error("victim model has no generator");
  VictimView view;
  view.input_size = model.generator->spec.input_size;
  Generator gen = model.generator;  // holders share the module
  view.forward = [gen](const torch::Tensor& x) {
    torch::NoGradGuard guard;
    Generator g = gen;
    const bool was_training = g->is_training();
    g->eval();
    auto out = g->forward(x).clamp(-1.0, 1.0);
    g->train(was_training);
    return out;
  };
  view.param_hash = [gen]() { return parameter_hash(*gen); };
  return view;
}

VictimView VictimView::identity(int input_size) {
  VictimView view;
  view.input_size = input_size;
  view.forward = [](const torch::Tensor& x) { return x.clone(); };
  view.param_hash = []() { return fnv1a64("victim:identity"); };
  return view;
}

VictimView VictimView::channel_permutation(int input_size, const std::vector<int64_t>& perm) {
  std::vector<int64_t> sorted = perm;
  std::sort(sorted.begin(), sorted.end());
  if (sorted != std::vector<int64_t>{0, 1, 2}) {
    throw InvalidArgumentError("perm must be a permutation of {0, 1, 2}");
  }
  VictimView view;
  view.input_size = input_size;
  auto perm_tensor = torch::tensor(perm, torch::kLong);
  view.forward = [perm_tensor](const torch::Tensor& x) { return x.index_select(1, perm_tensor); };
  view.param_hash = [perm]() {
    uint64_t h = fnv1a64("victim:channel-permutation");
    return fnv1a64(perm.data(), perm.size() * sizeof(int64_t), h);
  };
  return view;
}

TrainResult naive_inverse_attack(const DomainDataset& target_domain_data,
                                 const DomainDataset& face_data, const AttackConfig& config) {
  config.validate();
  if (config.mode != AttackMode::Naive) throw InvalidConfigError("config.mode must be naive");
  TrainConfig train;
  train.framework = config.framework;
  train.epochs = config.epochs;
  train.batch_size = config.batch_size;
  train.learning_rate = config.learning_rate;
  train.seed = derive_seed(config.seed, "naive-attack");
  train.base_channels = config.base_channels;
  train.n_down_blocks = config.n_down_blocks;
  train.n_res_blocks = config.n_res_blocks;
  return train_gan(target_domain_data, face_data, train);
}

ImageBatch ItnResult::reconstruct(const ImageBatch& private_images) const {
  if (inverse.is_empty()) throw Error("attack has no inverse network");
  private_images.validate();
  torch::NoGradGuard guard;
  Generator inv = inverse;  // holders share the module
  const bool was_training = inv->is_training();
  inv->eval();
  std::vector<torch::Tensor> chunks;
  for (int64_t begin = 0; begin < private_images.count(); begin += 32) {
    const int64_t end = std::min<int64_t>(begin + 32, private_images.count());
    chunks.push_back(inv->forward(private_images.pixels.slice(0, begin, end)).clamp(-1.0, 1.0));
  }
  inv->train(was_training);
  return ImageBatch{torch::cat(chunks, 0)};
}

ItnResult itn_attack(const VictimView& victim, const DomainDataset& faces,
                     const AttackConfig& config) {
  config.validate();
  if (config.mode != AttackMode::Itn) throw InvalidConfigError("config.mode must be itn");
  faces.validate();
  if (faces.images.height() != victim.input_size || faces.images.width() != victim.input_size) {
    throw ShapeError("face images do not match the victim input size");
  }
  if (!victim.forward || !victim.param_hash) throw InvalidArgumentError("incomplete victim view");

  const uint64_t hash_before = victim.param_hash();

  NetworkSpec spec;
  spec.kind = NetworkKind::Generator;
  spec.input_size = victim.input_size;
  spec.base_channels = config.base_channels;
  spec.n_down_blocks = config.n_down_blocks;
  spec.n_res_blocks = config.n_res_blocks;
  // Instance norm discards per-image affine statistics, which the inverse map
  // must be able to reproduce, so the attacker's net goes without it.
  spec.use_instance_norm = false;
  spec.seed = derive_seed(config.seed, "itn-inverse");
  auto inverse = build_generator(spec);
  torch::manual_seed(derive_seed(config.seed, "itn-train"));
  // Plain regression, not adversarial training: standard Adam betas converge
  // faster here than the GAN convention of beta1 = 0.5.
  torch::optim::Adam opt(inverse->parameters(),
                         torch::optim::AdamOptions(config.learning_rate).betas({0.9, 0.999}));

  ItnResult result;
  result.inverse = inverse;

  const int64_t n = faces.count();
  std::vector<int64_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  int64_t step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 rng(derive_seed(config.seed, "itn-order", epoch));
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_sum = 0.0;
    int64_t epoch_steps = 0;
    for (int64_t begin = 0; begin < n; begin += config.batch_size) {
      ++step;
      const int64_t end = std::min<int64_t>(begin + config.batch_size, n);
      std::vector<int64_t> idx(order.begin() + begin, order.begin() + end);
      auto x = faces.images.pixels.index_select(0, torch::tensor(idx, torch::kLong));
      torch::Tensor priv;
      {
        torch::NoGradGuard guard;
        priv = victim.forward(x).detach();
      }
      auto pred = inverse->forward(priv);
      auto loss = config.reconstruction_loss == ReconLoss::L1 ? (pred - x).abs().mean()
                                                              : (pred - x).pow(2).mean();
      opt.zero_grad();
      loss.backward();
      opt.step();
      const double v = loss.item<double>();
      if (!std::isfinite(v)) throw NumericError("itn attack diverged at step " + std::to_string(step));
      epoch_sum += v;
      ++epoch_steps;
      StepRecord rec;
      rec.step = step;
      rec.loss_g = v;
      rec.components["recon"] = v;
      result.history.steps.push_back(std::move(rec));
    }
    result.epoch_train_loss.push_back(epoch_sum / static_cast<double>(epoch_steps));
    result.history.epoch_seconds.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }

  if (victim.param_hash() != hash_before) {
    throw FrozenViolationError("victim parameters changed during the attack");
  }
  return result;
}

ItnResult itn_attack(const TranslationModel& frozen_victim, const DomainDataset& faces,
                     const AttackConfig& config) {
  return itn_attack(VictimView::from_model(frozen_victim), faces, config);
}

ReconstructionMetrics reconstruction_metrics(const ImageBatch& originals,
                                             const ImageBatch& reconstructed) {
  originals.validate();
  reconstructed.validate();
  if (originals.pixels.sizes() != reconstructed.pixels.sizes()) {
    throw ShapeError("reconstruction_metrics: shape mismatch");
  }
  torch::NoGradGuard guard;
  auto a = originals.pixels.to(torch::kDouble);
  auto b = reconstructed.pixels.to(torch::kDouble);
  auto per_mse = (a - b).pow(2).mean({1, 2, 3});
  auto per_ssim = ssim(originals.pixels, reconstructed.pixels).to(torch::kDouble);

  ReconstructionMetrics m;
  for (int64_t i = 0; i < per_mse.size(0); ++i) {
    m.per_image_mse.push_back(per_mse[i].item<double>());
    m.per_image_ssim.push_back(per_ssim[i].item<double>());
  }
  m.mse = per_mse.mean().item<double>();
  m.ssim = per_ssim.mean().item<double>();
  return m;
}

ReidResult reidentification_rate(const ImageBatch& reconstructed, const DomainDataset& gallery,
                                 const std::vector<int64_t>& true_ids,
                                 const BackboneModel& matcher) {
  reconstructed.validate();
  gallery.validate();
  if (gallery.count() < 1) throw EmptyGalleryError("gallery is empty");
  if (!gallery.identity_ids.has_value()) {
    throw InvalidArgumentError("gallery needs identity labels");
  }
  if (static_cast<int64_t>(true_ids.size()) != reconstructed.count()) {
    throw InvalidArgumentError("true_ids size does not match reconstructions");
  }

  const auto& gallery_ids = *gallery.identity_ids;
  const auto distinct = gallery.distinct_identities();

  auto normalize = [](const torch::Tensor& t) {
    return torch::nn::functional::normalize(t, torch::nn::functional::NormalizeFuncOptions().dim(1));
  };
  auto feats_r = normalize(matcher.features(reconstructed));
  auto feats_g = normalize(matcher.features(gallery.images));
  auto sims = feats_r.matmul(feats_g.t());
  auto nearest = sims.argmax(1);

  ReidResult result;
  result.degenerate_gallery = distinct.size() < 2;
  int64_t hits = 0;
  for (int64_t i = 0; i < nearest.size(0); ++i) {
    const int64_t predicted = gallery_ids[static_cast<size_t>(nearest[i].item<int64_t>())];
    result.predicted_ids.push_back(predicted);
    hits += (predicted == true_ids[static_cast<size_t>(i)]) ? 1 : 0;
  }
  result.rate = static_cast<double>(hits) / static_cast<double>(reconstructed.count());
  return result;
}

ReconstructionMetrics dual_reverse_probe(const TranslationModel& model, const ImageBatch& faces) {
  if (!model.reverse_generator.has_value()) {
    throw NoReverseGeneratorError("model framework " + to_string(model.framework) +
                                  " has a single generator");
  }
  faces.validate();
  auto forward = translate(model, faces);
  TranslationModel reverse;
  reverse.generator = *model.reverse_generator;
  reverse.framework = model.framework;
  reverse.seed = model.seed;
  auto back = translate(reverse, forward);
  return reconstruction_metrics(faces, back);
}

void write_attack_report_json(const AttackReport& report, const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  j["mode"] = to_string(report.mode);
  j["config_hash"] = hash_hex(report.config_hash);
  j["reconstruction"]["mse"] = report.reconstruction.mse;
  j["reconstruction"]["ssim"] = report.reconstruction.ssim;
  j["reconstruction"]["per_image_mse"] = report.reconstruction.per_image_mse;
  j["reconstruction"]["per_image_ssim"] = report.reconstruction.per_image_ssim;
  j["reidentification"] = report.reidentification;
  j["chance_rate"] = report.chance_rate;
  j["predicted_ids"] = report.predicted_ids;
  j["degenerate_gallery"] = report.degenerate_gallery;

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  os << j.dump(2) << "\n";
}

void save_reconstruction_grid(const ImageBatch& originals, const ImageBatch& reconstructed,
                              const std::filesystem::path& path, int max_pairs) {
  originals.validate();
  reconstructed.validate();
  if (originals.pixels.sizes() != reconstructed.pixels.sizes()) {
    throw ShapeError("save_reconstruction_grid: shape mismatch");
  }
  if (max_pairs < 1) throw InvalidArgumentError("max_pairs must be >= 1");
  const int64_t n = std::min<int64_t>(max_pairs, originals.count());
  std::vector<torch::Tensor> rows;
  for (int64_t i = 0; i < n; ++i) {
    rows.push_back(originals.pixels[i].unsqueeze(0));
    rows.push_back(reconstructed.pixels[i].unsqueeze(0));
  }
  save_grid_png(ImageBatch{torch::cat(rows, 0)}, /*cols=*/2, path);
}

}  // namespace privtranslate
