#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "privtranslate/authclass.hpp"
#include "privtranslate/data.hpp"
#include "privtranslate/trainers.hpp"

namespace privtranslate {

enum class AttackMode { Naive, Itn };
enum class ReconLoss { L1, L2 };

std::string to_string(AttackMode mode);
AttackMode attack_mode_from_string(const std::string& s);
ReconLoss recon_loss_from_string(const std::string& s);

struct AttackConfig {
  AttackMode mode = AttackMode::Itn;
  int epochs = 10;
  int batch_size = 16;
  double learning_rate = 2e-4;
  uint64_t seed = 0;
  ReconLoss reconstruction_loss = ReconLoss::L1;
  Framework framework = Framework::TravelGan;  // naive attack's GAN family
  int base_channels = 16;
  int n_down_blocks = 2;
  int n_res_blocks = 2;

  void validate() const;
  uint64_t hash() const;
};

/// The attacker's view of a frozen victim generator: a forward function plus
/// a parameter hash used to assert the victim is never mutated.
struct VictimView {
  std::function<torch::Tensor(const torch::Tensor&)> forward;
  std::function<uint64_t()> param_hash;
  int input_size = 64;

  static VictimView from_model(const TranslationModel& model);
  static VictimView identity(int input_size);
  static VictimView channel_permutation(int input_size, const std::vector<int64_t>& perm);
};

/// Trains a fresh unpaired GAN from the private domain back to faces with no
/// access to the victim. Returns the attacker's translation model.
TrainResult naive_inverse_attack(const DomainDataset& target_domain_data,
                                 const DomainDataset& face_data, const AttackConfig& config);

struct ItnResult {
  Generator inverse{nullptr};
  TrainHistory history;
  std::vector<double> epoch_train_loss;

  ImageBatch reconstruct(const ImageBatch& private_images) const;
};

/// Inverse-transformation-network attack: pairs (G(x), x) are generated on
/// the fly through the frozen victim and an inverse net is fit to them. The
/// victim hash is checked before and after; a change raises FrozenViolation.
ItnResult itn_attack(const VictimView& victim, const DomainDataset& faces,
                     const AttackConfig& config);
ItnResult itn_attack(const TranslationModel& frozen_victim, const DomainDataset& faces,
                     const AttackConfig& config);

struct ReconstructionMetrics {
  double mse = 0.0;   // mean over images
  double ssim = 0.0;  // mean over images, in [-1, 1]
  std::vector<double> per_image_mse;
  std::vector<double> per_image_ssim;
};

ReconstructionMetrics reconstruction_metrics(const ImageBatch& originals,
                                             const ImageBatch& reconstructed);

struct ReidResult {
  double rate = 0.0;
  std::vector<int64_t> predicted_ids;
  bool degenerate_gallery = false;  // single-identity gallery
};

/// Nearest gallery identity by backbone-feature cosine similarity; rate is
/// the fraction of reconstructions matched to their true identity.
ReidResult reidentification_rate(const ImageBatch& reconstructed, const DomainDataset& gallery,
                                 const std::vector<int64_t>& true_ids,
                                 const BackboneModel& matcher);

/// Round-trip reverse(forward(x)) quality for dual-generator models; throws
/// NoReverseGenerator for single-generator frameworks.
ReconstructionMetrics dual_reverse_probe(const TranslationModel& model, const ImageBatch& faces);

struct AttackReport {
  AttackMode mode = AttackMode::Itn;
  uint64_t config_hash = 0;
  ReconstructionMetrics reconstruction;
  double reidentification = 0.0;
  double chance_rate = 0.0;
  std::vector<int64_t> predicted_ids;
  bool degenerate_gallery = false;
};

void write_attack_report_json(const AttackReport& report, const std::filesystem::path& path);

/// (original, reconstructed) pairs tiled side by side.
void save_reconstruction_grid(const ImageBatch& originals, const ImageBatch& reconstructed,
                              const std::filesystem::path& path, int max_pairs = 8);

}  // namespace privtranslate
