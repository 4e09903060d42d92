#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "privtranslate/data.hpp"
#include "privtranslate/losses.hpp"
#include "privtranslate/networks.hpp"

namespace privtranslate {

enum class Framework { CycleGan, DiscoGan, TravelGan };

std::string to_string(Framework fw);
Framework framework_from_string(const std::string& s);

struct TrainConfig {
  Framework framework = Framework::TravelGan;
  int epochs = 1;
  int batch_size = 16;
  double learning_rate = 2e-4;
  double beta1 = 0.5;
  LossWeights loss_weights;
  bool use_lsgan = false;
  bool use_wgan_gp = false;
  bool use_spectral_norm = false;
  bool use_feature_matching = false;
  uint64_t seed = 0;
  int checkpoint_every = 1;  // epochs; 0 disables periodic checkpoints

  // Network capacity.
  int base_channels = 16;
  int n_down_blocks = 2;
  int n_res_blocks = 2;
  int embedding_dim = 128;

  // Stability knobs.
  int critic_steps = 5;            // D updates per G update under WGAN-GP
  double disc_lr_mult = 1.0;       // discriminator LR = learning_rate * mult
  double collapse_epsilon = 1e-3;  // detector defaults
  int collapse_window = 100;
  bool halt_on_collapse = false;

  std::filesystem::path checkpoint_dir;  // empty disables checkpointing

  void validate() const;
  uint64_t hash() const;
};

struct StepRecord {
  int64_t step = 0;  // 1-based optimization step index
  double loss_d = 0.0;
  double loss_g = 0.0;
  std::map<std::string, double> components;
};

struct TrainHistory {
  std::vector<StepRecord> steps;
  std::vector<double> epoch_seconds;
  std::optional<int64_t> collapsed_at_step;

  /// Keys seen across all step components (the loss-component registry).
  std::vector<std::string> component_names() const;
};

void write_history_jsonl(const TrainHistory& history, const std::filesystem::path& path);
TrainHistory read_history_jsonl(const std::filesystem::path& path);

/// Trained forward generator plus provenance. Dual-generator frameworks also
/// carry the reverse mapping.
struct TranslationModel {
  Generator generator{nullptr};
  std::optional<Generator> reverse_generator;
  Framework framework = Framework::TravelGan;
  std::string source_tag;
  std::string target_tag;
  uint64_t config_hash = 0;
  uint64_t seed = 0;

  uint64_t generator_param_hash() const;
};

struct TrainResult {
  TranslationModel model;
  TrainHistory history;
  // Auxiliary nets kept for diagnostics.
  std::optional<Siamese> siamese;
  std::vector<Discriminator> discriminators;
};

TrainResult train_cyclegan(const DomainDataset& source, const DomainDataset& target,
                           const TrainConfig& config);
TrainResult train_discogan(const DomainDataset& source, const DomainDataset& target,
                           const TrainConfig& config);
TrainResult train_travelgan(const DomainDataset& source, const DomainDataset& target,
                            const TrainConfig& config);

TrainResult train_gan(const DomainDataset& source, const DomainDataset& target,
                      const TrainConfig& config);

struct CollapseVerdict {
  bool collapsed = false;
  std::optional<int64_t> first_offending_step;
};

/// True iff loss_D stayed below epsilon for `window` consecutive steps;
/// reports the step that completes the first such window. Monotone under
/// appending further sub-epsilon steps.
CollapseVerdict detect_mode_collapse(const TrainHistory& history, double epsilon, int window);

void save_model(const TranslationModel& model, const std::filesystem::path& dir);
TranslationModel load_model(const std::filesystem::path& dir);

}  // namespace privtranslate
