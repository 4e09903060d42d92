#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "privtranslate/data.hpp"
#include "privtranslate/trainers.hpp"

namespace privtranslate {

enum class BackboneMode { Frozen, Trainable };

std::string to_string(BackboneMode mode);
BackboneMode backbone_mode_from_string(const std::string& s);

struct ClassifierConfig {
  BackboneMode backbone_mode = BackboneMode::Frozen;
  int epochs = 15;
  double threshold = 0.7;
  double learning_rate = 1e-3;
  uint64_t seed = 0;
  int negatives_per_positive = 4;  // per-epoch subsample ratio from the pool

  void validate() const;
};

/// Small convolutional feature extractor; conv stack + pooled embedding.
struct BackboneImpl : torch::nn::Module {
  BackboneImpl(int input_size, int base_channels, int n_down_blocks, int embedding_dim);
  torch::Tensor forward(const torch::Tensor& x);

  int input_size, base_channels, n_down_blocks, embedding_dim;
  torch::nn::Sequential body{nullptr};
  torch::nn::Linear head{nullptr};
};
TORCH_MODULE(Backbone);

struct BackboneModel {
  Backbone net{nullptr};
  std::string pretrain_task;
  uint64_t seed = 0;

  torch::Tensor features(const ImageBatch& images) const;  // no-grad, eval mode
  uint64_t param_hash() const;
};

struct BackbonePretrainConfig {
  int epochs = 10;
  int batch_size = 32;
  double learning_rate = 1e-3;
  int base_channels = 16;
  int n_down_blocks = 3;
  int embedding_dim = 64;
};

/// Trains the extractor on an auxiliary classification task (identity ids as
/// classes) and discards the classification head.
BackboneModel pretrain_backbone(const DomainDataset& aux_dataset, uint64_t seed,
                                const BackbonePretrainConfig& config = {});

/// One per-identity authenticator: sigmoid head over backbone features; the
/// backbone is finetuned only in trainable mode.
struct ClassifierModel {
  Backbone backbone{nullptr};  // shared (frozen) or private finetuned copy
  torch::nn::Linear head{nullptr};
  BackboneMode mode = BackboneMode::Frozen;
  double threshold = 0.7;

  double probability(const torch::Tensor& image_chw) const;
  torch::Tensor probabilities(const ImageBatch& images) const;
};

ClassifierModel train_binary(const BackboneModel& backbone, const ImageBatch& positives,
                             const ImageBatch& negatives, const ClassifierConfig& config);

struct Decision {
  bool accept = false;
  double probability = 0.0;
};

/// accept iff probability >= threshold.
Decision decide(const ClassifierModel& classifier, const torch::Tensor& image_chw);

struct Metrics {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Confusion-matrix metrics over (predicted, actual) pairs. Zero-denominator
/// precision/recall/F1 are 0.
Metrics compute_metrics(const std::vector<std::pair<bool, bool>>& decisions);

struct MetricsReport {
  // identity -> per-fold metrics
  std::map<int64_t, std::vector<Metrics>> per_identity;
  std::map<int64_t, Metrics> per_identity_mean;
  Metrics average;  // mean of per-identity means
  std::vector<int64_t> skipped_identities;
  std::string label;

  void finalize();  // fills per_identity_mean and average
};

MetricsReport crossval_experiment(const BackboneModel& backbone, const DomainDataset& identities,
                                  const ImageBatch& negative_pool, int k,
                                  const ClassifierConfig& config, int jobs = 1);

/// faces-minus-translated difference of an averaged metric (absolute value).
double performance_drop(const MetricsReport& faces, const MetricsReport& translated,
                        const std::string& metric);

/// Table of reference scores from the original large-scale experiment, keyed
/// as {frozen,trainable} x {faces, translated}. Kept for reporting context
/// only; not a desk-scale target.
std::map<std::string, Metrics> paper_reference_metrics();

void write_metrics_report_json(const MetricsReport& report, const std::filesystem::path& path);
void write_per_identity_csv(const std::vector<const MetricsReport*>& reports,
                            const std::filesystem::path& path);

struct EnrollOptions {
  AugmentParams augment;
  int copies = 4;
};

/// Fig-1 facade: augment -> translate -> train_binary. The negative pool is
/// given in the face domain and translated internally.
ClassifierModel enroll(const ImageBatch& user_images, const TranslationModel& model,
                       const BackboneModel& backbone, const ImageBatch& negative_pool_faces,
                       const ClassifierConfig& config, const EnrollOptions& options = {});

/// translate -> decide.
Decision authenticate(const torch::Tensor& image_chw, const TranslationModel& model,
                      const ClassifierModel& classifier);

}  // namespace privtranslate
