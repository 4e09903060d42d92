#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "privtranslate/image.hpp"

namespace privtranslate {

/// Labeled image collection from one domain. identity_ids, when present, is
/// parallel to the images.
struct DomainDataset {
  std::string domain_tag;
  ImageBatch images;
  std::optional<std::vector<int64_t>> identity_ids;
  int skipped_files = 0;  // undecodable inputs skipped during ingestion

  int64_t count() const { return images.count(); }
  void validate() const;

  std::vector<int64_t> distinct_identities() const;
  DomainDataset subset(const std::vector<int64_t>& indices) const;
};

/// Loads every decodable PNG/JPEG under `path` (lexicographic filename
/// order), resized to size x size RGB in [-1, 1]. Undecodable files are
/// skipped and counted in the result.
DomainDataset load_image_folder(const std::filesystem::path& path, int size,
                                const std::string& domain_tag);

/// Writes the dataset as img_%05d.png files plus manifest.json.
void save_dataset(const DomainDataset& dataset, const std::filesystem::path& dir,
                  int64_t seed = 0);

/// Reads a directory written by save_dataset.
DomainDataset load_dataset(const std::filesystem::path& dir);

/// Procedurally renders identity-labeled sprites. domain_tag must be
/// "faceoid" or "flowroid". The (seed, identity) pair pins a subject's
/// geometry and palette, so datasets with different seeds hold disjoint
/// cohorts. Per-image variation (pose, lighting) is indexed by copy: growing
/// per_identity appends new renders of the same subjects while keeping the
/// earlier ones bit-identical.
DomainDataset synth_identity_dataset(int n_identities, int per_identity, int size,
                                     const std::string& domain_tag, uint64_t seed);

/// Parametric augmentation. seed fully determines the output.
struct AugmentParams {
  double max_rotation_deg = 0.0;
  double hue_shift_range = 0.0;  // fraction of the full hue circle, in [0, 0.5]
  double zoom_range = 0.0;
  double background_jitter = 0.0;
  uint64_t seed = 0;

  void validate() const;
  bool is_zero() const;
};

/// Draws actually applied, indexed by output position (image i, copy c sits
/// at i * copies + c). Field streams are drawn back to back from one
/// generator: all rotations first, then hue shifts, zooms and background
/// jitter triples; each draw is uniform in [0, 1) mapped affinely onto its
/// signed parameter range.
struct AugmentTrace {
  std::vector<double> rotation_deg;
  std::vector<double> hue_shift;
  std::vector<double> zoom;
  std::vector<std::array<double, 3>> background;
};

ImageBatch augment_identity(const ImageBatch& images, const AugmentParams& params,
                            int copies, AugmentTrace* trace = nullptr);

/// k-fold assignment over a dataset.
struct FoldAssignment {
  int k = 0;
  std::vector<int> fold_index_per_image;

  std::vector<int64_t> fold_indices(int fold) const;
  std::vector<int64_t> complement_indices(int fold) const;
};

/// Deterministic k-fold split. When group_by_identity is set, whole
/// identities are assigned to folds so no identity spans two folds.
FoldAssignment split_kfold(const DomainDataset& dataset, int k, bool group_by_identity,
                           uint64_t seed);

}  // namespace privtranslate
