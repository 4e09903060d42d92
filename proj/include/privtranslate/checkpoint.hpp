#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

namespace privtranslate {

/// Ordered collection of named float tensors. Names must be unique.
using NamedTensors = std::vector<std::pair<std::string, torch::Tensor>>;

NamedTensors named_state(const torch::nn::Module& module, const std::string& prefix = "");

uint64_t tensors_hash(const NamedTensors& tensors);

/// Writes meta.json plus one little-endian float32 blob per tensor. `extra`
/// is merged into meta.json (framework tag, domains, spec, seed, ...).
void save_named_tensors(const NamedTensors& tensors, const std::filesystem::path& dir,
                        const nlohmann::ordered_json& extra = {});

struct LoadedCheckpoint {
  NamedTensors tensors;
  nlohmann::ordered_json meta;
};

/// Reads a checkpoint directory and verifies every blob hash; any mismatch
/// throws CorruptCheckpoint.
LoadedCheckpoint load_named_tensors(const std::filesystem::path& dir);

/// Loads tensors into a module by name (values copied; shapes must match).
void load_state_into(torch::nn::Module& module, const NamedTensors& tensors,
                     const std::string& prefix = "");

/// Maintains per-matrix power-iteration state; each apply() call refines the
/// top-singular-value estimates and rescales every weight matrix (dim >= 2)
/// to unit spectral norm. Not thread-safe.
class SpectralNormalizer {
 public:
  NamedTensors apply(const NamedTensors& parameters, int n_power_iterations);

  /// Latest sigma estimate per tensor name (empty before first apply).
  const std::vector<std::pair<std::string, double>>& last_sigmas() const { return sigmas_; }

 private:
  std::unordered_map<std::string, torch::Tensor> u_;
  std::vector<std::pair<std::string, double>> sigmas_;
};

}  // namespace privtranslate
