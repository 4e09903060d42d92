#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <vector>

namespace privtranslate {

enum class NetworkKind { Generator, Discriminator, Siamese };

std::string to_string(NetworkKind kind);
NetworkKind network_kind_from_string(const std::string& s);

struct NetworkSpec {
  NetworkKind kind = NetworkKind::Generator;
  int input_size = 64;
  int base_channels = 16;
  int n_down_blocks = 2;
  int n_res_blocks = 2;       // generator bottleneck depth
  int embedding_dim = 128;    // siamese output length
  bool use_spectral_norm = false;
  bool use_instance_norm = true;  // generators only; inverse nets opt out so
                                  // they can represent affine / identity maps
  uint64_t seed = 0;

  void validate() const;
};

/// Conv2d whose weight is divided by a power-iteration estimate of its top
/// singular value on every forward. The left singular vector estimate is a
/// persistent buffer, so the estimate sharpens over successive calls.
struct SNConv2dImpl : torch::nn::Module {
  SNConv2dImpl(int64_t in_ch, int64_t out_ch, int64_t kernel, int64_t stride,
               int64_t padding, int n_power_iterations = 1);

  torch::Tensor forward(const torch::Tensor& x);

  torch::Tensor weight, bias, u;
  int64_t stride_, padding_;
  int n_power_iterations_;
};
TORCH_MODULE(SNConv2d);

/// Encoder / residual-bottleneck / decoder generator with tanh output, so the
/// output shape and [-1, 1] range always match the input contract.
struct GeneratorImpl : torch::nn::Module {
  explicit GeneratorImpl(const NetworkSpec& spec);
  torch::Tensor forward(const torch::Tensor& x);

  NetworkSpec spec;
  torch::nn::Sequential body{nullptr};
};
TORCH_MODULE(Generator);

/// Patch discriminator: outputs one realness score map [N, 1, h, w].
struct DiscriminatorImpl : torch::nn::Module {
  explicit DiscriminatorImpl(const NetworkSpec& spec);
  torch::Tensor forward(const torch::Tensor& x);
  /// Score plus per-block activations (for feature matching).
  std::pair<torch::Tensor, std::vector<torch::Tensor>> forward_features(const torch::Tensor& x);

  NetworkSpec spec;
  std::vector<torch::nn::Sequential> blocks;
};
TORCH_MODULE(Discriminator);

/// Convolutional embedder with global average pooling; output [N, embedding_dim].
struct SiameseImpl : torch::nn::Module {
  explicit SiameseImpl(const NetworkSpec& spec);
  torch::Tensor forward(const torch::Tensor& x);

  NetworkSpec spec;
  torch::nn::Sequential body{nullptr};
  torch::nn::Linear head{nullptr};
};
TORCH_MODULE(Siamese);

/// Seeded constructors. The same spec (seed included) always yields
/// bit-identical initial parameters. Reseeds the global torch RNG.
Generator build_generator(NetworkSpec spec);
Discriminator build_discriminator(NetworkSpec spec);
Siamese build_siamese(NetworkSpec spec);

/// FNV-1a over the raw bytes of all parameters and buffers, in registration
/// order.
uint64_t parameter_hash(const torch::nn::Module& module);

/// Copies parameters and buffers by name; throws ShapeError on mismatch.
void copy_module_state(const torch::nn::Module& src, torch::nn::Module& dst);

}  // namespace privtranslate
