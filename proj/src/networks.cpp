#include "privtranslate/networks.hpp"

#include "privtranslate/errors.hpp"
#include "privtranslate/hash.hpp"

namespace privtranslate {

namespace F = torch::nn::functional;

std::string to_string(NetworkKind kind) {
  switch (kind) {
    case NetworkKind::Generator: return "generator";
    case NetworkKind::Discriminator: return "discriminator";
    case NetworkKind::Siamese: return "siamese";
  }
  return "generator";
}

NetworkKind network_kind_from_string(const std::string& s) {
  if (s == "generator") return NetworkKind::Generator;
  if (s == "discriminator") return NetworkKind::Discriminator;
  if (s == "siamese") return NetworkKind::Siamese;
  throw InvalidSpecError("unknown network kind: " + s);
}

void NetworkSpec::validate() const {
  if (base_channels < 1) throw InvalidSpecError("base_channels must be >= 1");
  if (n_down_blocks < 1) throw InvalidSpecError("n_down_blocks must be >= 1");
  if (n_res_blocks < 0) throw InvalidSpecError("n_res_blocks must be >= 0");
  if (embedding_dim < 1) throw InvalidSpecError("embedding_dim must be >= 1");
  if (input_size < 1 || input_size % (1 << n_down_blocks) != 0) {
    throw InvalidSpecError("input_size must be divisible by 2^n_down_blocks");
  }
}

SNConv2dImpl::SNConv2dImpl(int64_t in_ch, int64_t out_ch, int64_t kernel, int64_t stride,
                           int64_t padding, int n_power_iterations)
    : stride_(stride), padding_(padding), n_power_iterations_(n_power_iterations) {
  weight = register_parameter("weight", torch::empty({out_ch, in_ch, kernel, kernel}));
  bias = register_parameter("bias", torch::empty({out_ch}));
  torch::nn::init::kaiming_uniform_(weight, std::sqrt(5.0));
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_ch * kernel * kernel));
  torch::nn::init::uniform_(bias, -bound, bound);
  u = register_buffer("u", torch::nn::functional::normalize(
                               torch::randn({out_ch}), F::NormalizeFuncOptions().dim(0)));
}

torch::Tensor SNConv2dImpl::forward(const torch::Tensor& x) {
  auto w2d = weight.view({weight.size(0), -1});
  torch::Tensor v;
  {
    torch::NoGradGuard guard;
    auto u_hat = u;
    for (int i = 0; i < n_power_iterations_; ++i) {
      v = F::normalize(w2d.t().mv(u_hat), F::NormalizeFuncOptions().dim(0));
      u_hat = F::normalize(w2d.mv(v), F::NormalizeFuncOptions().dim(0));
    }
    if (is_training()) u.copy_(u_hat);
    v = v.detach();
  }
  auto sigma = torch::dot(u, w2d.mv(v));
  auto w_sn = weight / sigma;
  return F::conv2d(x, w_sn, F::Conv2dFuncOptions().bias(bias).stride(stride_).padding(padding_));
}

namespace {

struct ResidualBlockImpl : torch::nn::Module {
  explicit ResidualBlockImpl(int64_t channels, bool use_norm = true) {
    torch::nn::Sequential seq;
    seq->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 3).padding(1)));
    if (use_norm) seq->push_back(torch::nn::InstanceNorm2d(channels));
    seq->push_back(torch::nn::ReLU());
    seq->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 3).padding(1)));
    if (use_norm) seq->push_back(torch::nn::InstanceNorm2d(channels));
    body = register_module("body", seq);
  }
  torch::Tensor forward(const torch::Tensor& x) { return x + body->forward(x); }
  torch::nn::Sequential body{nullptr};
};
TORCH_MODULE(ResidualBlock);

void push_conv(torch::nn::Sequential& seq, const NetworkSpec& spec, int64_t in_ch, int64_t out_ch,
               int64_t kernel, int64_t stride, int64_t padding) {
  if (spec.use_spectral_norm) {
    seq->push_back(SNConv2d(in_ch, out_ch, kernel, stride, padding));
  } else {
    seq->push_back(torch::nn::Conv2d(
        torch::nn::Conv2dOptions(in_ch, out_ch, kernel).stride(stride).padding(padding)));
  }
}

}  // namespace

GeneratorImpl::GeneratorImpl(const NetworkSpec& s) : spec(s) {
  spec.validate();
  torch::nn::Sequential seq;
  const int64_t c = spec.base_channels;
  push_conv(seq, spec, 3, c, 7, 1, 3);
  if (spec.use_instance_norm) seq->push_back(torch::nn::InstanceNorm2d(c));
  seq->push_back(torch::nn::ReLU());
  int64_t ch = c;
  for (int i = 0; i < spec.n_down_blocks; ++i) {
    push_conv(seq, spec, ch, ch * 2, 3, 2, 1);
    if (spec.use_instance_norm) seq->push_back(torch::nn::InstanceNorm2d(ch * 2));
    seq->push_back(torch::nn::ReLU());
    ch *= 2;
  }
  for (int i = 0; i < spec.n_res_blocks; ++i) {
    seq->push_back(ResidualBlock(ch, spec.use_instance_norm));
  }
  for (int i = 0; i < spec.n_down_blocks; ++i) {
    seq->push_back(torch::nn::Upsample(
        torch::nn::UpsampleOptions().scale_factor(std::vector<double>{2, 2}).mode(torch::kNearest)));
    push_conv(seq, spec, ch, ch / 2, 3, 1, 1);
    if (spec.use_instance_norm) seq->push_back(torch::nn::InstanceNorm2d(ch / 2));
    seq->push_back(torch::nn::ReLU());
    ch /= 2;
  }
  push_conv(seq, spec, ch, 3, 7, 1, 3);
  seq->push_back(torch::nn::Tanh());
  body = register_module("body", seq);
}

torch::Tensor GeneratorImpl::forward(const torch::Tensor& x) { return body->forward(x); }

DiscriminatorImpl::DiscriminatorImpl(const NetworkSpec& s) : spec(s) {
  spec.validate();
  int64_t ch = spec.base_channels;
  {
    torch::nn::Sequential b;
    push_conv(b, spec, 3, ch, 4, 2, 1);
    b->push_back(torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)));
    blocks.push_back(register_module("block0", b));
  }
  for (int i = 1; i < spec.n_down_blocks; ++i) {
    torch::nn::Sequential b;
    push_conv(b, spec, ch, ch * 2, 4, 2, 1);
    b->push_back(torch::nn::InstanceNorm2d(ch * 2));
    b->push_back(torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)));
    blocks.push_back(register_module("block" + std::to_string(i), b));
    ch *= 2;
  }
  {
    torch::nn::Sequential b;
    push_conv(b, spec, ch, 1, 4, 1, 1);
    blocks.push_back(register_module("head", b));
  }
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& x) {
  auto h = x;
  for (auto& b : blocks) h = b->forward(h);
  return h;
}

std::pair<torch::Tensor, std::vector<torch::Tensor>> DiscriminatorImpl::forward_features(
    const torch::Tensor& x) {
  std::vector<torch::Tensor> feats;
  auto h = x;
  for (size_t i = 0; i + 1 < blocks.size(); ++i) {
    h = blocks[i]->forward(h);
    feats.push_back(h);
  }
  return {blocks.back()->forward(h), feats};
}

SiameseImpl::SiameseImpl(const NetworkSpec& s) : spec(s) {
  spec.validate();
  torch::nn::Sequential seq;
  int64_t ch = spec.base_channels;
  push_conv(seq, spec, 3, ch, 4, 2, 1);
  seq->push_back(torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)));
  for (int i = 1; i < spec.n_down_blocks; ++i) {
    push_conv(seq, spec, ch, ch * 2, 4, 2, 1);
    seq->push_back(torch::nn::InstanceNorm2d(ch * 2));
    seq->push_back(torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)));
    ch *= 2;
  }
  seq->push_back(torch::nn::AdaptiveAvgPool2d(torch::nn::AdaptiveAvgPool2dOptions(1)));
  seq->push_back(torch::nn::Flatten());
  body = register_module("body", seq);
  head = register_module("head", torch::nn::Linear(ch, spec.embedding_dim));
}

torch::Tensor SiameseImpl::forward(const torch::Tensor& x) {
  return head->forward(body->forward(x));
}

Generator build_generator(NetworkSpec spec) {
  spec.kind = NetworkKind::Generator;
  spec.validate();
  torch::manual_seed(spec.seed);
  return Generator(spec);
}

Discriminator build_discriminator(NetworkSpec spec) {
  spec.kind = NetworkKind::Discriminator;
  spec.validate();
  torch::manual_seed(spec.seed);
  return Discriminator(spec);
}

Siamese build_siamese(NetworkSpec spec) {
  spec.kind = NetworkKind::Siamese;
  spec.validate();
  torch::manual_seed(spec.seed);
  return Siamese(spec);
}

uint64_t parameter_hash(const torch::nn::Module& module) {
  uint64_t h = kFnvOffset;
  auto hash_tensor = [&h](const std::string& name, const torch::Tensor& t) {
    h = fnv1a64(name, h);
    auto c = t.contiguous();
    h = fnv1a64(c.data_ptr(), c.numel() * c.element_size(), h);
  };
  for (const auto& p : module.named_parameters(/*recurse=*/true)) {
    hash_tensor(p.key(), p.value());
  }
  for (const auto& b : module.named_buffers(/*recurse=*/true)) {
    hash_tensor(b.key(), b.value());
  }
  return h;
}

void copy_module_state(const torch::nn::Module& src, torch::nn::Module& dst) {
  torch::NoGradGuard guard;
  auto src_params = src.named_parameters(true);
  auto dst_params = dst.named_parameters(true);
  if (src_params.size() != dst_params.size()) {
    throw ShapeError("module parameter sets differ");
  }
  for (const auto& p : src_params) {
    auto* d = dst_params.find(p.key());
    if (d == nullptr || d->sizes() != p.value().sizes()) {
      throw ShapeError("parameter mismatch at " + p.key());
    }
    d->copy_(p.value());
  }
  auto src_buffers = src.named_buffers(true);
  auto dst_buffers = dst.named_buffers(true);
  for (const auto& b : src_buffers) {
    auto* d = dst_buffers.find(b.key());
    if (d == nullptr || d->sizes() != b.value().sizes()) {
      throw ShapeError("buffer mismatch at " + b.key());
    }
    d->copy_(b.value());
  }
}

}  // namespace privtranslate
