#include "privtranslate/checkpoint.hpp"

#include "privtranslate/errors.hpp"
#include "privtranslate/hash.hpp"

#include <bit>
#include <fstream>

namespace privtranslate {

namespace {

constexpr const char* kMetaFile = "meta.json";

void require_little_endian() {
  if constexpr (std::endian::native != std::endian::little) {
    throw Error("checkpoint format requires a little-endian host");
  }
}

torch::Tensor to_blob_tensor(const torch::Tensor& t) {
  return t.detach().cpu().to(torch::kFloat32).contiguous();
}

}  // namespace

NamedTensors named_state(const torch::nn::Module& module, const std::string& prefix) {
  NamedTensors out;
  for (const auto& p : module.named_parameters(/*recurse=*/true)) {
    out.emplace_back(prefix + p.key(), p.value().detach());
  }
  for (const auto& b : module.named_buffers(/*recurse=*/true)) {
    out.emplace_back(prefix + b.key(), b.value().detach());
  }
  return out;
}

uint64_t tensors_hash(const NamedTensors& tensors) {
  uint64_t h = kFnvOffset;
  for (const auto& [name, tensor] : tensors) {
    h = fnv1a64(name, h);
    auto blob = to_blob_tensor(tensor);
    h = fnv1a64(blob.data_ptr(), blob.numel() * blob.element_size(), h);
  }
  return h;
}

void save_named_tensors(const NamedTensors& tensors, const std::filesystem::path& dir,
                        const nlohmann::ordered_json& extra) {
  require_little_endian();
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json meta;
  meta["format"] = "privtranslate-checkpoint";
  meta["version"] = 1;
  meta["dtype"] = "float32";
  meta["byte_order"] = "little";
  auto entries = nlohmann::ordered_json::array();
  for (size_t i = 0; i < tensors.size(); ++i) {
    const auto& [name, tensor] = tensors[i];
    auto blob = to_blob_tensor(tensor);
    const size_t n_bytes = static_cast<size_t>(blob.numel()) * blob.element_size();
    char file[32];
    std::snprintf(file, sizeof(file), "t_%05zu.bin", i);
    std::ofstream os(dir / file, std::ios::binary);
    if (!os) throw Error("cannot write " + (dir / file).string());
    os.write(static_cast<const char*>(blob.data_ptr()), static_cast<std::streamsize>(n_bytes));
    if (!os) throw Error("short write to " + (dir / file).string());

    nlohmann::ordered_json e;
    e["name"] = name;
    e["shape"] = std::vector<int64_t>(tensor.sizes().begin(), tensor.sizes().end());
    e["file"] = file;
    e["hash"] = hash_hex(fnv1a64(blob.data_ptr(), n_bytes));
    entries.push_back(std::move(e));
  }
  meta["tensors"] = std::move(entries);
  for (const auto& [key, value] : extra.items()) meta[key] = value;

  std::ofstream os(dir / kMetaFile);
  if (!os) throw Error("cannot write " + (dir / kMetaFile).string());
  os << meta.dump(2) << "\n";
}

LoadedCheckpoint load_named_tensors(const std::filesystem::path& dir) {
  require_little_endian();
  std::ifstream is(dir / kMetaFile);
  if (!is) throw CorruptCheckpointError("missing " + (dir / kMetaFile).string());
  nlohmann::ordered_json meta;
  try {
    is >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw CorruptCheckpointError("unreadable meta.json: " + std::string(e.what()));
  }
  if (!meta.contains("tensors") || !meta["tensors"].is_array()) {
    throw CorruptCheckpointError("meta.json has no tensor list");
  }

  LoadedCheckpoint loaded;
  loaded.meta = meta;
  for (const auto& e : meta["tensors"]) {
    const std::string name = e.at("name").get<std::string>();
    const std::string file = e.at("file").get<std::string>();
    const auto shape = e.at("shape").get<std::vector<int64_t>>();
    int64_t numel = 1;
    for (int64_t d : shape) numel *= d;

    std::ifstream bs(dir / file, std::ios::binary);
    if (!bs) throw CorruptCheckpointError("missing blob " + (dir / file).string());
    std::vector<char> bytes((std::istreambuf_iterator<char>(bs)), std::istreambuf_iterator<char>());
    if (bytes.size() != static_cast<size_t>(numel) * sizeof(float)) {
      throw CorruptCheckpointError("blob size mismatch for " + name);
    }
    if (hash_hex(fnv1a64(bytes.data(), bytes.size())) != e.at("hash").get<std::string>()) {
      throw CorruptCheckpointError("hash mismatch for " + name);
    }
    auto t = torch::from_blob(bytes.data(), shape, torch::kFloat32).clone();
    loaded.tensors.emplace_back(name, std::move(t));
  }
  return loaded;
}

void load_state_into(torch::nn::Module& module, const NamedTensors& tensors,
                     const std::string& prefix) {
  torch::NoGradGuard guard;
  std::unordered_map<std::string, const torch::Tensor*> by_name;
  for (const auto& [name, tensor] : tensors) by_name[name] = &tensor;

  auto copy_all = [&](const torch::OrderedDict<std::string, torch::Tensor>& dst) {
    for (const auto& item : dst) {
      auto it = by_name.find(prefix + item.key());
      if (it == by_name.end()) {
        throw CorruptCheckpointError("checkpoint lacks tensor " + prefix + item.key());
      }
      if (it->second->sizes() != item.value().sizes()) {
        throw ShapeError("checkpoint shape mismatch for " + prefix + item.key());
      }
      item.value().copy_(it->second->to(item.value().dtype()));
    }
  };
  copy_all(module.named_parameters(/*recurse=*/true));
  copy_all(module.named_buffers(/*recurse=*/true));
}

NamedTensors SpectralNormalizer::apply(const NamedTensors& parameters, int n_power_iterations) {
  if (n_power_iterations < 1) throw InvalidArgumentError("n_power_iterations must be >= 1");
  torch::NoGradGuard guard;
  namespace F = torch::nn::functional;
  NamedTensors out;
  sigmas_.clear();
  for (const auto& [name, tensor] : parameters) {
    if (tensor.dim() < 2) {
      out.emplace_back(name, tensor);
      continue;
    }
    auto w2d = tensor.detach().to(torch::kFloat32).reshape({tensor.size(0), -1});
    auto it = u_.find(name);
    if (it == u_.end() || it->second.numel() != w2d.size(0)) {
      auto u0 = F::normalize(torch::randn({w2d.size(0)}), F::NormalizeFuncOptions().dim(0));
      it = u_.insert_or_assign(name, u0).first;
    }
    auto u = it->second;
    torch::Tensor v;
    for (int i = 0; i < n_power_iterations; ++i) {
      v = F::normalize(w2d.t().mv(u), F::NormalizeFuncOptions().dim(0));
      u = F::normalize(w2d.mv(v), F::NormalizeFuncOptions().dim(0));
    }
    it->second = u;
    const double sigma = torch::dot(u, w2d.mv(v)).item<double>();
    sigmas_.emplace_back(name, sigma);
    out.emplace_back(name, tensor / sigma);
  }
  return out;
}

}  // namespace privtranslate
