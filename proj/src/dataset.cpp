#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <unordered_map>

#include <json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "privtranslate/data.hpp"
#include "privtranslate/errors.hpp"

namespace privtranslate {

namespace fs = std::filesystem;

void DomainDataset::validate() const {
  if (images.count() > 0) ImageBatch::validate(images.pixels);
  if (identity_ids) {
    if (static_cast<int64_t>(identity_ids->size()) != images.count()) {
      throw InvalidArgumentError("identity_ids length must equal the image count");
    }
    for (auto id : *identity_ids) {
      if (id < 0) throw InvalidArgumentError("identity_ids must be non-negative");
    }
  }
}

std::vector<int64_t> DomainDataset::distinct_identities() const {
  if (!identity_ids) return {};
  std::set<int64_t> s(identity_ids->begin(), identity_ids->end());
  return {s.begin(), s.end()};
}

DomainDataset DomainDataset::subset(const std::vector<int64_t>& indices) const {
  DomainDataset out;
  out.domain_tag = domain_tag;
  out.images = images.slice(indices);
  if (identity_ids) {
    std::vector<int64_t> ids;
    ids.reserve(indices.size());
    for (auto i : indices) ids.push_back((*identity_ids)[i]);
    out.identity_ids = std::move(ids);
  }
  return out;
}

namespace {

bool has_image_extension(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) {
    return static_cast<char>(std::tolower(c));
  });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

}  // namespace

DomainDataset load_image_folder(const fs::path& path, int size, const std::string& domain_tag) {
  if (!fs::exists(path) || !fs::is_directory(path)) {
    throw NotFoundError("dataset folder not found: " + path.string());
  }
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(path)) {
    if (entry.is_regular_file() && has_image_extension(entry.path())) {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end(),
            [](const fs::path& a, const fs::path& b) { return a.filename() < b.filename(); });

  std::vector<torch::Tensor> images;
  int skipped = 0;
  for (const auto& file : files) {
    cv::Mat bgr = cv::imread(file.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) {
      ++skipped;
      continue;
    }
    cv::Mat resized;
    cv::resize(bgr, resized, cv::Size(size, size), 0, 0, cv::INTER_AREA);
    cv::Mat rgb;
    cv::cvtColor(resized, rgb, cv::COLOR_BGR2RGB);
    auto u8 = torch::from_blob(rgb.data, {size, size, 3}, torch::kUInt8).clone();
    images.push_back(uint8_to_unit(u8.permute({2, 0, 1}).contiguous()));
  }
  if (images.empty()) {
    throw EmptyDatasetError("no decodable images under " + path.string());
  }
  DomainDataset out;
  out.domain_tag = domain_tag;
  out.images = ImageBatch(torch::stack(images));
  out.skipped_files = skipped;
  return out;
}

void save_dataset(const DomainDataset& dataset, const fs::path& dir, int64_t seed) {
  dataset.validate();
  fs::create_directories(dir);
  char name[32];
  for (int64_t i = 0; i < dataset.count(); ++i) {
    snprintf(name, sizeof(name), "img_%05lld.png", static_cast<long long>(i));
    save_png(dataset.images.pixels[i], dir / name);
  }
  nlohmann::ordered_json manifest;
  manifest["domain_tag"] = dataset.domain_tag;
  manifest["size"] = dataset.images.height();
  manifest["count"] = dataset.count();
  if (dataset.identity_ids) {
    manifest["identity_ids"] = *dataset.identity_ids;
  } else {
    manifest["identity_ids"] = nullptr;
  }
  manifest["seed"] = seed;
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(2) << "\n";
}

DomainDataset load_dataset(const fs::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) {
    throw NotFoundError("dataset manifest not found: " + manifest_path.string());
  }
  nlohmann::ordered_json manifest;
  {
    std::ifstream in(manifest_path);
    in >> manifest;
  }
  const int size = manifest.at("size").get<int>();
  DomainDataset out = load_image_folder(dir, size, manifest.at("domain_tag").get<std::string>());
  if (!manifest.at("identity_ids").is_null()) {
    out.identity_ids = manifest.at("identity_ids").get<std::vector<int64_t>>();
  }
  if (out.count() != manifest.at("count").get<int64_t>()) {
    throw CorruptCheckpointError("dataset image count does not match its manifest");
  }
  out.validate();
  return out;
}

FoldAssignment split_kfold(const DomainDataset& dataset, int k, bool group_by_identity,
                           uint64_t seed) {
  if (k < 2) throw InvalidArgumentError("k must be at least 2");
  const int64_t n = dataset.count();
  if (n < k) throw TooFewGroupsError("fewer images than folds");

  FoldAssignment out;
  out.k = k;
  out.fold_index_per_image.assign(n, -1);
  std::mt19937_64 rng(seed);

  if (!group_by_identity) {
    std::vector<int64_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (int64_t pos = 0; pos < n; ++pos) {
      out.fold_index_per_image[order[pos]] = static_cast<int>(pos % k);
    }
    return out;
  }

  if (!dataset.identity_ids) {
    throw InvalidArgumentError("group_by_identity requires identity_ids");
  }
  auto identities = dataset.distinct_identities();
  if (static_cast<int>(identities.size()) < k) {
    throw TooFewGroupsError("fewer identities than folds");
  }
  std::shuffle(identities.begin(), identities.end(), rng);
  std::unordered_map<int64_t, int> fold_of_identity;
  for (size_t pos = 0; pos < identities.size(); ++pos) {
    fold_of_identity[identities[pos]] = static_cast<int>(pos % k);
  }
  for (int64_t i = 0; i < n; ++i) {
    out.fold_index_per_image[i] = fold_of_identity[(*dataset.identity_ids)[i]];
  }
  return out;
}

std::vector<int64_t> FoldAssignment::fold_indices(int fold) const {
  std::vector<int64_t> out;
  for (size_t i = 0; i < fold_index_per_image.size(); ++i) {
    if (fold_index_per_image[i] == fold) out.push_back(static_cast<int64_t>(i));
  }
  return out;
}

std::vector<int64_t> FoldAssignment::complement_indices(int fold) const {
  std::vector<int64_t> out;
  for (size_t i = 0; i < fold_index_per_image.size(); ++i) {
    if (fold_index_per_image[i] != fold) out.push_back(static_cast<int64_t>(i));
  }
  return out;
}

}  // namespace privtranslate
