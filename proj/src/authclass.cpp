#include "privtranslate/authclass.hpp"

#include "privtranslate/errors.hpp"
#include "privtranslate/hash.hpp"
#include "privtranslate/translate.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <mutex>
#include <numeric>
#include <random>
#include <thread>
#include <unordered_map>

#include <json.hpp>

namespace privtranslate {

namespace F = torch::nn::functional;

std::string to_string(BackboneMode mode) {
  return mode == BackboneMode::Frozen ? "frozen" : "trainable";
}

BackboneMode backbone_mode_from_string(const std::string& s) {
  if (s == "frozen") return BackboneMode::Frozen;
  if (s == "trainable") return BackboneMode::Trainable;
  throw InvalidConfigError("unknown backbone mode: " + s);
}

void ClassifierConfig::validate() const {
  if (epochs < 1) throw InvalidConfigError("epochs must be >= 1");
  if (!(threshold > 0.0) || !(threshold < 1.0)) {
    throw InvalidConfigError("threshold must be in (0, 1)");
  }
  if (!(learning_rate > 0.0)) throw InvalidConfigError("learning_rate must be > 0");
  if (negatives_per_positive < 1) {
    throw InvalidConfigError("negatives_per_positive must be >= 1");
  }
}

BackboneImpl::BackboneImpl(int input_size_, int base_channels_, int n_down_blocks_,
                           int embedding_dim_)
    : input_size(input_size_),
      base_channels(base_channels_),
      n_down_blocks(n_down_blocks_),
      embedding_dim(embedding_dim_) {
  if (base_channels < 1 || n_down_blocks < 1 || embedding_dim < 1 || input_size < 8) {
    throw InvalidSpecError("bad backbone dimensions");
  }
  torch::nn::Sequential seq;
  int64_t ch = base_channels;
  seq->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(3, ch, 4).stride(2).padding(1)));
  seq->push_back(torch::nn::ReLU());
  for (int i = 1; i < n_down_blocks; ++i) {
    seq->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(ch, ch * 2, 4).stride(2).padding(1)));
    seq->push_back(torch::nn::InstanceNorm2d(ch * 2));
    seq->push_back(torch::nn::ReLU());
    ch *= 2;
  }
  seq->push_back(torch::nn::AdaptiveAvgPool2d(torch::nn::AdaptiveAvgPool2dOptions(1)));
  seq->push_back(torch::nn::Flatten());
  body = register_module("body", seq);
  head = register_module("head", torch::nn::Linear(ch, embedding_dim));
}

torch::Tensor BackboneImpl::forward(const torch::Tensor& x) {
  return head->forward(body->forward(x));
}

torch::Tensor BackboneModel::features(const ImageBatch& images) const {
  if (net.is_empty()) throw Error("backbone is empty");
  images.validate();
  torch::NoGradGuard guard;
  Backbone local = net;  // holders share the module
  const bool was_training = local->is_training();
  local->eval();
  std::vector<torch::Tensor> chunks;
  for (int64_t begin = 0; begin < images.count(); begin += 64) {
    const int64_t end = std::min<int64_t>(begin + 64, images.count());
    chunks.push_back(local->forward(images.pixels.slice(0, begin, end).to(torch::kFloat32)));
  }
  local->train(was_training);
  return torch::cat(chunks, 0);
}

uint64_t BackboneModel::param_hash() const {
  if (net.is_empty()) throw Error("backbone is empty");
  return parameter_hash(*net);
}

BackboneModel pretrain_backbone(const DomainDataset& aux_dataset, uint64_t seed,
                                const BackbonePretrainConfig& config) {
  aux_dataset.validate();
  if (!aux_dataset.identity_ids.has_value()) {
    throw InvalidArgumentError("pretrain_backbone needs identity labels");
  }
  if (config.epochs < 1 || config.batch_size < 1 || !(config.learning_rate > 0.0)) {
    throw InvalidConfigError("bad backbone pretrain config");
  }
  const auto& raw_ids = *aux_dataset.identity_ids;
  std::vector<int64_t> classes(raw_ids.begin(), raw_ids.end());
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  if (classes.size() < 2) throw TooFewClassesError("auxiliary task needs at least 2 identities");
  std::unordered_map<int64_t, int64_t> class_index;
  for (size_t i = 0; i < classes.size(); ++i) class_index[classes[i]] = static_cast<int64_t>(i);

  torch::manual_seed(derive_seed(seed, "backbone"));
  Backbone net(static_cast<int>(aux_dataset.images.height()), config.base_channels,
               config.n_down_blocks, config.embedding_dim);
  torch::nn::Linear aux_head(config.embedding_dim, static_cast<int64_t>(classes.size()));

  std::vector<torch::Tensor> params = net->parameters();
  for (auto& p : aux_head->parameters()) params.push_back(p);
  torch::optim::Adam opt(params, torch::optim::AdamOptions(config.learning_rate));

  std::vector<int64_t> labels(raw_ids.size());
  for (size_t i = 0; i < raw_ids.size(); ++i) labels[i] = class_index.at(raw_ids[i]);
  auto label_tensor = torch::tensor(labels, torch::kLong);

  const int64_t n = aux_dataset.count();
  std::vector<int64_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::mt19937_64 rng(derive_seed(seed, "backbone-order", epoch));
    std::shuffle(order.begin(), order.end(), rng);
    for (int64_t begin = 0; begin < n; begin += config.batch_size) {
      const int64_t end = std::min<int64_t>(begin + config.batch_size, n);
      std::vector<int64_t> idx(order.begin() + begin, order.begin() + end);
      auto sel = torch::tensor(idx, torch::kLong);
      auto x = aux_dataset.images.pixels.index_select(0, sel);
      auto y = label_tensor.index_select(0, sel);
      auto logits = aux_head->forward(net->forward(x));
      auto loss = F::cross_entropy(logits, y);
      opt.zero_grad();
      loss.backward();
      opt.step();
      if (!std::isfinite(loss.item<double>())) {
        throw NumericError("backbone pretraining diverged");
      }
    }
  }

  BackboneModel model;
  model.net = net;
  model.pretrain_task = "identity-classification";
  model.seed = seed;
  return model;
}

double ClassifierModel::probability(const torch::Tensor& image_chw) const {
  auto batch = image_chw.dim() == 3 ? image_chw.unsqueeze(0) : image_chw;
  if (batch.dim() != 4 || batch.size(0) != 1) {
    throw ShapeError("probability expects a single [C, H, W] image");
  }
  return probabilities(ImageBatch{batch}).item<double>();
}

torch::Tensor ClassifierModel::probabilities(const ImageBatch& images) const {
  if (backbone.is_empty() || head.is_empty()) throw Error("classifier is empty");
  images.validate();
  torch::NoGradGuard guard;
  Backbone bb = backbone;  // holders share the module
  torch::nn::Linear hd = head;
  const bool was_training = bb->is_training();
  bb->eval();
  auto feats = bb->forward(images.pixels.to(torch::kFloat32));
  bb->train(was_training);
  return torch::sigmoid(hd->forward(feats)).squeeze(1);
}

namespace {

torch::Tensor take_rows(const torch::Tensor& t, const std::vector<int64_t>& idx) {
  return t.index_select(0, torch::tensor(idx, torch::kLong));
}

// Head (and optionally a private backbone copy) trained with class-balanced
// BCE on a fresh negative subsample each epoch.
ClassifierModel train_binary_impl(const BackboneModel& backbone, const ImageBatch& positives,
                                  const ImageBatch& negatives,
                                  const std::optional<torch::Tensor>& pos_feats_in,
                                  const std::optional<torch::Tensor>& neg_feats_in,
                                  const ClassifierConfig& config) {
  config.validate();
  if (backbone.net.is_empty()) throw Error("backbone is empty");
  if (positives.count() < 1) throw EmptyClassError("no positive images");
  if (negatives.count() < 1) throw EmptyClassError("no negative images");

  const bool frozen = config.backbone_mode == BackboneMode::Frozen;
  torch::manual_seed(derive_seed(config.seed, "classifier"));

  ClassifierModel clf;
  clf.mode = config.backbone_mode;
  clf.threshold = config.threshold;
  if (frozen) {
    clf.backbone = backbone.net;
  } else {
    clf.backbone = Backbone(backbone.net->input_size, backbone.net->base_channels,
                            backbone.net->n_down_blocks, backbone.net->embedding_dim);
    copy_module_state(*backbone.net, *clf.backbone);
    clf.backbone->train();
  }
  clf.head = torch::nn::Linear(backbone.net->embedding_dim, 1);

  std::vector<torch::Tensor> params = clf.head->parameters();
  if (!frozen) {
    for (auto& p : clf.backbone->parameters()) params.push_back(p);
  }
  torch::optim::Adam opt(params, torch::optim::AdamOptions(config.learning_rate));

  torch::Tensor pos_feats, neg_feats;
  if (frozen) {
    pos_feats = pos_feats_in.has_value() ? *pos_feats_in : backbone.features(positives);
    neg_feats = neg_feats_in.has_value() ? *neg_feats_in : backbone.features(negatives);
  }

  const int64_t n_pos = positives.count();
  const int64_t n_pool = negatives.count();
  const int64_t n_neg = std::min<int64_t>(n_pool, static_cast<int64_t>(config.negatives_per_positive) * n_pos);
  const double pos_weight = static_cast<double>(n_neg) / static_cast<double>(n_pos);
  auto pw = torch::tensor({pos_weight}, torch::kFloat32);
  constexpr int64_t kBatch = 32;

  std::vector<int64_t> pool_order(n_pool);
  std::iota(pool_order.begin(), pool_order.end(), 0);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::mt19937_64 rng(derive_seed(config.seed, "neg-sample", epoch));
    std::shuffle(pool_order.begin(), pool_order.end(), rng);
    std::vector<int64_t> neg_idx(pool_order.begin(), pool_order.begin() + n_neg);

    const int64_t n_total = n_pos + n_neg;
    std::vector<int64_t> order(n_total);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);

    auto labels = torch::cat({torch::ones({n_pos}), torch::zeros({n_neg})});
    for (int64_t begin = 0; begin < n_total; begin += kBatch) {
      const int64_t end = std::min(begin + kBatch, n_total);
      std::vector<int64_t> batch(order.begin() + begin, order.begin() + end);
      torch::Tensor feats;
      if (frozen) {
        auto rows = torch::cat({pos_feats, take_rows(neg_feats, neg_idx)}, 0);
        feats = take_rows(rows, batch);
      } else {
        auto rows = torch::cat({positives.pixels, take_rows(negatives.pixels, neg_idx)}, 0);
        feats = clf.backbone->forward(take_rows(rows, batch));
      }
      auto logits = clf.head->forward(feats).squeeze(1);
      auto y = take_rows(labels, batch);
      auto loss = F::binary_cross_entropy_with_logits(
          logits, y, F::BinaryCrossEntropyWithLogitsFuncOptions().pos_weight(pw));
      opt.zero_grad();
      loss.backward();
      opt.step();
      if (!std::isfinite(loss.item<double>())) {
        throw NumericError("classifier training diverged");
      }
    }
  }
  return clf;
}

}  // namespace

ClassifierModel train_binary(const BackboneModel& backbone, const ImageBatch& positives,
                             const ImageBatch& negatives, const ClassifierConfig& config) {
  return train_binary_impl(backbone, positives, negatives, std::nullopt, std::nullopt, config);
}

Decision decide(const ClassifierModel& classifier, const torch::Tensor& image_chw) {
  Decision d;
  d.probability = classifier.probability(image_chw);
  d.accept = d.probability >= classifier.threshold;
  return d;
}

Metrics compute_metrics(const std::vector<std::pair<bool, bool>>& decisions) {
  if (decisions.empty()) throw InvalidArgumentError("compute_metrics needs decisions");
  int64_t tp = 0, fp = 0, fn = 0, tn = 0;
  for (const auto& [predicted, actual] : decisions) {
    if (predicted && actual) ++tp;
    else if (predicted && !actual) ++fp;
    else if (!predicted && actual) ++fn;
    else ++tn;
  }
  Metrics m;
  const double n = static_cast<double>(decisions.size());
  m.accuracy = static_cast<double>(tp + tn) / n;
  m.precision = (tp + fp) > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  m.recall = (tp + fn) > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  m.f1 = (m.precision + m.recall) > 0.0
             ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
             : 0.0;
  return m;
}

void MetricsReport::finalize() {
  per_identity_mean.clear();
  average = Metrics{};
  if (per_identity.empty()) return;
  for (const auto& [id, folds] : per_identity) {
    Metrics mean;
    for (const auto& m : folds) {
      mean.accuracy += m.accuracy;
      mean.precision += m.precision;
      mean.recall += m.recall;
      mean.f1 += m.f1;
    }
    const double k = static_cast<double>(folds.size());
    mean.accuracy /= k;
    mean.precision /= k;
    mean.recall /= k;
    mean.f1 /= k;
    per_identity_mean[id] = mean;
  }
  for (const auto& [id, m] : per_identity_mean) {
    average.accuracy += m.accuracy;
    average.precision += m.precision;
    average.recall += m.recall;
    average.f1 += m.f1;
  }
  const double n = static_cast<double>(per_identity_mean.size());
  average.accuracy /= n;
  average.precision /= n;
  average.recall /= n;
  average.f1 /= n;
}

MetricsReport crossval_experiment(const BackboneModel& backbone, const DomainDataset& identities,
                                  const ImageBatch& negative_pool, int k,
                                  const ClassifierConfig& config, int jobs) {
  config.validate();
  identities.validate();
  negative_pool.validate();
  if (k < 2) throw InvalidArgumentError("k must be >= 2");
  if (jobs < 1) throw InvalidArgumentError("jobs must be >= 1");
  if (!identities.identity_ids.has_value()) {
    throw InvalidArgumentError("crossval_experiment needs identity labels");
  }

  const auto& ids = *identities.identity_ids;
  std::map<int64_t, std::vector<int64_t>> by_identity;
  for (size_t i = 0; i < ids.size(); ++i) by_identity[ids[i]].push_back(static_cast<int64_t>(i));

  MetricsReport report;
  std::vector<int64_t> eligible;
  for (const auto& [id, idx] : by_identity) {
    if (static_cast<int>(idx.size()) < k) {
      report.skipped_identities.push_back(id);
    } else {
      eligible.push_back(id);
    }
  }
  if (eligible.empty()) throw TooFewSamplesError("no identity has >= k images");

  const bool frozen = config.backbone_mode == BackboneMode::Frozen;
  torch::Tensor all_feats, pool_feats;
  if (frozen) {
    all_feats = backbone.features(identities.images);
    pool_feats = backbone.features(ImageBatch{negative_pool.pixels});
  }

  std::mutex mu;
  std::atomic<size_t> cursor{0};
  std::exception_ptr first_error;

  auto run_identity = [&](int64_t identity) {
    const auto& idx = by_identity.at(identity);
    std::vector<int64_t> order = idx;
    std::mt19937_64 rng(derive_seed(config.seed, "cv-order", identity));
    std::shuffle(order.begin(), order.end(), rng);

    std::vector<Metrics> folds;
    for (int fold = 0; fold < k; ++fold) {
      std::vector<int64_t> train_idx, test_idx;
      for (size_t p = 0; p < order.size(); ++p) {
        (static_cast<int>(p % k) == fold ? test_idx : train_idx).push_back(order[p]);
      }
      ClassifierConfig fold_config = config;
      fold_config.seed = derive_seed(config.seed, "identity-fold", identity * 1009 + fold);

      ImageBatch pos{take_rows(identities.images.pixels, train_idx)};
      std::optional<torch::Tensor> pos_f, neg_f;
      if (frozen) {
        pos_f = take_rows(all_feats, train_idx);
        neg_f = pool_feats;
      }
      auto clf = train_binary_impl(backbone, pos, negative_pool, pos_f, neg_f, fold_config);

      torch::NoGradGuard guard;
      torch::Tensor test_probs, neg_probs;
      if (frozen) {
        test_probs = torch::sigmoid(clf.head->forward(take_rows(all_feats, test_idx))).squeeze(1);
        neg_probs = torch::sigmoid(clf.head->forward(pool_feats)).squeeze(1);
      } else {
        test_probs = clf.probabilities(ImageBatch{take_rows(identities.images.pixels, test_idx)});
        neg_probs = clf.probabilities(ImageBatch{negative_pool.pixels});
      }
      std::vector<std::pair<bool, bool>> decisions;
      for (int64_t i = 0; i < test_probs.size(0); ++i) {
        decisions.emplace_back(test_probs[i].item<double>() >= config.threshold, true);
      }
      for (int64_t i = 0; i < neg_probs.size(0); ++i) {
        decisions.emplace_back(neg_probs[i].item<double>() >= config.threshold, false);
      }
      folds.push_back(compute_metrics(decisions));
    }
    std::lock_guard<std::mutex> lock(mu);
    report.per_identity[identity] = std::move(folds);
  };

  auto worker = [&]() {
    for (;;) {
      const size_t at = cursor.fetch_add(1);
      if (at >= eligible.size()) return;
      try {
        run_identity(eligible[at]);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };

  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    const int n_threads = std::min<int>(jobs, static_cast<int>(eligible.size()));
    threads.reserve(n_threads);
    for (int t = 0; t < n_threads; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  if (first_error) std::rethrow_exception(first_error);

  report.finalize();
  return report;
}

double performance_drop(const MetricsReport& faces, const MetricsReport& translated,
                        const std::string& metric) {
  auto keys = [](const MetricsReport& r) {
    std::vector<int64_t> v;
    for (const auto& [id, m] : r.per_identity_mean) v.push_back(id);
    return v;
  };
  if (keys(faces) != keys(translated)) {
    throw MismatchedReportsError("reports cover different identity sets");
  }
  auto pick = [&metric](const Metrics& m) {
    if (metric == "accuracy") return m.accuracy;
    if (metric == "precision") return m.precision;
    if (metric == "recall") return m.recall;
    if (metric == "f1") return m.f1;
    throw InvalidArgumentError("unknown metric: " + metric);
  };
  return std::abs(pick(faces.average) - pick(translated.average));
}

std::map<std::string, Metrics> paper_reference_metrics() {
  return {
      {"frozen_faces", {0.9998, 0.9139, 0.9148, 0.9143}},
      {"frozen_translated", {0.9976, 0.8353, 0.7086, 0.7667}},
      {"trainable_faces", {0.9992, 0.8810, 0.9117, 0.8961}},
      {"trainable_translated", {0.9974, 0.8594, 0.8627, 0.8611}},
  };
}

namespace {

nlohmann::ordered_json metrics_to_json(const Metrics& m) {
  nlohmann::ordered_json j;
  j["accuracy"] = m.accuracy;
  j["precision"] = m.precision;
  j["recall"] = m.recall;
  j["f1"] = m.f1;
  return j;
}

}  // namespace

void write_metrics_report_json(const MetricsReport& report, const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  j["label"] = report.label;
  j["average"] = metrics_to_json(report.average);
  auto per_id = nlohmann::ordered_json::object();
  for (const auto& [id, folds] : report.per_identity) {
    nlohmann::ordered_json entry;
    auto fold_array = nlohmann::ordered_json::array();
    for (const auto& m : folds) fold_array.push_back(metrics_to_json(m));
    entry["folds"] = std::move(fold_array);
    entry["mean"] = metrics_to_json(report.per_identity_mean.at(id));
    per_id[std::to_string(id)] = std::move(entry);
  }
  j["per_identity"] = std::move(per_id);
  j["skipped_identities"] = report.skipped_identities;

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  os << j.dump(2) << "\n";
}

void write_per_identity_csv(const std::vector<const MetricsReport*>& reports,
                            const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  os << "label,identity,fold,accuracy,precision,recall,f1\n";
  char row[256];
  for (const auto* report : reports) {
    if (report == nullptr) throw InvalidArgumentError("null report");
    for (const auto& [id, folds] : report->per_identity) {
      for (size_t f = 0; f < folds.size(); ++f) {
        const auto& m = folds[f];
        std::snprintf(row, sizeof(row), "%s,%lld,%zu,%.6f,%.6f,%.6f,%.6f\n",
                      report->label.c_str(), static_cast<long long>(id), f, m.accuracy,
                      m.precision, m.recall, m.f1);
        os << row;
      }
    }
  }
}

ClassifierModel enroll(const ImageBatch& user_images, const TranslationModel& model,
                       const BackboneModel& backbone, const ImageBatch& negative_pool_faces,
                       const ClassifierConfig& config, const EnrollOptions& options) {
  user_images.validate();
  negative_pool_faces.validate();
  if (options.copies < 0) throw InvalidArgumentError("copies must be >= 0");
  ImageBatch enrollment = user_images;
  if (options.copies > 0 && !options.augment.is_zero()) {
    auto extra = augment_identity(user_images, options.augment, options.copies);
    enrollment = ImageBatch::concat({user_images, extra});
  }
  auto pos = translate(model, enrollment);
  auto neg = translate(model, negative_pool_faces);
  return train_binary(backbone, pos, neg, config);
}

Decision authenticate(const torch::Tensor& image_chw, const TranslationModel& model,
                      const ClassifierModel& classifier) {
  auto batch = image_chw.dim() == 3 ? image_chw.unsqueeze(0) : image_chw;
  if (batch.dim() != 4 || batch.size(0) != 1) {
    throw ShapeError("authenticate expects a single [C, H, W] image");
  }
  auto translated = translate(model, ImageBatch{batch});
  return decide(classifier, translated.pixels.squeeze(0));
}

}  // namespace privtranslate
