#include "privtranslate/authclass.hpp"

#include <torch/torch.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "privtranslate/data.hpp"
#include "privtranslate/errors.hpp"
#include "privtranslate/networks.hpp"
#include "privtranslate/translate.hpp"

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

namespace fs = std::filesystem;
using namespace privtranslate;

namespace {

fs::path tmp_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "privtranslate-tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

BackbonePretrainConfig tiny_pretrain() {
  BackbonePretrainConfig config;
  config.epochs = 10;
  config.batch_size = 16;
  config.base_channels = 8;
  config.n_down_blocks = 2;
  config.embedding_dim = 16;
  return config;
}

torch::Tensor band(int64_t n, double low, uint64_t seed) {
  torch::manual_seed(seed);
  return low + 0.2 * torch::rand({n, 3, 16, 16});
}

torch::Tensor stripes(int64_t n, bool vertical, uint64_t seed) {
  torch::manual_seed(seed);
  auto wave = torch::zeros({16});
  for (int i = 0; i < 16; ++i) wave[i] = (i / 2) % 2 == 0 ? 0.6 : -0.6;
  auto pattern = vertical ? wave.reshape({1, 1, 1, 16}) : wave.reshape({1, 1, 16, 1});
  return (pattern.expand({n, 3, 16, 16}) + 0.15 * torch::randn({n, 3, 16, 16}))
      .clamp(-1.0, 1.0);
}

torch::Tensor checkers(int64_t n, uint64_t seed) {
  torch::manual_seed(seed);
  auto grid = torch::zeros({16, 16});
  for (int r = 0; r < 16; ++r) {
    for (int c = 0; c < 16; ++c) grid[r][c] = ((r / 2) + (c / 2)) % 2 == 0 ? 0.6 : -0.6;
  }
  return (grid.reshape({1, 1, 16, 16}).expand({n, 3, 16, 16}) +
          0.15 * torch::randn({n, 3, 16, 16}))
      .clamp(-1.0, 1.0);
}

// Two structurally distinct identities (vertical vs horizontal stripes), a
// checkerboard negative pool, and a three-pattern aux set for pretraining.
// The classes differ in layout rather than brightness, so they stay apart
// under the backbone's instance normalization.
struct ToySplit {
  DomainDataset identities;
  DomainDataset aux;
  ImageBatch pool;
};

ToySplit toy_split(uint64_t seed) {
  ToySplit toy;
  toy.identities.domain_tag = "faceoid";
  toy.identities.images =
      ImageBatch{torch::cat({stripes(4, true, seed), stripes(4, false, seed + 1)})};
  toy.identities.identity_ids = std::vector<int64_t>{0, 0, 0, 0, 1, 1, 1, 1};
  toy.pool = ImageBatch{checkers(8, seed + 2)};
  toy.aux.domain_tag = "faceoid";
  toy.aux.images = ImageBatch{torch::cat(
      {stripes(4, true, seed + 3), stripes(4, false, seed + 4), checkers(4, seed + 5)})};
  toy.aux.identity_ids = std::vector<int64_t>{0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2};
  return toy;
}

}  // namespace

TEST_CASE("metric formulas match the confusion matrix") {
  std::vector<std::pair<bool, bool>> perfect = {{true, true}, {false, false}, {true, true}};
  auto m = compute_metrics(perfect);
  CHECK(m.accuracy == 1.0);
  CHECK(m.precision == 1.0);
  CHECK(m.recall == 1.0);
  CHECK(m.f1 == 1.0);

  // TP=3, FP=1, FN=2, TN=94.
  std::vector<std::pair<bool, bool>> mixed;
  for (int i = 0; i < 3; ++i) mixed.emplace_back(true, true);
  mixed.emplace_back(true, false);
  for (int i = 0; i < 2; ++i) mixed.emplace_back(false, true);
  for (int i = 0; i < 94; ++i) mixed.emplace_back(false, false);
  m = compute_metrics(mixed);
  CHECK(m.accuracy == doctest::Approx(0.97).epsilon(1e-12));
  CHECK(m.precision == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(m.recall == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(m.f1 == doctest::Approx(2.0 / 3.0).epsilon(1e-12));

  // Nothing predicted positive: precision, recall and F1 fall back to 0.
  std::vector<std::pair<bool, bool>> silent = {{false, true}, {false, false}};
  m = compute_metrics(silent);
  CHECK(m.accuracy == 0.5);
  CHECK(m.precision == 0.0);
  CHECK(m.recall == 0.0);
  CHECK(m.f1 == 0.0);

  CHECK_THROWS_AS(compute_metrics({}), InvalidArgumentError);
}

TEST_CASE("metrics agree with a brute-force recount on random decision lists") {
  std::mt19937_64 rng(123);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 40);
    std::vector<std::pair<bool, bool>> decisions(n);
    int tp = 0, fp = 0, fn = 0, tn = 0;
    for (auto& d : decisions) {
      d.first = rng() % 2 == 0;
      d.second = rng() % 2 == 0;
      if (d.first && d.second) ++tp;
      if (d.first && !d.second) ++fp;
      if (!d.first && d.second) ++fn;
      if (!d.first && !d.second) ++tn;
    }
    auto m = compute_metrics(decisions);
    CHECK(m.accuracy == static_cast<double>(tp + tn) / n);
    CHECK(m.precision == (tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0));
    CHECK(m.recall == (tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0));
    const double expected_f1 =
        (m.precision + m.recall > 0.0)
            ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
            : 0.0;
    CHECK(m.f1 == expected_f1);
  }
}

TEST_CASE("classifier config and mode names validate") {
  ClassifierConfig config;
  CHECK(config.threshold == 0.7);
  CHECK_NOTHROW(config.validate());

  auto invalid = [](auto mutate) {
    ClassifierConfig c;
    mutate(c);
    CHECK_THROWS_AS(c.validate(), InvalidConfigError);
  };
  invalid([](ClassifierConfig& c) { c.epochs = 0; });
  invalid([](ClassifierConfig& c) { c.threshold = 0.0; });
  invalid([](ClassifierConfig& c) { c.threshold = 1.0; });
  invalid([](ClassifierConfig& c) { c.learning_rate = 0.0; });
  invalid([](ClassifierConfig& c) { c.negatives_per_positive = 0; });

  CHECK(backbone_mode_from_string("frozen") == BackboneMode::Frozen);
  CHECK(backbone_mode_from_string("trainable") == BackboneMode::Trainable);
  CHECK_THROWS_AS(backbone_mode_from_string("finetune"), InvalidConfigError);
}

TEST_CASE("backbone pretraining is seeded and leaves usable features") {
  // Same-seed split: copies 6..7 of each identity are held-out renders of the
  // training subjects (a fresh seed would draw a disjoint cohort instead).
  auto full = synth_identity_dataset(4, 8, 16, "faceoid", 70);
  std::vector<int64_t> train_idx, held_idx;
  for (int64_t id = 0; id < 4; ++id) {
    for (int64_t copy = 0; copy < 8; ++copy) {
      (copy < 6 ? train_idx : held_idx).push_back(id * 8 + copy);
    }
  }
  auto aux = full.subset(train_idx);
  auto a = pretrain_backbone(aux, 5, tiny_pretrain());
  auto b = pretrain_backbone(aux, 5, tiny_pretrain());
  CHECK(a.param_hash() == b.param_hash());
  CHECK(a.pretrain_task == "identity-classification");
  auto c = pretrain_backbone(aux, 6, tiny_pretrain());
  CHECK(a.param_hash() != c.param_hash());

  auto feats = a.features(aux.images);
  CHECK(feats.size(0) == aux.count());
  CHECK(feats.size(1) == 16);

  // Nearest-centroid probe on the held-out renders.
  auto held_out = full.subset(held_idx);
  auto test_feats = a.features(held_out.images);
  std::vector<torch::Tensor> centroids;
  for (int64_t id = 0; id < 4; ++id) {
    centroids.push_back(feats.slice(0, id * 6, (id + 1) * 6).mean(0));
  }
  auto stack = torch::stack(centroids);
  int correct = 0;
  for (int64_t i = 0; i < held_out.count(); ++i) {
    auto dist = (stack - test_feats[i]).pow(2).sum(1);
    if (dist.argmin().item<int64_t>() == (*held_out.identity_ids)[i]) ++correct;
  }
  CHECK(static_cast<double>(correct) / held_out.count() > 0.5);
}

TEST_CASE("backbone pretraining rejects degenerate inputs") {
  CHECK_THROWS_AS(pretrain_backbone(synth_identity_dataset(1, 6, 16, "faceoid", 72), 0,
                                    tiny_pretrain()),
                  TooFewClassesError);

  DomainDataset unlabeled;
  unlabeled.domain_tag = "faceoid";
  unlabeled.images = synth_identity_dataset(2, 2, 16, "faceoid", 73).images;
  CHECK_THROWS_AS(pretrain_backbone(unlabeled, 0, tiny_pretrain()), InvalidArgumentError);

  auto bad = tiny_pretrain();
  bad.epochs = 0;
  CHECK_THROWS_AS(pretrain_backbone(synth_identity_dataset(2, 2, 16, "faceoid", 74), 0, bad),
                  InvalidConfigError);
}

TEST_CASE("frozen training leaves the backbone untouched") {
  auto toy = toy_split(80);
  auto backbone = pretrain_backbone(toy.aux, 7, tiny_pretrain());
  const uint64_t before = backbone.param_hash();

  ClassifierConfig config;
  config.seed = 11;
  auto clf = train_binary(backbone, ImageBatch{toy.identities.images.pixels.slice(0, 0, 4)},
                          toy.pool, config);
  CHECK(backbone.param_hash() == before);
  CHECK(parameter_hash(*clf.backbone) == before);
  CHECK(clf.mode == BackboneMode::Frozen);
  CHECK(clf.threshold == 0.7);
}

TEST_CASE("trainable mode finetunes a private copy") {
  auto toy = toy_split(81);
  auto backbone = pretrain_backbone(toy.aux, 8, tiny_pretrain());
  const uint64_t before = backbone.param_hash();

  ClassifierConfig config;
  config.backbone_mode = BackboneMode::Trainable;
  config.epochs = 5;
  config.seed = 12;
  auto clf = train_binary(backbone, ImageBatch{toy.identities.images.pixels.slice(0, 0, 4)},
                          toy.pool, config);
  CHECK(backbone.param_hash() == before);
  CHECK(parameter_hash(*clf.backbone) != before);
  CHECK(clf.mode == BackboneMode::Trainable);
}

TEST_CASE("train_binary rejects an empty class") {
  auto toy = toy_split(82);
  auto backbone = pretrain_backbone(toy.aux, 9, tiny_pretrain());
  ImageBatch none{torch::zeros({0, 3, 16, 16})};
  CHECK_THROWS_AS(train_binary(backbone, none, toy.pool, ClassifierConfig{}), EmptyClassError);
  CHECK_THROWS_AS(train_binary(backbone, toy.pool, none, ClassifierConfig{}), EmptyClassError);
}

TEST_CASE("indistinguishable classes converge to a coin flip") {
  torch::manual_seed(90);
  auto pixels = torch::rand({8, 3, 16, 16}) * 2.0 - 1.0;
  ImageBatch positives{pixels};
  ImageBatch negatives{pixels.repeat({4, 1, 1, 1})};

  auto aux = synth_identity_dataset(2, 4, 16, "faceoid", 91);
  auto backbone = pretrain_backbone(aux, 10, tiny_pretrain());

  ClassifierConfig config;
  config.seed = 13;
  auto clf = train_binary(backbone, positives, negatives, config);
  const double mean_p = clf.probabilities(positives).mean().item<double>();
  CHECK(std::abs(mean_p - 0.5) < 0.1);
}

TEST_CASE("separable classes are classified confidently") {
  auto toy = toy_split(83);
  auto backbone = pretrain_backbone(toy.aux, 14, tiny_pretrain());

  ClassifierConfig config;
  config.seed = 15;
  ImageBatch vertical_train{toy.identities.images.pixels.slice(0, 0, 3)};
  auto clf = train_binary(backbone, vertical_train, toy.pool, config);

  auto held_out = stripes(4, true, 840);
  auto pos_probs = clf.probabilities(ImageBatch{held_out});
  auto neg_probs = clf.probabilities(toy.pool);
  CHECK(pos_probs.min().item<double>() >= 0.7);
  CHECK(neg_probs.max().item<double>() < 0.7);

  // Batched and single-image probability paths agree.
  const double single = clf.probability(held_out[0]);
  CHECK(single == doctest::Approx(pos_probs[0].item<double>()).epsilon(1e-6));
}

TEST_CASE("decide applies the threshold inclusively") {
  torch::manual_seed(95);
  ClassifierModel clf;
  clf.backbone = Backbone(16, 4, 2, 8);
  clf.head = torch::nn::Linear(8, 1);
  auto image = torch::rand({3, 16, 16}) * 2.0 - 1.0;

  const double p = clf.probability(image);
  CHECK(p > 0.0);
  CHECK(p < 1.0);

  clf.threshold = p;
  auto at = decide(clf, image);
  CHECK(at.accept);
  CHECK(at.probability == p);

  clf.threshold = std::nextafter(p, 1.0);
  CHECK_FALSE(decide(clf, image).accept);

  CHECK_THROWS_AS(clf.probability(torch::rand({2, 3, 16, 16})), ShapeError);
}

TEST_CASE("cross validation scores the toy identities perfectly") {
  auto toy = toy_split(84);
  auto backbone = pretrain_backbone(toy.aux, 16, tiny_pretrain());

  ClassifierConfig config;
  config.seed = 17;
  auto report = crossval_experiment(backbone, toy.identities, toy.pool, 2, config);

  CHECK(report.per_identity.size() == 2);
  CHECK(report.skipped_identities.empty());
  for (const auto& [id, folds] : report.per_identity) CHECK(folds.size() == 2);
  CHECK(report.average.accuracy == 1.0);
  CHECK(report.average.precision == 1.0);
  CHECK(report.average.recall == 1.0);
  CHECK(report.average.f1 == 1.0);

  auto threaded = crossval_experiment(backbone, toy.identities, toy.pool, 2, config, 2);
  CHECK(threaded.average.f1 == report.average.f1);
  CHECK(threaded.per_identity_mean.size() == report.per_identity_mean.size());
  for (const auto& [id, m] : report.per_identity_mean) {
    CHECK(threaded.per_identity_mean.at(id).accuracy == m.accuracy);
    CHECK(threaded.per_identity_mean.at(id).f1 == m.f1);
  }
}

TEST_CASE("cross validation skips identities with too few images") {
  auto toy = toy_split(85);
  DomainDataset padded;
  padded.domain_tag = toy.identities.domain_tag;
  padded.images = ImageBatch{
      torch::cat({toy.identities.images.pixels, band(1, -0.1, 850)})};
  padded.identity_ids = *toy.identities.identity_ids;
  padded.identity_ids->push_back(2);

  auto backbone = pretrain_backbone(toy.aux, 18, tiny_pretrain());
  auto report = crossval_experiment(backbone, padded, toy.pool, 2, ClassifierConfig{});
  REQUIRE(report.skipped_identities.size() == 1);
  CHECK(report.skipped_identities[0] == 2);
  CHECK(report.per_identity.count(2) == 0);

  auto singles = synth_identity_dataset(3, 1, 16, "faceoid", 86);
  CHECK_THROWS_AS(crossval_experiment(backbone, singles, toy.pool, 2, ClassifierConfig{}),
                  TooFewSamplesError);
  CHECK_THROWS_AS(crossval_experiment(backbone, toy.identities, toy.pool, 1, ClassifierConfig{}),
                  InvalidArgumentError);
  CHECK_THROWS_AS(crossval_experiment(backbone, toy.identities, toy.pool, 2, ClassifierConfig{}, 0),
                  InvalidArgumentError);

  DomainDataset unlabeled;
  unlabeled.domain_tag = "faceoid";
  unlabeled.images = toy.identities.images;
  CHECK_THROWS_AS(crossval_experiment(backbone, unlabeled, toy.pool, 2, ClassifierConfig{}),
                  InvalidArgumentError);
}

TEST_CASE("finalize averages folds then identities") {
  MetricsReport report;
  report.per_identity[1] = {{1.0, 1.0, 1.0, 1.0}, {0.5, 0.5, 0.5, 0.5}};
  report.per_identity[2] = {{0.75, 0.0, 0.25, 1.0}};
  report.finalize();

  CHECK(report.per_identity_mean.at(1).accuracy == 0.75);
  CHECK(report.per_identity_mean.at(1).f1 == 0.75);
  CHECK(report.per_identity_mean.at(2).precision == 0.0);
  CHECK(report.average.accuracy == 0.75);
  CHECK(report.average.precision == 0.375);
  CHECK(report.average.recall == 0.5);
  CHECK(report.average.f1 == 0.875);
}

TEST_CASE("performance drop compares report averages") {
  auto reference = paper_reference_metrics();
  MetricsReport faces, translated;
  faces.per_identity[0] = {reference.at("frozen_faces")};
  translated.per_identity[0] = {reference.at("frozen_translated")};
  faces.finalize();
  translated.finalize();

  CHECK(performance_drop(faces, translated, "f1") == doctest::Approx(0.1476).epsilon(1e-9));
  CHECK(performance_drop(faces, faces, "f1") == 0.0);
  CHECK(performance_drop(translated, faces, "f1") ==
        doctest::Approx(0.1476).epsilon(1e-9));

  MetricsReport trainable_faces, trainable_translated;
  trainable_faces.per_identity[0] = {reference.at("trainable_faces")};
  trainable_translated.per_identity[0] = {reference.at("trainable_translated")};
  trainable_faces.finalize();
  trainable_translated.finalize();
  CHECK(performance_drop(trainable_faces, trainable_translated, "f1") ==
        doctest::Approx(0.035).epsilon(1e-9));

  CHECK_THROWS_AS(performance_drop(faces, translated, "auc"), InvalidArgumentError);
  MetricsReport other;
  other.per_identity[5] = {reference.at("frozen_faces")};
  other.finalize();
  CHECK_THROWS_AS(performance_drop(faces, other, "f1"), MismatchedReportsError);
}

TEST_CASE("reference metrics carry the published operating points") {
  auto reference = paper_reference_metrics();
  REQUIRE(reference.size() == 4);
  CHECK(reference.at("frozen_faces").f1 == 0.9143);
  CHECK(reference.at("frozen_faces").recall == 0.9148);
  CHECK(reference.at("frozen_translated").f1 == 0.7667);
  CHECK(reference.at("frozen_translated").recall == 0.7086);
  CHECK(reference.at("trainable_faces").f1 == 0.8961);
  CHECK(reference.at("trainable_translated").f1 == 0.8611);
  CHECK(reference.at("trainable_translated").recall == 0.8627);
}

TEST_CASE("report writers emit parseable artifacts") {
  const auto dir = tmp_dir("reports");
  MetricsReport report;
  report.label = "faces";
  report.per_identity[3] = {{1.0, 1.0, 1.0, 1.0}, {0.5, 0.5, 0.5, 0.5}};
  report.skipped_identities = {9};
  report.finalize();

  write_metrics_report_json(report, dir / "metrics.json");
  std::ifstream is(dir / "metrics.json");
  REQUIRE(is.good());
  auto j = nlohmann::json::parse(is);
  CHECK(j.at("label") == "faces");
  CHECK(j.at("average").at("f1") == 0.75);
  CHECK(j.at("per_identity").at("3").at("folds").size() == 2);
  CHECK(j.at("skipped_identities").at(0) == 9);

  MetricsReport second = report;
  second.label = "translated";
  write_per_identity_csv({&report, &second}, dir / "per_identity.csv");
  std::ifstream csv(dir / "per_identity.csv");
  REQUIRE(csv.good());
  std::string line;
  std::getline(csv, line);
  CHECK(line == "label,identity,fold,accuracy,precision,recall,f1");
  int rows = 0;
  while (std::getline(csv, line)) {
    if (!line.empty()) ++rows;
  }
  CHECK(rows == 4);
  CHECK_THROWS_AS(write_per_identity_csv({nullptr}, dir / "bad.csv"), InvalidArgumentError);
}

TEST_CASE("enroll and authenticate wrap translation around the classifier") {
  NetworkSpec spec;
  spec.kind = NetworkKind::Generator;
  spec.input_size = 16;
  spec.base_channels = 4;
  spec.n_down_blocks = 2;
  spec.n_res_blocks = 1;
  spec.seed = 99;
  TranslationModel model;
  model.generator = build_generator(spec);
  model.source_tag = "faceoid";
  model.target_tag = "flowroid";

  auto toy = toy_split(87);
  auto aux = synth_identity_dataset(3, 4, 16, "faceoid", 88);
  auto backbone = pretrain_backbone(aux, 19, tiny_pretrain());

  ClassifierConfig config;
  config.seed = 21;
  ImageBatch user{toy.identities.images.pixels.slice(0, 0, 4)};

  auto enrolled = enroll(user, model, backbone, toy.pool, config);
  auto manual = train_binary(backbone, translate(model, user), translate(model, toy.pool), config);

  auto probe = user.pixels[0];
  auto via_facade = authenticate(probe, model, enrolled);
  auto via_manual = decide(manual, translate(model, ImageBatch{probe.unsqueeze(0)}).pixels[0]);
  CHECK(via_facade.probability == doctest::Approx(via_manual.probability).epsilon(1e-9));
  CHECK(via_facade.accept == via_manual.accept);

  EnrollOptions options;
  options.augment.max_rotation_deg = 8.0;
  options.augment.seed = 5;
  options.copies = 2;
  auto augmented = enroll(user, model, backbone, toy.pool, config, options);
  auto decision = authenticate(probe, model, augmented);
  CHECK(decision.probability >= 0.0);
  CHECK(decision.probability <= 1.0);

  CHECK_THROWS_AS(authenticate(torch::rand({2, 3, 16, 16}), model, enrolled), ShapeError);

  EnrollOptions bad;
  bad.copies = -1;
  CHECK_THROWS_AS(enroll(user, model, backbone, toy.pool, config, bad), InvalidArgumentError);
}
