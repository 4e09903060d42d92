#include "privtranslate/attack.hpp"

#include <torch/torch.h>

#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>
#include <opencv2/imgcodecs.hpp>

#include "privtranslate/authclass.hpp"
#include "privtranslate/data.hpp"
#include "privtranslate/errors.hpp"
#include "privtranslate/hash.hpp"
#include "privtranslate/networks.hpp"
#include "privtranslate/trainers.hpp"
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

AttackConfig tiny_itn(uint64_t seed) {
  AttackConfig config;
  config.mode = AttackMode::Itn;
  config.epochs = 12;
  config.batch_size = 8;
  config.learning_rate = 2e-3;
  config.seed = seed;
  config.base_channels = 8;
  config.n_down_blocks = 2;
  config.n_res_blocks = 1;
  return config;
}

BackboneModel tiny_matcher(uint64_t seed) {
  BackbonePretrainConfig config;
  config.epochs = 8;
  config.batch_size = 16;
  config.base_channels = 8;
  config.n_down_blocks = 2;
  config.embedding_dim = 16;
  return pretrain_backbone(synth_identity_dataset(4, 4, 16, "faceoid", 400), seed, config);
}

torch::Tensor random_unit(int64_t n, int64_t size, uint64_t seed) {
  torch::manual_seed(seed);
  return torch::rand({n, 3, size, size}) * 2.0 - 1.0;
}

}  // namespace

TEST_CASE("reconstruction metrics hit their closed forms") {
  ImageBatch x{random_unit(3, 16, 1)};
  auto perfect = reconstruction_metrics(x, x);
  CHECK(perfect.mse == 0.0);
  CHECK(perfect.ssim == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(perfect.per_image_mse.size() == 3);
  CHECK(perfect.per_image_ssim.size() == 3);

  ImageBatch neg{torch::full({2, 3, 16, 16}, -1.0)};
  ImageBatch pos{torch::full({2, 3, 16, 16}, 1.0)};
  auto worst = reconstruction_metrics(neg, pos);
  CHECK(worst.mse == 4.0);
  // Loose tolerance: on constant float32 images the covariance term is pure
  // rounding noise divided by the small c2 stabilizer. The tight closed-form
  // check lives in the ssim tests on double inputs.
  CHECK(worst.ssim == doctest::Approx(-1.9996 / 2.0004).epsilon(1e-3));

  ImageBatch y{random_unit(3, 16, 2)};
  auto m = reconstruction_metrics(x, y);
  for (int64_t i = 0; i < 3; ++i) {
    const double direct = (x.pixels[i].to(torch::kDouble) - y.pixels[i].to(torch::kDouble))
                              .pow(2)
                              .mean()
                              .item<double>();
    CHECK(m.per_image_mse[static_cast<size_t>(i)] == doctest::Approx(direct).epsilon(1e-12));
  }

  ImageBatch small{random_unit(2, 16, 3)};
  CHECK_THROWS_AS(reconstruction_metrics(x, small), ShapeError);
}

TEST_CASE("victim views expose fixed transformations") {
  auto x = random_unit(4, 16, 4);

  auto ident = VictimView::identity(16);
  CHECK(ident.input_size == 16);
  CHECK(torch::equal(ident.forward(x), x));
  CHECK(ident.param_hash() == ident.param_hash());

  auto swap = VictimView::channel_permutation(16, {2, 0, 1});
  auto swapped = swap.forward(x);
  CHECK(torch::equal(swapped.select(1, 0), x.select(1, 2)));
  CHECK(torch::equal(swapped.select(1, 1), x.select(1, 0)));
  CHECK(torch::equal(swapped.select(1, 2), x.select(1, 1)));

  auto other = VictimView::channel_permutation(16, {1, 2, 0});
  CHECK(swap.param_hash() != other.param_hash());
  CHECK(swap.param_hash() == VictimView::channel_permutation(16, {2, 0, 1}).param_hash());

  CHECK_THROWS_AS(VictimView::channel_permutation(16, {0, 0, 1}), InvalidArgumentError);
  CHECK_THROWS_AS(VictimView::channel_permutation(16, {0, 1}), InvalidArgumentError);
}

TEST_CASE("a model-backed victim matches translate") {
  NetworkSpec spec;
  spec.kind = NetworkKind::Generator;
  spec.input_size = 16;
  spec.base_channels = 4;
  spec.n_down_blocks = 2;
  spec.n_res_blocks = 1;
  spec.seed = 44;
  TranslationModel model;
  model.generator = build_generator(spec);
  model.source_tag = "faceoid";
  model.target_tag = "flowroid";

  auto view = VictimView::from_model(model);
  CHECK(view.input_size == 16);
  ImageBatch x{random_unit(3, 16, 5)};
  CHECK(torch::allclose(view.forward(x.pixels), translate(model, x).pixels, 1e-6, 1e-7));
  CHECK(view.param_hash() == model.generator_param_hash());

  TranslationModel empty;
  CHECK_THROWS_AS(VictimView::from_model(empty), Error);
}

TEST_CASE("itn attack inverts an identity victim") {
  auto faces = synth_identity_dataset(6, 8, 16, "faceoid", 50);
  auto victim = VictimView::identity(16);
  auto result = itn_attack(victim, faces, tiny_itn(6));

  CHECK(result.epoch_train_loss.size() == 12);
  CHECK(result.epoch_train_loss.back() < result.epoch_train_loss.front());
  CHECK(result.history.steps.size() == 12 * 6);
  for (const auto& step : result.history.steps) {
    CHECK(step.components.count("recon") == 1);
  }

  auto held_out = synth_identity_dataset(6, 2, 16, "faceoid", 51);
  auto priv = ImageBatch{victim.forward(held_out.images.pixels)};
  auto recon = result.reconstruct(priv);
  auto metrics = reconstruction_metrics(held_out.images, recon);
  CHECK(metrics.mse < 1e-2);
}

TEST_CASE("itn attack inverts a channel permutation") {
  auto faces = synth_identity_dataset(6, 8, 16, "faceoid", 52);
  auto victim = VictimView::channel_permutation(16, {2, 0, 1});
  auto result = itn_attack(victim, faces, tiny_itn(7));

  auto held_out = synth_identity_dataset(6, 2, 16, "faceoid", 53);
  auto priv = ImageBatch{victim.forward(held_out.images.pixels)};
  auto metrics = reconstruction_metrics(held_out.images, result.reconstruct(priv));
  CHECK(metrics.mse < 1e-2);
}

TEST_CASE("itn attack is seeded and supports both losses") {
  auto faces = synth_identity_dataset(2, 8, 16, "faceoid", 54);
  auto config = tiny_itn(8);
  config.epochs = 2;
  auto a = itn_attack(VictimView::identity(16), faces, config);
  auto b = itn_attack(VictimView::identity(16), faces, config);
  CHECK(parameter_hash(*a.inverse) == parameter_hash(*b.inverse));

  config.reconstruction_loss = ReconLoss::L2;
  auto l2 = itn_attack(VictimView::identity(16), faces, config);
  CHECK(l2.history.steps.front().components.count("recon") == 1);
  CHECK(parameter_hash(*l2.inverse) != parameter_hash(*a.inverse));
}

TEST_CASE("itn attack rejects bad victims") {
  auto faces = synth_identity_dataset(2, 4, 16, "faceoid", 55);
  auto config = tiny_itn(9);
  config.epochs = 1;

  CHECK_THROWS_AS(itn_attack(VictimView::identity(32), faces, config), ShapeError);

  VictimView incomplete;
  incomplete.input_size = 16;
  CHECK_THROWS_AS(itn_attack(incomplete, faces, config), InvalidArgumentError);

  auto counter = std::make_shared<uint64_t>(0);
  VictimView drifting = VictimView::identity(16);
  drifting.param_hash = [counter]() { return (*counter)++; };
  CHECK_THROWS_AS(itn_attack(drifting, faces, config), FrozenViolationError);

  auto naive_config = config;
  naive_config.mode = AttackMode::Naive;
  CHECK_THROWS_AS(itn_attack(VictimView::identity(16), faces, naive_config), InvalidConfigError);
}

TEST_CASE("naive attack trains a reverse-direction gan") {
  auto flowers = synth_identity_dataset(2, 4, 16, "flowroid", 56);
  auto faces = synth_identity_dataset(2, 4, 16, "faceoid", 57);

  AttackConfig config;
  config.mode = AttackMode::Naive;
  config.framework = Framework::CycleGan;
  config.epochs = 1;
  config.batch_size = 4;
  config.seed = 10;
  config.base_channels = 4;
  config.n_res_blocks = 1;

  auto result = naive_inverse_attack(flowers, faces, config);
  CHECK(result.model.source_tag == "flowroid");
  CHECK(result.model.target_tag == "faceoid");

  auto again = naive_inverse_attack(flowers, faces, config);
  CHECK(result.model.generator_param_hash() == again.model.generator_param_hash());
  config.seed = 11;
  auto reseeded = naive_inverse_attack(flowers, faces, config);
  CHECK(result.model.generator_param_hash() != reseeded.model.generator_param_hash());

  config.mode = AttackMode::Itn;
  CHECK_THROWS_AS(naive_inverse_attack(flowers, faces, config), InvalidConfigError);
}

TEST_CASE("reidentification is perfect on exact copies") {
  auto gallery = synth_identity_dataset(4, 3, 16, "faceoid", 58);
  auto matcher = tiny_matcher(12);
  auto result = reidentification_rate(gallery.images, gallery, *gallery.identity_ids, matcher);
  CHECK(result.rate == 1.0);
  CHECK_FALSE(result.degenerate_gallery);
  REQUIRE(result.predicted_ids.size() == static_cast<size_t>(gallery.count()));
  for (size_t i = 0; i < result.predicted_ids.size(); ++i) {
    CHECK(result.predicted_ids[i] == (*gallery.identity_ids)[i]);
  }
}

TEST_CASE("reidentification of noise sits near chance") {
  auto gallery = synth_identity_dataset(5, 4, 16, "faceoid", 59);
  auto matcher = tiny_matcher(13);
  ImageBatch noise{random_unit(100, 16, 60)};
  std::vector<int64_t> true_ids(100);
  for (size_t i = 0; i < true_ids.size(); ++i) true_ids[i] = static_cast<int64_t>(i % 5);

  auto result = reidentification_rate(noise, gallery, true_ids, matcher);
  CHECK(result.rate >= 0.0);
  CHECK(result.rate <= 0.5);
}

TEST_CASE("reidentification flags degenerate galleries") {
  auto gallery = synth_identity_dataset(1, 3, 16, "faceoid", 61);
  auto matcher = tiny_matcher(14);
  std::vector<int64_t> true_ids = {0, 0, 0};
  auto result = reidentification_rate(gallery.images, gallery, true_ids, matcher);
  CHECK(result.degenerate_gallery);
  CHECK(result.rate == 1.0);
}

TEST_CASE("reidentification rejects malformed inputs") {
  auto gallery = synth_identity_dataset(2, 2, 16, "faceoid", 62);
  auto matcher = tiny_matcher(15);
  ImageBatch probe{random_unit(2, 16, 63)};

  DomainDataset empty;
  empty.domain_tag = "faceoid";
  CHECK_THROWS_AS(reidentification_rate(probe, empty, {0, 1}, matcher), EmptyGalleryError);

  DomainDataset unlabeled;
  unlabeled.domain_tag = "faceoid";
  unlabeled.images = gallery.images;
  CHECK_THROWS_AS(reidentification_rate(probe, unlabeled, {0, 1}, matcher), InvalidArgumentError);

  CHECK_THROWS_AS(reidentification_rate(probe, gallery, {0}, matcher), InvalidArgumentError);
}

TEST_CASE("dual reverse probe recomputes the round trip") {
  auto faces = synth_identity_dataset(2, 4, 16, "faceoid", 64);
  auto flowers = synth_identity_dataset(2, 4, 16, "flowroid", 65);

  TrainConfig train;
  train.framework = Framework::CycleGan;
  train.epochs = 1;
  train.batch_size = 4;
  train.seed = 16;
  train.base_channels = 4;
  train.n_down_blocks = 2;
  train.n_res_blocks = 1;
  train.checkpoint_every = 0;
  auto cycle = train_cyclegan(faces, flowers, train);

  ImageBatch probe{faces.images.pixels.slice(0, 0, 4)};
  auto probed = dual_reverse_probe(cycle.model, probe);

  TranslationModel reverse;
  reverse.generator = *cycle.model.reverse_generator;
  reverse.framework = cycle.model.framework;
  auto manual = reconstruction_metrics(probe, translate(reverse, translate(cycle.model, probe)));
  CHECK(probed.mse == manual.mse);
  CHECK(probed.ssim == manual.ssim);

  train.framework = Framework::TravelGan;
  auto travel = train_travelgan(faces, flowers, train);
  CHECK_THROWS_AS(dual_reverse_probe(travel.model, probe), NoReverseGeneratorError);
}

TEST_CASE("attack config validates and hashes") {
  AttackConfig config;
  CHECK_NOTHROW(config.validate());

  auto invalid = [](auto mutate) {
    AttackConfig c;
    mutate(c);
    CHECK_THROWS_AS(c.validate(), InvalidConfigError);
  };
  invalid([](AttackConfig& c) { c.epochs = 0; });
  invalid([](AttackConfig& c) { c.batch_size = 0; });
  invalid([](AttackConfig& c) { c.learning_rate = 0.0; });
  invalid([](AttackConfig& c) { c.base_channels = 0; });
  invalid([](AttackConfig& c) { c.n_down_blocks = 0; });
  invalid([](AttackConfig& c) { c.n_res_blocks = -1; });

  AttackConfig a, b;
  CHECK(a.hash() == b.hash());
  b.reconstruction_loss = ReconLoss::L2;
  CHECK(a.hash() != b.hash());

  CHECK(attack_mode_from_string("itn") == AttackMode::Itn);
  CHECK(attack_mode_from_string("naive") == AttackMode::Naive);
  CHECK_THROWS_AS(attack_mode_from_string("gan"), InvalidConfigError);
  CHECK(recon_loss_from_string("l1") == ReconLoss::L1);
  CHECK(recon_loss_from_string("l2") == ReconLoss::L2);
  CHECK_THROWS_AS(recon_loss_from_string("huber"), InvalidConfigError);
}

TEST_CASE("attack artifacts are written to disk") {
  const auto dir = tmp_dir("attack-artifacts");

  AttackReport report;
  report.mode = AttackMode::Itn;
  report.config_hash = 0xdeadbeef;
  report.reconstruction.mse = 0.25;
  report.reconstruction.ssim = 0.5;
  report.reconstruction.per_image_mse = {0.25, 0.25};
  report.reconstruction.per_image_ssim = {0.5, 0.5};
  report.reidentification = 0.125;
  report.chance_rate = 0.1;
  report.predicted_ids = {3, 1};
  report.degenerate_gallery = false;
  write_attack_report_json(report, dir / "attack.json");

  std::ifstream is(dir / "attack.json");
  REQUIRE(is.good());
  auto j = nlohmann::json::parse(is);
  CHECK(j.at("mode") == "itn");
  CHECK(j.at("config_hash") == hash_hex(0xdeadbeef));
  CHECK(j.at("reconstruction").at("mse") == 0.25);
  CHECK(j.at("reconstruction").at("per_image_mse").size() == 2);
  CHECK(j.at("reidentification") == 0.125);
  CHECK(j.at("chance_rate") == 0.1);
  CHECK(j.at("predicted_ids").size() == 2);
  CHECK(j.at("degenerate_gallery") == false);

  ImageBatch originals{random_unit(3, 16, 66)};
  ImageBatch recon{random_unit(3, 16, 67)};
  save_reconstruction_grid(originals, recon, dir / "grid.png", 8);
  auto grid = cv::imread((dir / "grid.png").string());
  REQUIRE_FALSE(grid.empty());
  CHECK(grid.cols == 2 * 16);
  CHECK(grid.rows == 3 * 16);

  CHECK_THROWS_AS(
      save_reconstruction_grid(originals, ImageBatch{random_unit(2, 16, 68)}, dir / "bad.png", 8),
      ShapeError);
  CHECK_THROWS_AS(save_reconstruction_grid(originals, recon, dir / "bad.png", 0),
                  InvalidArgumentError);
}
