#include "privtranslate/losses.hpp"

#include <torch/torch.h>

#include <cmath>
#include <vector>

#include "privtranslate/errors.hpp"

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

using namespace privtranslate;

namespace {

torch::Tensor d64(const std::vector<double>& v) { return torch::tensor(v, torch::kFloat64); }

double item(const torch::Tensor& t) { return t.item<double>(); }

constexpr double kTol = 1e-9;

}  // namespace

TEST_CASE("minimax adversarial loss matches closed forms") {
  auto zeros = torch::zeros({4}, torch::kFloat64);
  auto [d0, g0] = adv_loss_minimax(zeros, zeros);
  CHECK(item(d0) == doctest::Approx(2.0 * std::log(2.0)).epsilon(kTol));
  CHECK(item(g0) == doctest::Approx(std::log(2.0)).epsilon(kTol));

  auto [d1, g1] = adv_loss_minimax(d64({1.0}), d64({-1.0}));
  CHECK(item(d1) == doctest::Approx(0.6265233750364456).epsilon(kTol));
  CHECK(item(g1) == doctest::Approx(1.3132616875182228).epsilon(kTol));

  auto [d2, g2] = adv_loss_minimax(d64({60.0}), d64({-60.0}));
  CHECK(item(d2) < 1e-6);
  CHECK(item(d2) >= 0.0);

  auto [d3, g3] = adv_loss_minimax(d64({-100.0}), d64({100.0}));
  CHECK(std::isfinite(item(d3)));
  CHECK(std::isfinite(item(g3)));
}

TEST_CASE("least-squares adversarial loss matches closed forms") {
  auto [d0, g0] = lsgan_loss(d64({1.0}), d64({0.0}));
  CHECK(item(d0) == doctest::Approx(0.0).epsilon(kTol));
  CHECK(item(g0) == doctest::Approx(0.5).epsilon(kTol));

  auto [d1, g1] = lsgan_loss(d64({1.0}), d64({1.0}));
  CHECK(item(g1) == doctest::Approx(0.0).epsilon(kTol));

  auto [d2, g2] = lsgan_loss(d64({0.5}), d64({0.5}));
  CHECK(item(d2) == doctest::Approx(0.25).epsilon(kTol));
  CHECK(item(g2) == doctest::Approx(0.125).epsilon(kTol));
}

TEST_CASE("wasserstein loss matches closed forms") {
  auto [d, g] = wgan_loss(d64({2.0}), d64({0.5}));
  CHECK(item(d) == doctest::Approx(-1.5).epsilon(kTol));
  CHECK(item(g) == doctest::Approx(-0.5).epsilon(kTol));
}

TEST_CASE("cycle loss is the mean absolute difference") {
  auto x = torch::rand({2, 3, 4, 4}, torch::kFloat64);
  CHECK(item(cycle_loss(x, x)) == doctest::Approx(0.0).epsilon(kTol));
  CHECK(item(cycle_loss(torch::zeros({2, 2}, torch::kFloat64),
                        torch::ones({2, 2}, torch::kFloat64))) ==
        doctest::Approx(1.0).epsilon(kTol));

  auto a = torch::tensor({{0.0, 1.0}, {1.0, 0.0}}, torch::kFloat64);
  auto b = torch::tensor({{1.0, 1.0}, {0.0, 0.0}}, torch::kFloat64);
  CHECK(item(cycle_loss(a, b)) == doctest::Approx(0.5).epsilon(kTol));

  CHECK_THROWS_AS(cycle_loss(torch::zeros({2, 2}), torch::zeros({2, 3})), ShapeError);
}

TEST_CASE("feature matching sums L2 gaps of batch means") {
  std::vector<torch::Tensor> same = {torch::rand({3, 4}, torch::kFloat64)};
  CHECK(item(feature_matching_loss(same, same)) == doctest::Approx(0.0).epsilon(kTol));

  std::vector<torch::Tensor> real = {torch::zeros({2, 1}, torch::kFloat64)};
  std::vector<torch::Tensor> fake = {torch::full({2, 1}, 3.0, torch::kFloat64)};
  CHECK(item(feature_matching_loss(real, fake)) == doctest::Approx(3.0).epsilon(kTol));

  std::vector<torch::Tensor> real2 = {torch::zeros({2, 1}, torch::kFloat64),
                                      torch::zeros({2, 2}, torch::kFloat64)};
  std::vector<torch::Tensor> fake2 = {
      torch::full({2, 1}, 3.0, torch::kFloat64),
      torch::tensor({{0.0, 4.0}, {0.0, 4.0}}, torch::kFloat64)};
  CHECK(item(feature_matching_loss(real2, fake2)) == doctest::Approx(7.0).epsilon(kTol));

  CHECK_THROWS_AS(feature_matching_loss(real2, fake), ShapeError);
  CHECK_THROWS_AS(feature_matching_loss({}, {}), ShapeError);
}

TEST_CASE("gradient penalty matches analytic norms") {
  auto sum_d = [](const torch::Tensor& x) { return x.reshape({x.size(0), -1}).sum(1); };
  auto real1 = torch::rand({3, 1, 1, 1}, torch::kFloat64);
  auto fake1 = torch::rand({3, 1, 1, 1}, torch::kFloat64);
  CHECK(item(gradient_penalty(sum_d, real1, fake1, 10.0)) == doctest::Approx(0.0).epsilon(kTol));

  auto twice_d = [](const torch::Tensor& x) { return 2.0 * x.reshape({x.size(0), -1}).sum(1); };
  CHECK(item(gradient_penalty(twice_d, real1, fake1, 10.0)) ==
        doctest::Approx(10.0).epsilon(kTol));

  auto w = torch::tensor({1.0, 2.0, 2.0}, torch::kFloat64).reshape({1, 3, 1, 1});
  auto weighted_d = [&](const torch::Tensor& x) {
    return (x * w).reshape({x.size(0), -1}).sum(1);
  };
  auto real3 = torch::rand({2, 3, 1, 1}, torch::kFloat64);
  auto fake3 = torch::rand({2, 3, 1, 1}, torch::kFloat64);
  CHECK(item(gradient_penalty(weighted_d, real3, fake3, 10.0)) ==
        doctest::Approx(40.0).epsilon(kTol));
}

TEST_CASE("gradient penalty interpolates toward real by eps") {
  auto square_d = [](const torch::Tensor& x) {
    return x.pow(2).reshape({x.size(0), -1}).sum(1);
  };
  auto real = torch::zeros({1, 1, 1, 1}, torch::kFloat64);
  auto fake = torch::full({1, 1, 1, 1}, 2.0, torch::kFloat64);
  auto eps = torch::tensor({0.25}, torch::kFloat64);
  // x_hat = 0.25 * 0 + 0.75 * 2 = 1.5; grad = 2 * x_hat = 3; (3 - 1)^2 * 10 = 40.
  CHECK(item(gradient_penalty(square_d, real, fake, 10.0, eps)) ==
        doctest::Approx(40.0).epsilon(kTol));
}

TEST_CASE("gradient penalty rejects non-differentiable discriminators") {
  auto detached = [](const torch::Tensor& x) { return x.detach().sum(); };
  auto real = torch::rand({2, 1, 1, 1}, torch::kFloat64);
  auto fake = torch::rand({2, 1, 1, 1}, torch::kFloat64);
  CHECK_THROWS_AS(gradient_penalty(detached, real, fake, 10.0), UnsupportedModelError);
}

TEST_CASE("travel loss matches hand-computed pairs") {
  auto s = torch::rand({4, 8}, torch::kFloat64);
  CHECK(item(travel_loss_from_embeddings(s, s)) == doctest::Approx(0.0).epsilon(kTol));

  auto shifted = s + 3.5;
  CHECK(item(travel_loss_from_embeddings(s, shifted)) == doctest::Approx(0.0).epsilon(kTol));

  auto src = torch::tensor({{0.0, 0.0}, {1.0, 0.0}}, torch::kFloat64);
  auto dst = torch::tensor({{0.0, 0.0}, {0.0, 1.0}}, torch::kFloat64);
  CHECK(item(travel_loss_from_embeddings(src, dst)) ==
        doctest::Approx(1.0 + std::sqrt(2.0)).epsilon(kTol));

  CHECK_THROWS_AS(travel_loss_from_embeddings(s.slice(0, 0, 1), s.slice(0, 0, 1)),
                  TooFewSamplesError);
  CHECK_THROWS_AS(travel_loss_from_embeddings(s.flatten(), s.flatten()), ShapeError);
}

TEST_CASE("travel loss is invariant to reindexing the batch") {
  torch::manual_seed(42);
  auto s = torch::randn({6, 8}, torch::kFloat64);
  auto t = torch::randn({6, 8}, torch::kFloat64);
  const double base = item(travel_loss_from_embeddings(s, t));
  for (int trial = 0; trial < 20; ++trial) {
    auto perm = torch::randperm(6);
    const double shuffled =
        item(travel_loss_from_embeddings(s.index_select(0, perm), t.index_select(0, perm)));
    CHECK(shuffled == doctest::Approx(base).epsilon(1e-9));
  }
}

TEST_CASE("siamese margin loss hinges below the margin") {
  auto spread = torch::tensor({{0.0}, {100.0}, {250.0}}, torch::kFloat64);
  CHECK(item(siamese_margin_loss_from_embeddings(spread, 10.0)) ==
        doctest::Approx(0.0).epsilon(kTol));

  auto same = torch::zeros({2, 3}, torch::kFloat64);
  CHECK(item(siamese_margin_loss_from_embeddings(same, 10.0)) ==
        doctest::Approx(10.0).epsilon(kTol));

  // Pair distances 4 and 12 against margin 10 hinge to 6 and 0.
  auto near = torch::tensor({{0.0}, {4.0}}, torch::kFloat64);
  auto far = torch::tensor({{0.0}, {12.0}}, torch::kFloat64);
  CHECK(item(siamese_margin_loss_from_embeddings(near, 10.0)) ==
        doctest::Approx(6.0).epsilon(kTol));
  CHECK(item(siamese_margin_loss_from_embeddings(far, 10.0)) ==
        doctest::Approx(0.0).epsilon(kTol));

  CHECK_THROWS_AS(siamese_margin_loss_from_embeddings(same, -1.0), InvalidArgumentError);
  CHECK_THROWS_AS(siamese_margin_loss_from_embeddings(same, std::nan("")),
                  InvalidArgumentError);
}

TEST_CASE("functional wrappers agree with the embedding forms") {
  torch::manual_seed(7);
  auto inputs = torch::randn({3, 2, 2, 2}, torch::kFloat64);
  auto translated = torch::randn({3, 2, 2, 2}, torch::kFloat64);
  auto flatten = [](const torch::Tensor& x) { return x.reshape({x.size(0), -1}); };

  CHECK(item(travel_loss(flatten, inputs, translated)) ==
        doctest::Approx(item(travel_loss_from_embeddings(flatten(inputs), flatten(translated))))
            .epsilon(kTol));
  CHECK(item(siamese_margin_loss(flatten, inputs, 5.0)) ==
        doctest::Approx(item(siamese_margin_loss_from_embeddings(flatten(inputs), 5.0)))
            .epsilon(kTol));
}

TEST_CASE("loss weights reject negative or non-finite values") {
  LossWeights ok;
  CHECK_NOTHROW(ok.validate());
  LossWeights negative;
  negative.adv = -1.0;
  CHECK_THROWS_AS(negative.validate(), InvalidConfigError);
  LossWeights infinite;
  infinite.travel = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(infinite.validate(), InvalidConfigError);
}
