#include "privtranslate/trainers.hpp"

#include "privtranslate/checkpoint.hpp"
#include "privtranslate/errors.hpp"
#include "privtranslate/hash.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

namespace privtranslate {

std::string to_string(Framework fw) {
  switch (fw) {
    case Framework::CycleGan: return "cyclegan";
    case Framework::DiscoGan: return "discogan";
    case Framework::TravelGan: return "travelgan";
  }
  return "travelgan";
}

Framework framework_from_string(const std::string& s) {
  if (s == "cyclegan") return Framework::CycleGan;
  if (s == "discogan") return Framework::DiscoGan;
  if (s == "travelgan") return Framework::TravelGan;
  throw InvalidConfigError("unknown framework: " + s);
}

void TrainConfig::validate() const {
  if (epochs < 1) throw InvalidConfigError("epochs must be >= 1");
  if (batch_size < 2) throw InvalidConfigError("batch_size must be >= 2 (pair losses)");
  if (!(learning_rate > 0.0)) throw InvalidConfigError("learning_rate must be > 0");
  if (beta1 < 0.0 || beta1 >= 1.0) throw InvalidConfigError("beta1 must be in [0, 1)");
  if (use_lsgan && use_wgan_gp) {
    throw InvalidConfigError("use_lsgan and use_wgan_gp are mutually exclusive");
  }
  if (checkpoint_every < 0) throw InvalidConfigError("checkpoint_every must be >= 0");
  if (base_channels < 1) throw InvalidConfigError("base_channels must be >= 1");
  if (n_down_blocks < 1) throw InvalidConfigError("n_down_blocks must be >= 1");
  if (n_res_blocks < 0) throw InvalidConfigError("n_res_blocks must be >= 0");
  if (embedding_dim < 1) throw InvalidConfigError("embedding_dim must be >= 1");
  if (critic_steps < 1) throw InvalidConfigError("critic_steps must be >= 1");
  if (!(disc_lr_mult > 0.0)) throw InvalidConfigError("disc_lr_mult must be > 0");
  if (!(collapse_epsilon > 0.0)) throw InvalidConfigError("collapse_epsilon must be > 0");
  if (collapse_window < 1) throw InvalidConfigError("collapse_window must be >= 1");
  loss_weights.validate();
}

uint64_t TrainConfig::hash() const {
  std::ostringstream os;
  os << std::hexfloat;
  os << to_string(framework) << '|' << epochs << '|' << batch_size << '|' << learning_rate << '|'
     << beta1 << '|' << loss_weights.adv << '|' << loss_weights.cycle << '|'
     << loss_weights.feature_match << '|' << loss_weights.gradient_penalty << '|'
     << loss_weights.travel << '|' << loss_weights.siamese_margin << '|' << loss_weights.margin
     << '|' << use_lsgan << use_wgan_gp << use_spectral_norm << use_feature_matching << '|' << seed
     << '|' << checkpoint_every << '|' << base_channels << '|' << n_down_blocks << '|'
     << n_res_blocks << '|' << embedding_dim << '|' << critic_steps << '|' << disc_lr_mult << '|'
     << collapse_epsilon << '|' << collapse_window << '|' << halt_on_collapse;
  return fnv1a64(os.str());
}

std::vector<std::string> TrainHistory::component_names() const {
  std::vector<std::string> names;
  for (const auto& s : steps) {
    for (const auto& [key, value] : s.components) {
      if (std::find(names.begin(), names.end(), key) == names.end()) names.push_back(key);
    }
  }
  return names;
}

void write_history_jsonl(const TrainHistory& history, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  for (const auto& s : history.steps) {
    nlohmann::ordered_json line;
    line["step"] = s.step;
    line["loss_d"] = s.loss_d;
    line["loss_g"] = s.loss_g;
    line["components"] = s.components;
    os << line.dump() << "\n";
  }
  nlohmann::ordered_json tail;
  tail["epoch_seconds"] = history.epoch_seconds;
  if (history.collapsed_at_step.has_value()) {
    tail["collapsed_at_step"] = *history.collapsed_at_step;
  } else {
    tail["collapsed_at_step"] = nullptr;
  }
  os << tail.dump() << "\n";
}

TrainHistory read_history_jsonl(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw NotFoundError("missing history " + path.string());
  TrainHistory history;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    nlohmann::ordered_json j;
    try {
      j = nlohmann::ordered_json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw CorruptCheckpointError("bad history line: " + std::string(e.what()));
    }
    if (j.contains("step")) {
      StepRecord s;
      s.step = j.at("step").get<int64_t>();
      s.loss_d = j.at("loss_d").get<double>();
      s.loss_g = j.at("loss_g").get<double>();
      for (const auto& [key, value] : j.at("components").items()) {
        s.components[key] = value.get<double>();
      }
      history.steps.push_back(std::move(s));
    } else {
      history.epoch_seconds = j.at("epoch_seconds").get<std::vector<double>>();
      if (!j.at("collapsed_at_step").is_null()) {
        history.collapsed_at_step = j.at("collapsed_at_step").get<int64_t>();
      }
    }
  }
  return history;
}

uint64_t TranslationModel::generator_param_hash() const {
  if (generator.is_empty()) throw Error("model has no generator");
  return parameter_hash(*generator);
}

CollapseVerdict detect_mode_collapse(const TrainHistory& history, double epsilon, int window) {
  if (!(epsilon > 0.0)) throw InvalidArgumentError("epsilon must be > 0");
  if (window < 1) throw InvalidArgumentError("window must be >= 1");
  CollapseVerdict verdict;
  int run = 0;
  for (const auto& s : history.steps) {
    run = (s.loss_d < epsilon) ? run + 1 : 0;
    if (run >= window) {
      verdict.collapsed = true;
      verdict.first_offending_step = s.step;
      return verdict;
    }
  }
  return verdict;
}

namespace {

using Clock = std::chrono::steady_clock;

// Deterministic per-epoch batch order: the source permutation is walked once,
// the target permutation is walked with wraparound so every source batch has a
// full-size target batch.
struct EpochPlan {
  std::vector<int64_t> source_order;
  std::vector<int64_t> target_order;

  static EpochPlan make(int64_t n_source, int64_t n_target, uint64_t seed, int epoch) {
    EpochPlan plan;
    plan.source_order.resize(n_source);
    plan.target_order.resize(n_target);
    std::iota(plan.source_order.begin(), plan.source_order.end(), 0);
    std::iota(plan.target_order.begin(), plan.target_order.end(), 0);
    std::mt19937_64 rng_s(derive_seed(seed, "batch-order-source", epoch));
    std::mt19937_64 rng_t(derive_seed(seed, "batch-order-target", epoch));
    std::shuffle(plan.source_order.begin(), plan.source_order.end(), rng_s);
    std::shuffle(plan.target_order.begin(), plan.target_order.end(), rng_t);
    return plan;
  }

  torch::Tensor source_batch(const torch::Tensor& pixels, int64_t step, int64_t batch) const {
    const int64_t begin = step * batch;
    const int64_t end = std::min<int64_t>(begin + batch, source_order.size());
    std::vector<int64_t> idx(source_order.begin() + begin, source_order.begin() + end);
    return pixels.index_select(0, torch::tensor(idx, torch::kLong));
  }

  torch::Tensor target_batch(const torch::Tensor& pixels, int64_t step, int64_t batch,
                             int64_t count) const {
    std::vector<int64_t> idx(static_cast<size_t>(count));
    for (int64_t k = 0; k < count; ++k) {
      idx[k] = target_order[(step * batch + k) % target_order.size()];
    }
    return pixels.index_select(0, torch::tensor(idx, torch::kLong));
  }
};

struct AdvLosses {
  torch::Tensor d;
  torch::Tensor g;
};

AdvLosses adv_pair(const TrainConfig& cfg, const torch::Tensor& d_real,
                   const torch::Tensor& d_fake) {
  if (cfg.use_wgan_gp) {
    auto [d, g] = wgan_loss(d_real, d_fake);
    return {d, g};
  }
  if (cfg.use_lsgan) {
    auto [d, g] = lsgan_loss(d_real, d_fake);
    return {d, g};
  }
  auto [d, g] = adv_loss_minimax(d_real, d_fake);
  return {d, g};
}

// Generator-side adversarial loss only (detached from the D graph by design).
torch::Tensor adv_g_only(const TrainConfig& cfg, const torch::Tensor& d_fake) {
  if (cfg.use_wgan_gp) return -d_fake.mean();
  if (cfg.use_lsgan) return 0.5 * (d_fake - 1.0).pow(2).mean();
  auto p = torch::sigmoid(d_fake).clamp(1e-8, 1.0 - 1e-8);
  return -p.log().mean();
}

void check_domains(const DomainDataset& source, const DomainDataset& target) {
  source.validate();
  target.validate();
  if (source.domain_tag == target.domain_tag) {
    throw InvalidDomainError("source and target share domain tag " + source.domain_tag);
  }
  if (source.images.height() != target.images.height() ||
      source.images.width() != target.images.width()) {
    throw ShapeError("source and target image sizes differ");
  }
}

NetworkSpec make_spec(const TrainConfig& cfg, NetworkKind kind, int input_size, uint64_t seed) {
  NetworkSpec spec;
  spec.kind = kind;
  spec.input_size = input_size;
  spec.base_channels = cfg.base_channels;
  spec.n_down_blocks = cfg.n_down_blocks;
  spec.n_res_blocks = cfg.n_res_blocks;
  spec.embedding_dim = cfg.embedding_dim;
  spec.use_spectral_norm = (kind == NetworkKind::Discriminator) && cfg.use_spectral_norm;
  spec.seed = seed;
  return spec;
}

double finite_or_throw(const torch::Tensor& loss, const char* what, int64_t step) {
  const double v = loss.item<double>();
  if (!std::isfinite(v)) {
    throw NumericError(std::string(what) + " is not finite at step " + std::to_string(step));
  }
  return v;
}

struct StepState {
  TrainHistory history;
  int collapse_run = 0;
  double last_loss_g = 0.0;

  // Returns true when training should halt.
  bool record(const TrainConfig& cfg, int64_t step, double loss_d, double loss_g,
              std::map<std::string, double> components) {
    StepRecord rec;
    rec.step = step;
    rec.loss_d = loss_d;
    rec.loss_g = loss_g;
    rec.components = std::move(components);
    history.steps.push_back(std::move(rec));
    collapse_run = (loss_d < cfg.collapse_epsilon) ? collapse_run + 1 : 0;
    if (collapse_run >= cfg.collapse_window && !history.collapsed_at_step.has_value()) {
      history.collapsed_at_step = step;
      if (cfg.halt_on_collapse) return true;
    }
    return false;
  }
};

// Retains the most recent cadence checkpoint plus the best epoch by mean
// generator loss.
void maybe_checkpoint(const TrainConfig& cfg, const TranslationModel& model, int epoch,
                      double epoch_mean_loss_g, double& best_loss_g) {
  if (cfg.checkpoint_dir.empty() || cfg.checkpoint_every == 0) return;
  if ((epoch + 1) % cfg.checkpoint_every != 0) return;
  save_model(model, cfg.checkpoint_dir / "last");
  if (epoch_mean_loss_g < best_loss_g) {
    best_loss_g = epoch_mean_loss_g;
    save_model(model, cfg.checkpoint_dir / "best");
  }
}

double mean_loss_g_since(const TrainHistory& history, size_t first_step_index) {
  if (history.steps.size() <= first_step_index) return std::numeric_limits<double>::infinity();
  double sum = 0.0;
  for (size_t i = first_step_index; i < history.steps.size(); ++i) sum += history.steps[i].loss_g;
  return sum / static_cast<double>(history.steps.size() - first_step_index);
}

int64_t steps_per_epoch(int64_t n, int64_t batch) { return (n + batch - 1) / batch; }

// Shared loop for the two dual-generator frameworks; DiscoGAN differs from
// CycleGAN only in its L2 reconstruction term and key name.
TrainResult train_dual(const DomainDataset& source, const DomainDataset& target,
                       const TrainConfig& config, bool l2_recon) {
  config.validate();
  check_domains(source, target);
  const int input_size = static_cast<int>(source.images.height());
  const auto& w = config.loss_weights;

  auto g_ab = build_generator(
      make_spec(config, NetworkKind::Generator, input_size, derive_seed(config.seed, "generator-ab")));
  auto g_ba = build_generator(
      make_spec(config, NetworkKind::Generator, input_size, derive_seed(config.seed, "generator-ba")));
  auto d_a = build_discriminator(make_spec(config, NetworkKind::Discriminator, input_size,
                                           derive_seed(config.seed, "discriminator-a")));
  auto d_b = build_discriminator(make_spec(config, NetworkKind::Discriminator, input_size,
                                           derive_seed(config.seed, "discriminator-b")));
  torch::manual_seed(derive_seed(config.seed, "train"));

  std::vector<torch::Tensor> g_params = g_ab->parameters();
  for (auto& p : g_ba->parameters()) g_params.push_back(p);
  std::vector<torch::Tensor> d_params = d_a->parameters();
  for (auto& p : d_b->parameters()) d_params.push_back(p);
  torch::optim::Adam opt_g(g_params,
                           torch::optim::AdamOptions(config.learning_rate).betas({config.beta1, 0.999}));
  torch::optim::Adam opt_d(d_params, torch::optim::AdamOptions(config.learning_rate * config.disc_lr_mult)
                                         .betas({config.beta1, 0.999}));

  TranslationModel model;
  model.generator = g_ab;
  model.reverse_generator = g_ba;
  model.framework = l2_recon ? Framework::DiscoGan : Framework::CycleGan;
  model.source_tag = source.domain_tag;
  model.target_tag = target.domain_tag;
  model.config_hash = config.hash();
  model.seed = config.seed;

  const char* recon_key = l2_recon ? "recon" : "cycle";
  StepState state;
  int64_t step = 0;
  bool halted = false;
  double best_loss_g = std::numeric_limits<double>::infinity();
  const int64_t n_steps = steps_per_epoch(source.count(), config.batch_size);

  for (int epoch = 0; epoch < config.epochs && !halted; ++epoch) {
    const auto t0 = Clock::now();
    const size_t epoch_first_step = state.history.steps.size();
    auto plan = EpochPlan::make(source.count(), target.count(), config.seed, epoch);
    for (int64_t s = 0; s < n_steps && !halted; ++s) {
      ++step;
      auto x = plan.source_batch(source.images.pixels, s, config.batch_size);
      auto y = plan.target_batch(target.images.pixels, s, config.batch_size, x.size(0));

      auto fake_y = g_ab->forward(x);
      auto fake_x = g_ba->forward(y);

      // Generator update.
      const bool g_turn = !config.use_wgan_gp || (step % config.critic_steps == 0);
      std::map<std::string, double> comps;
      if (g_turn) {
        auto rec_x = g_ba->forward(fake_y);
        auto rec_y = g_ab->forward(fake_x);
        auto adv_g = adv_g_only(config, d_b->forward(fake_y)) +
                     adv_g_only(config, d_a->forward(fake_x));
        auto recon = l2_recon
                         ? (x - rec_x).pow(2).mean() + (y - rec_y).pow(2).mean()
                         : cycle_loss(x, rec_x) + cycle_loss(y, rec_y);
        auto loss_g = w.adv * adv_g + w.cycle * recon;
        if (config.use_feature_matching) {
          auto [score_real_y, feats_real_y] = d_b->forward_features(y);
          auto [score_fake_y, feats_fake_y] = d_b->forward_features(fake_y);
          auto [score_real_x, feats_real_x] = d_a->forward_features(x);
          auto [score_fake_x, feats_fake_x] = d_a->forward_features(fake_x);
          auto fm = feature_matching_loss(feats_real_y, feats_fake_y) +
                    feature_matching_loss(feats_real_x, feats_fake_x);
          loss_g = loss_g + w.feature_match * fm;
          comps["fm"] = finite_or_throw(fm, "feature matching loss", step);
        }
        opt_g.zero_grad();
        loss_g.backward();
        opt_g.step();
        state.last_loss_g = finite_or_throw(loss_g, "generator loss", step);
        comps["adv_g"] = finite_or_throw(adv_g, "adversarial G loss", step);
        comps[recon_key] = finite_or_throw(recon, "reconstruction loss", step);
      }

      // Discriminator update.
      auto adv_a = adv_pair(config, d_a->forward(x), d_a->forward(fake_x.detach()));
      auto adv_b = adv_pair(config, d_b->forward(y), d_b->forward(fake_y.detach()));
      auto loss_d = 0.5 * (adv_a.d + adv_b.d);
      const double loss_d_val = finite_or_throw(loss_d, "discriminator loss", step);
      if (config.use_wgan_gp) {
        auto gp_a = gradient_penalty([&](const torch::Tensor& t) { return d_a->forward(t); }, x,
                                     fake_x.detach(), w.gradient_penalty);
        auto gp_b = gradient_penalty([&](const torch::Tensor& t) { return d_b->forward(t); }, y,
                                     fake_y.detach(), w.gradient_penalty);
        comps["gp"] = finite_or_throw(gp_a + gp_b, "gradient penalty", step);
        loss_d = loss_d + 0.5 * (gp_a + gp_b);
      }
      opt_d.zero_grad();
      loss_d.backward();
      opt_d.step();

      comps["adv_d"] = loss_d_val;
      halted = state.record(config, step, loss_d_val, state.last_loss_g, std::move(comps));
    }
    state.history.epoch_seconds.push_back(
        std::chrono::duration<double>(Clock::now() - t0).count());
    maybe_checkpoint(config, model, epoch, mean_loss_g_since(state.history, epoch_first_step),
                     best_loss_g);
  }

  TrainResult result;
  result.model = std::move(model);
  result.history = std::move(state.history);
  result.discriminators = {d_a, d_b};
  return result;
}

}  // namespace

TrainResult train_cyclegan(const DomainDataset& source, const DomainDataset& target,
                           const TrainConfig& config) {
  if (config.framework != Framework::CycleGan) {
    throw InvalidConfigError("config.framework must be cyclegan");
  }
  return train_dual(source, target, config, /*l2_recon=*/false);
}

TrainResult train_discogan(const DomainDataset& source, const DomainDataset& target,
                           const TrainConfig& config) {
  if (config.framework != Framework::DiscoGan) {
    throw InvalidConfigError("config.framework must be discogan");
  }
  return train_dual(source, target, config, /*l2_recon=*/true);
}

TrainResult train_travelgan(const DomainDataset& source, const DomainDataset& target,
                            const TrainConfig& config) {
  if (config.framework != Framework::TravelGan) {
    throw InvalidConfigError("config.framework must be travelgan");
  }
  config.validate();
  check_domains(source, target);
  const int input_size = static_cast<int>(source.images.height());
  const auto& w = config.loss_weights;

  auto gen = build_generator(
      make_spec(config, NetworkKind::Generator, input_size, derive_seed(config.seed, "generator-ab")));
  auto disc = build_discriminator(make_spec(config, NetworkKind::Discriminator, input_size,
                                            derive_seed(config.seed, "discriminator-b")));
  auto siam = build_siamese(
      make_spec(config, NetworkKind::Siamese, input_size, derive_seed(config.seed, "siamese")));
  torch::manual_seed(derive_seed(config.seed, "train"));

  torch::optim::Adam opt_g(gen->parameters(),
                           torch::optim::AdamOptions(config.learning_rate).betas({config.beta1, 0.999}));
  torch::optim::Adam opt_s(siam->parameters(),
                           torch::optim::AdamOptions(config.learning_rate).betas({config.beta1, 0.999}));
  torch::optim::Adam opt_d(disc->parameters(),
                           torch::optim::AdamOptions(config.learning_rate * config.disc_lr_mult)
                               .betas({config.beta1, 0.999}));

  TranslationModel model;
  model.generator = gen;
  model.framework = Framework::TravelGan;
  model.source_tag = source.domain_tag;
  model.target_tag = target.domain_tag;
  model.config_hash = config.hash();
  model.seed = config.seed;

  StepState state;
  int64_t step = 0;
  bool halted = false;
  double best_loss_g = std::numeric_limits<double>::infinity();
  const int64_t n_steps = steps_per_epoch(source.count(), config.batch_size);

  for (int epoch = 0; epoch < config.epochs && !halted; ++epoch) {
    const auto t0 = Clock::now();
    const size_t epoch_first_step = state.history.steps.size();
    auto plan = EpochPlan::make(source.count(), target.count(), config.seed, epoch);
    for (int64_t s = 0; s < n_steps && !halted; ++s) {
      ++step;
      auto x = plan.source_batch(source.images.pixels, s, config.batch_size);
      auto y = plan.target_batch(target.images.pixels, s, config.batch_size, x.size(0));

      auto fake_y = gen->forward(x);

      const bool g_turn = !config.use_wgan_gp || (step % config.critic_steps == 0);
      std::map<std::string, double> comps;
      if (g_turn) {
        auto adv_g = adv_g_only(config, disc->forward(fake_y));
        auto loss_gs = w.adv * adv_g;
        comps["adv_g"] = finite_or_throw(adv_g, "adversarial G loss", step);
        // The transformation-vector terms need at least one pair; a trailing
        // singleton batch trains on the adversarial term alone.
        if (x.size(0) >= 2) {
          auto emb_x = siam->forward(x);
          auto emb_fake = siam->forward(fake_y);
          auto travel = travel_loss_from_embeddings(emb_x, emb_fake);
          auto margin = siamese_margin_loss_from_embeddings(emb_x, w.margin);
          loss_gs = loss_gs + w.travel * travel + w.siamese_margin * margin;
          comps["travel"] = finite_or_throw(travel, "travel loss", step);
          comps["margin"] = finite_or_throw(margin, "margin loss", step);
        } else {
          comps["travel"] = 0.0;
          comps["margin"] = 0.0;
        }
        if (config.use_feature_matching) {
          auto [score_real, feats_real] = disc->forward_features(y);
          auto [score_fake, feats_fake] = disc->forward_features(fake_y);
          auto fm = feature_matching_loss(feats_real, feats_fake);
          loss_gs = loss_gs + w.feature_match * fm;
          comps["fm"] = finite_or_throw(fm, "feature matching loss", step);
        }
        opt_g.zero_grad();
        opt_s.zero_grad();
        loss_gs.backward();
        opt_g.step();
        opt_s.step();
        state.last_loss_g = finite_or_throw(loss_gs, "generator loss", step);
      }

      auto adv = adv_pair(config, disc->forward(y), disc->forward(fake_y.detach()));
      auto loss_d = adv.d;
      const double loss_d_val = finite_or_throw(loss_d, "discriminator loss", step);
      if (config.use_wgan_gp) {
        auto gp = gradient_penalty([&](const torch::Tensor& t) { return disc->forward(t); }, y,
                                   fake_y.detach(), w.gradient_penalty);
        comps["gp"] = finite_or_throw(gp, "gradient penalty", step);
        loss_d = loss_d + gp;
      }
      opt_d.zero_grad();
      loss_d.backward();
      opt_d.step();

      comps["adv_d"] = loss_d_val;
      halted = state.record(config, step, loss_d_val, state.last_loss_g, std::move(comps));
    }
    state.history.epoch_seconds.push_back(
        std::chrono::duration<double>(Clock::now() - t0).count());
    maybe_checkpoint(config, model, epoch, mean_loss_g_since(state.history, epoch_first_step),
                     best_loss_g);
  }

  TrainResult result;
  result.model = std::move(model);
  result.history = std::move(state.history);
  result.siamese = siam;
  result.discriminators = {disc};
  return result;
}

TrainResult train_gan(const DomainDataset& source, const DomainDataset& target,
                      const TrainConfig& config) {
  switch (config.framework) {
    case Framework::CycleGan: return train_cyclegan(source, target, config);
    case Framework::DiscoGan: return train_discogan(source, target, config);
    case Framework::TravelGan: return train_travelgan(source, target, config);
  }
  throw InvalidConfigError("unknown framework");
}

namespace {

nlohmann::ordered_json spec_to_json(const NetworkSpec& spec) {
  nlohmann::ordered_json j;
  j["kind"] = to_string(spec.kind);
  j["input_size"] = spec.input_size;
  j["base_channels"] = spec.base_channels;
  j["n_down_blocks"] = spec.n_down_blocks;
  j["n_res_blocks"] = spec.n_res_blocks;
  j["embedding_dim"] = spec.embedding_dim;
  j["use_spectral_norm"] = spec.use_spectral_norm;
  j["use_instance_norm"] = spec.use_instance_norm;
  j["seed"] = spec.seed;
  return j;
}

NetworkSpec spec_from_json(const nlohmann::ordered_json& j) {
  NetworkSpec spec;
  spec.kind = network_kind_from_string(j.at("kind").get<std::string>());
  spec.input_size = j.at("input_size").get<int>();
  spec.base_channels = j.at("base_channels").get<int>();
  spec.n_down_blocks = j.at("n_down_blocks").get<int>();
  spec.n_res_blocks = j.at("n_res_blocks").get<int>();
  spec.embedding_dim = j.at("embedding_dim").get<int>();
  spec.use_spectral_norm = j.at("use_spectral_norm").get<bool>();
  spec.use_instance_norm = j.value("use_instance_norm", true);
  spec.seed = j.at("seed").get<uint64_t>();
  return spec;
}

}  // namespace

void save_model(const TranslationModel& model, const std::filesystem::path& dir) {
  if (model.generator.is_empty()) throw Error("model has no generator");
  NamedTensors tensors = named_state(*model.generator, "generator.");
  nlohmann::ordered_json extra;
  extra["model_format"] = "privtranslate-model";
  extra["framework"] = to_string(model.framework);
  extra["source_tag"] = model.source_tag;
  extra["target_tag"] = model.target_tag;
  extra["config_hash"] = hash_hex(model.config_hash);
  extra["seed"] = model.seed;
  extra["generator_spec"] = spec_to_json(model.generator->spec);
  if (model.reverse_generator.has_value()) {
    auto rev = named_state(**model.reverse_generator, "reverse_generator.");
    tensors.insert(tensors.end(), rev.begin(), rev.end());
    extra["reverse_generator_spec"] = spec_to_json((*model.reverse_generator)->spec);
  }
  extra["param_hash"] = hash_hex(tensors_hash(tensors));
  save_named_tensors(tensors, dir, extra);
}

TranslationModel load_model(const std::filesystem::path& dir) {
  auto loaded = load_named_tensors(dir);
  const auto& meta = loaded.meta;
  if (!meta.contains("model_format") ||
      meta.at("model_format").get<std::string>() != "privtranslate-model") {
    throw CorruptCheckpointError("not a model checkpoint: " + dir.string());
  }
  TranslationModel model;
  model.framework = framework_from_string(meta.at("framework").get<std::string>());
  model.source_tag = meta.at("source_tag").get<std::string>();
  model.target_tag = meta.at("target_tag").get<std::string>();
  model.config_hash = std::stoull(meta.at("config_hash").get<std::string>(), nullptr, 16);
  model.seed = meta.at("seed").get<uint64_t>();
  model.generator = build_generator(spec_from_json(meta.at("generator_spec")));
  load_state_into(*model.generator, loaded.tensors, "generator.");
  if (meta.contains("reverse_generator_spec")) {
    auto rev = build_generator(spec_from_json(meta.at("reverse_generator_spec")));
    load_state_into(*rev, loaded.tensors, "reverse_generator.");
    model.reverse_generator = rev;
  }
  if (meta.contains("param_hash") &&
      meta.at("param_hash").get<std::string>() != hash_hex(tensors_hash(loaded.tensors))) {
    throw CorruptCheckpointError("model parameter hash mismatch");
  }
  return model;
}

}  // namespace privtranslate
