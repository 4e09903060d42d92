#include "privtranslate/experiment.hpp"

#include "privtranslate/attack.hpp"
#include "privtranslate/authclass.hpp"
#include "privtranslate/checkpoint.hpp"
#include "privtranslate/data.hpp"
#include "privtranslate/errors.hpp"
#include "privtranslate/hash.hpp"
#include "privtranslate/trainers.hpp"
#include "privtranslate/translate.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <map>
#include <utility>

namespace privtranslate {

namespace {

using Clock = std::chrono::steady_clock;
namespace fs = std::filesystem;

json load_json_file_impl(const fs::path& path, const char* what) {
  std::ifstream is(path);
  if (!is) throw NotFoundError(std::string("missing ") + what + ": " + path.string());
  try {
    json j;
    is >> j;
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidConfigError("unreadable " + path.string() + ": " + e.what());
  }
}

void write_json_file(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  os << j.dump(2) << "\n";
}

void overlay(json& base, const json& user) {
  for (const auto& [key, value] : user.items()) {
    if (base.contains(key) && base[key].is_object() && value.is_object()) {
      overlay(base[key], value);
    } else {
      base[key] = value;
    }
  }
}

}  // namespace

json default_config() {
  json c;
  c["experiment_id"] = "desk";
  c["seed"] = 7;
  c["jobs"] = 1;
  c["data"] = {
      {"source", "synth"},  // synth | folder
      {"size", 64},
      {"face_tag", "faceoid"},
      {"target_tag", "flowroid"},
      {"gan_faces", {{"identities", 20}, {"per_identity", 10}}},
      {"gan_targets", {{"identities", 20}, {"per_identity", 10}}},
      {"users",
       {{"identities", 10},
        {"per_identity", 5},
        {"augment_copies", 2},
        {"augment",
         {{"max_rotation_deg", 5.0},
          {"hue_shift_range", 0.05},
          {"zoom_range", 0.08},
          {"background_jitter", 0.04}}}}},
      {"negatives", {{"identities", 40}, {"per_identity", 10}}},
      {"aux", {{"identities_per_domain", 10}, {"per_identity", 10}}},
      {"attacker", {{"identities", 8}, {"per_identity", 12}}},
      {"folder",
       {{"faces_dir", ""},
        {"targets_dir", ""},
        {"negatives_dir", ""},
        {"aux_dir", ""},
        {"attacker_dir", ""}}},
  };
  c["gan"] = {
      {"framework", "travelgan"},
      {"epochs", 30},
      {"batch_size", 16},
      {"learning_rate", 2e-4},
      {"beta1", 0.5},
      {"use_lsgan", false},
      {"use_wgan_gp", false},
      {"use_spectral_norm", false},
      {"use_feature_matching", false},
      {"base_channels", 16},
      {"n_down_blocks", 2},
      {"n_res_blocks", 2},
      {"embedding_dim", 128},
      {"critic_steps", 5},
      {"disc_lr_mult", 1.0},
      {"collapse_epsilon", 1e-3},
      {"collapse_window", 100},
      {"halt_on_collapse", false},
      {"checkpoint_every", 10},
      {"weights",
       {{"adv", 1.0},
        {"cycle", 10.0},
        {"feature_match", 1.0},
        {"gradient_penalty", 10.0},
        {"travel", 10.0},
        {"siamese_margin", 10.0},
        {"margin", 10.0}}},
  };
  c["translate"] = {{"inputs", json::array({"users", "negatives"})}, {"grid_images", 16}};
  c["consistency"] = {{"similarity", "ssim"}, {"max_cross_pairs", 2000}};
  c["classify"] = {
      {"backbone_modes", json::array({"frozen", "trainable"})},
      {"epochs", 15},
      {"threshold", 0.7},
      {"learning_rate", 1e-3},
      {"negatives_per_positive", 4},
      {"k_folds", 5},
      {"backbone",
       {{"epochs", 10},
        {"batch_size", 32},
        {"learning_rate", 1e-3},
        {"base_channels", 16},
        {"n_down_blocks", 3},
        {"embedding_dim", 64}}},
  };
  c["attack"] = {
      {"mode", "itn"},
      {"epochs", 10},
      {"batch_size", 16},
      {"learning_rate", 1e-3},
      {"reconstruction_loss", "l1"},
      {"framework", "travelgan"},
      {"base_channels", 16},
      {"n_down_blocks", 2},
      {"n_res_blocks", 2},
      {"grid_pairs", 8},
  };
  c["paths"] = {{"data", ""}, {"model", ""}, {"translated", ""}, {"backbone", ""}};
  return c;
}

json load_config_file(const std::filesystem::path& path) {
  json user = load_json_file_impl(path, "config");
  if (!user.is_object()) throw InvalidConfigError("config root must be an object");
  json merged = default_config();
  overlay(merged, user);
  return merged;
}

namespace {

const char* kind_name(const json& j) {
  if (j.is_object()) return "object";
  if (j.is_array()) return "array";
  if (j.is_string()) return "string";
  if (j.is_boolean()) return "boolean";
  if (j.is_number_integer() || j.is_number_unsigned()) return "integer";
  if (j.is_number_float()) return "number";
  if (j.is_null()) return "null";
  return "value";
}

void check_schema(const json& value, const json& schema, const std::string& path,
                  std::vector<std::string>& errors) {
  if (schema.is_object()) {
    if (!value.is_object()) {
      errors.push_back(path + ": expected object, got " + kind_name(value));
      return;
    }
    for (const auto& [key, sub] : value.items()) {
      const std::string sub_path = path.empty() ? key : path + "." + key;
      if (!schema.contains(key)) {
        errors.push_back(sub_path + ": unknown field");
        continue;
      }
      check_schema(sub, schema.at(key), sub_path, errors);
    }
    return;
  }
  if (schema.is_array()) {
    if (!value.is_array()) {
      errors.push_back(path + ": expected array, got " + kind_name(value));
    }
    return;
  }
  if (schema.is_string() && !value.is_string()) {
    errors.push_back(path + ": expected string, got " + kind_name(value));
  } else if (schema.is_boolean() && !value.is_boolean()) {
    errors.push_back(path + ": expected boolean, got " + kind_name(value));
  } else if ((schema.is_number_integer() || schema.is_number_unsigned()) &&
             !(value.is_number_integer() || value.is_number_unsigned())) {
    errors.push_back(path + ": expected integer, got " + kind_name(value));
  } else if (schema.is_number_float() && !value.is_number()) {
    errors.push_back(path + ": expected number, got " + kind_name(value));
  }
}

struct Checker {
  const json& c;
  std::vector<std::string>& errors;

  const json* at(const std::string& dotted) const {
    const json* cur = &c;
    size_t begin = 0;
    while (begin <= dotted.size()) {
      const size_t dot = dotted.find('.', begin);
      const std::string key = dotted.substr(begin, dot == std::string::npos ? dot : dot - begin);
      if (!cur->is_object() || !cur->contains(key)) return nullptr;
      cur = &cur->at(key);
      if (dot == std::string::npos) break;
      begin = dot + 1;
    }
    return cur;
  }

  void require(const std::string& path, bool ok, const std::string& message) const {
    if (!ok) errors.push_back(path + ": " + message);
  }

  void int_min(const std::string& path, int64_t min) const {
    const json* v = at(path);
    if (v == nullptr || !v->is_number()) return;  // schema pass reports this
    require(path, v->get<int64_t>() >= min, "must be >= " + std::to_string(min));
  }

  void positive(const std::string& path) const {
    const json* v = at(path);
    if (v == nullptr || !v->is_number()) return;
    require(path, v->get<double>() > 0.0 && std::isfinite(v->get<double>()), "must be > 0");
  }

  void in_range(const std::string& path, double lo, double hi) const {
    const json* v = at(path);
    if (v == nullptr || !v->is_number()) return;
    const double d = v->get<double>();
    require(path, std::isfinite(d) && d >= lo && d <= hi,
            "must be in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
  }

  void one_of(const std::string& path, const std::vector<std::string>& allowed) const {
    const json* v = at(path);
    if (v == nullptr || !v->is_string()) return;
    const auto s = v->get<std::string>();
    if (std::find(allowed.begin(), allowed.end(), s) == allowed.end()) {
      std::string msg = "must be one of {";
      for (size_t i = 0; i < allowed.size(); ++i) msg += (i ? ", " : "") + allowed[i];
      errors.push_back(path + ": " + msg + "}, got " + s);
    }
  }
};

}  // namespace

std::vector<std::string> validate_config(const json& config) {
  std::vector<std::string> errors;
  check_schema(config, default_config(), "", errors);
  Checker k{config, errors};

  k.require("experiment_id",
            !config.contains("experiment_id") || !config["experiment_id"].is_string() ||
                !config["experiment_id"].get<std::string>().empty(),
            "must be non-empty");
  k.int_min("seed", 0);
  k.int_min("jobs", 1);

  k.one_of("data.source", {"synth", "folder"});
  k.int_min("data.size", 8);
  for (const char* group : {"data.gan_faces", "data.gan_targets", "data.users", "data.negatives",
                            "data.attacker"}) {
    k.int_min(std::string(group) + ".identities", 1);
    k.int_min(std::string(group) + ".per_identity", 1);
  }
  k.int_min("data.aux.identities_per_domain", 1);
  k.int_min("data.aux.per_identity", 1);
  k.int_min("data.users.augment_copies", 0);
  k.in_range("data.users.augment.max_rotation_deg", 0.0, 180.0);
  k.in_range("data.users.augment.hue_shift_range", 0.0, 0.5);
  k.in_range("data.users.augment.zoom_range", 0.0, 0.5);
  k.in_range("data.users.augment.background_jitter", 0.0, 1.0);

  k.one_of("gan.framework", {"cyclegan", "discogan", "travelgan"});
  k.int_min("gan.epochs", 1);
  k.int_min("gan.batch_size", 2);
  k.positive("gan.learning_rate");
  k.in_range("gan.beta1", 0.0, 0.999);
  k.int_min("gan.base_channels", 1);
  k.int_min("gan.n_down_blocks", 1);
  k.int_min("gan.n_res_blocks", 0);
  k.int_min("gan.embedding_dim", 1);
  k.int_min("gan.critic_steps", 1);
  k.positive("gan.disc_lr_mult");
  k.positive("gan.collapse_epsilon");
  k.int_min("gan.collapse_window", 1);
  k.int_min("gan.checkpoint_every", 0);
  for (const char* weight : {"adv", "cycle", "feature_match", "gradient_penalty", "travel",
                             "siamese_margin", "margin"}) {
    k.in_range(std::string("gan.weights.") + weight, 0.0, 1e9);
  }
  {
    const json* lsgan = k.at("gan.use_lsgan");
    const json* wgan = k.at("gan.use_wgan_gp");
    if (lsgan != nullptr && wgan != nullptr && lsgan->is_boolean() && wgan->is_boolean() &&
        lsgan->get<bool>() && wgan->get<bool>()) {
      errors.push_back("gan.use_lsgan: mutually exclusive with gan.use_wgan_gp");
    }
  }
  {
    const json* size = k.at("data.size");
    const json* down = k.at("gan.n_down_blocks");
    if (size != nullptr && down != nullptr && size->is_number_integer() &&
        down->is_number_integer() && down->get<int>() >= 1 && down->get<int>() < 31) {
      const int d = 1 << down->get<int>();
      if (size->get<int>() % d != 0) {
        errors.push_back("data.size: must be divisible by 2^gan.n_down_blocks");
      }
    }
  }

  {
    const json* inputs = k.at("translate.inputs");
    if (inputs != nullptr && inputs->is_array()) {
      k.require("translate.inputs", !inputs->empty(), "must be non-empty");
      for (const auto& item : *inputs) {
        if (!item.is_string() ||
            (item != "users" && item != "negatives" && item != "gan_faces" && item != "attacker")) {
          errors.push_back("translate.inputs: entries must be dataset names "
                           "(users, negatives, gan_faces, attacker)");
          break;
        }
      }
    }
  }
  k.int_min("translate.grid_images", 1);

  k.one_of("consistency.similarity", {"ssim", "neg_l2"});
  k.int_min("consistency.max_cross_pairs", 1);

  {
    const json* modes = k.at("classify.backbone_modes");
    if (modes != nullptr && modes->is_array()) {
      k.require("classify.backbone_modes", !modes->empty(), "must be non-empty");
      for (const auto& m : *modes) {
        if (!m.is_string() || (m != "frozen" && m != "trainable")) {
          errors.push_back("classify.backbone_modes: entries must be frozen or trainable");
          break;
        }
      }
    }
  }
  k.int_min("classify.epochs", 1);
  k.in_range("classify.threshold", 1e-9, 1.0 - 1e-9);
  k.positive("classify.learning_rate");
  k.int_min("classify.negatives_per_positive", 1);
  k.int_min("classify.k_folds", 2);
  k.int_min("classify.backbone.epochs", 1);
  k.int_min("classify.backbone.batch_size", 1);
  k.positive("classify.backbone.learning_rate");
  k.int_min("classify.backbone.base_channels", 1);
  k.int_min("classify.backbone.n_down_blocks", 1);
  k.int_min("classify.backbone.embedding_dim", 1);

  k.one_of("attack.mode", {"itn", "naive"});
  k.int_min("attack.epochs", 1);
  k.int_min("attack.batch_size", 1);
  k.positive("attack.learning_rate");
  k.one_of("attack.reconstruction_loss", {"l1", "l2"});
  k.one_of("attack.framework", {"cyclegan", "discogan", "travelgan"});
  k.int_min("attack.base_channels", 1);
  k.int_min("attack.n_down_blocks", 1);
  k.int_min("attack.n_res_blocks", 0);
  k.int_min("attack.grid_pairs", 1);

  return errors;
}

void apply_override(json& config, const std::string& key_value) {
  const size_t eq = key_value.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw InvalidConfigError("--set expects KEY=VALUE, got: " + key_value);
  }
  const std::string key = key_value.substr(0, eq);
  const std::string raw = key_value.substr(eq + 1);

  std::string pointer = "/";
  for (char ch : key) pointer += (ch == '.') ? '/' : ch;

  json value;
  try {
    value = json::parse(raw);
  } catch (const nlohmann::json::exception&) {
    value = raw;  // bare strings stay strings
  }
  try {
    config[json::json_pointer(pointer)] = value;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidConfigError("cannot set " + key + ": " + e.what());
  }
}

uint64_t RunContext::stage_seed(const std::string& stage) const {
  return derive_seed(seed, "stage:" + stage);
}

Manifest::Manifest(const std::filesystem::path& run_dir, const json& config) {
  path_ = run_dir / "manifest.json";
  if (fs::exists(path_)) {
    data_ = load_json_file_impl(path_, "manifest");
  } else {
    data_["format"] = "privtranslate-manifest";
    data_["config"] = config;
    data_["config_hash"] = hash_hex(fnv1a64(config.dump()));
    data_["seed"] = config.contains("seed") ? config.at("seed") : json(0);
    const char* rev = std::getenv("PRIVTRANSLATE_REVISION");
    data_["revision"] = rev != nullptr ? rev : "unknown";
    {
      const auto now = std::chrono::system_clock::now();
      const std::time_t t = std::chrono::system_clock::to_time_t(now);
      char buf[32];
      std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
      data_["created"] = buf;
    }
    data_["stages"] = json::array();
  }
}

bool Manifest::exists(const std::filesystem::path& run_dir) {
  return fs::exists(run_dir / "manifest.json");
}

Manifest Manifest::open(const std::filesystem::path& run_dir) {
  Manifest m;
  m.path_ = run_dir / "manifest.json";
  m.data_ = load_json_file_impl(m.path_, "manifest");
  return m;
}

bool Manifest::stage_complete(const std::string& name) const {
  for (const auto& s : data_.at("stages")) {
    if (s.at("name") == name && s.at("status") == "complete") return true;
  }
  return false;
}

void Manifest::begin_stage(const std::string& name) {
  if (stage_complete(name)) {
    throw StageRefusedError("stage " + name + " already complete; refusing to overwrite");
  }
  json record;
  record["name"] = name;
  record["status"] = "running";
  data_["stages"].push_back(std::move(record));
}

void Manifest::end_stage(const std::string& name, const std::string& status, double seconds,
                         const std::vector<std::string>& artifacts, const json& detail) {
  auto& stages = data_.at("stages");
  for (auto it = stages.rbegin(); it != stages.rend(); ++it) {
    if ((*it).at("name") == name) {
      (*it)["status"] = status;
      (*it)["seconds"] = seconds;
      (*it)["artifacts"] = artifacts;
      if (!detail.is_null() && !detail.empty()) (*it)["detail"] = detail;
      return;
    }
  }
  throw Error("no running record for stage " + name);
}

void Manifest::save() const {
  write_json_file(path_, data_);
}

namespace {

// Shared begin/end bookkeeping; the body returns (exit_code, status, detail).
template <typename Body>
int run_stage(RunContext& ctx, const std::string& name, Body&& body) {
  fs::create_directories(ctx.run_dir);
  Manifest manifest(ctx.run_dir, ctx.config);
  manifest.begin_stage(name);
  manifest.save();
  const auto t0 = Clock::now();
  std::vector<std::string> artifacts;
  json detail;
  try {
    auto [code, status] = body(artifacts, detail);
    manifest.end_stage(name, status, std::chrono::duration<double>(Clock::now() - t0).count(),
                       artifacts, detail);
    manifest.save();
    return code;
  } catch (const std::exception& e) {
    detail["error"] = e.what();
    manifest.end_stage(name, "failed", std::chrono::duration<double>(Clock::now() - t0).count(),
                       artifacts, detail);
    manifest.save();
    throw;
  }
}

fs::path resolve_path(const RunContext& ctx, const char* key, const fs::path& fallback) {
  const auto& v = ctx.config.at("paths").at(key);
  if (v.is_string() && !v.get<std::string>().empty()) return fs::path(v.get<std::string>());
  return fallback;
}

fs::path resolve_data_dir(const RunContext& ctx) { return resolve_path(ctx, "data", ctx.data_dir()); }
fs::path resolve_model_dir(const RunContext& ctx) {
  return resolve_path(ctx, "model", ctx.gan_dir() / "model");
}
fs::path resolve_translated_dir(const RunContext& ctx) {
  return resolve_path(ctx, "translated", ctx.translated_dir());
}
fs::path resolve_backbone_dir(const RunContext& ctx) {
  return resolve_path(ctx, "backbone", ctx.classify_dir() / "backbone");
}

AugmentParams augment_from_config(const json& j, uint64_t seed) {
  AugmentParams params;
  params.max_rotation_deg = j.at("max_rotation_deg").get<double>();
  params.hue_shift_range = j.at("hue_shift_range").get<double>();
  params.zoom_range = j.at("zoom_range").get<double>();
  params.background_jitter = j.at("background_jitter").get<double>();
  params.seed = seed;
  return params;
}

DomainDataset augmented_users(const DomainDataset& raw, const AugmentParams& params, int copies) {
  if (copies <= 0 || params.is_zero()) return raw;
  auto extra = augment_identity(raw.images, params, copies);
  DomainDataset out;
  out.domain_tag = raw.domain_tag;
  out.images = ImageBatch::concat({raw.images, extra});
  std::vector<int64_t> ids = *raw.identity_ids;
  for (int64_t i = 0; i < raw.count(); ++i) {
    for (int c = 0; c < copies; ++c) ids.push_back((*raw.identity_ids)[i]);
  }
  out.identity_ids = std::move(ids);
  return out;
}

// Folder ingestion: identity subdirectories when present, else a flat folder.
DomainDataset ingest_folder(const fs::path& dir, int size, const std::string& tag) {
  if (!fs::exists(dir)) throw NotFoundError("missing input folder: " + dir.string());
  std::vector<fs::path> subdirs;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_directory()) subdirs.push_back(entry.path());
  }
  if (subdirs.empty()) return load_image_folder(dir, size, tag);
  std::sort(subdirs.begin(), subdirs.end());
  std::vector<ImageBatch> batches;
  std::vector<int64_t> ids;
  int skipped = 0;
  for (size_t i = 0; i < subdirs.size(); ++i) {
    auto part = load_image_folder(subdirs[i], size, tag);
    for (int64_t n = 0; n < part.count(); ++n) ids.push_back(static_cast<int64_t>(i));
    batches.push_back(part.images);
    skipped += part.skipped_files;
  }
  DomainDataset out;
  out.domain_tag = tag;
  out.images = ImageBatch::concat(batches);
  out.identity_ids = std::move(ids);
  out.skipped_files = skipped;
  return out;
}

BackboneModel load_backbone(const fs::path& dir) {
  auto loaded = load_named_tensors(dir);
  const auto& meta = loaded.meta;
  BackboneModel model;
  model.net = Backbone(meta.at("input_size").get<int>(), meta.at("base_channels").get<int>(),
                       meta.at("n_down_blocks").get<int>(), meta.at("embedding_dim").get<int>());
  load_state_into(*model.net, loaded.tensors);
  model.pretrain_task = meta.at("pretrain_task").get<std::string>();
  model.seed = meta.at("seed").get<uint64_t>();
  return model;
}

void save_backbone(const BackboneModel& model, const fs::path& dir) {
  nlohmann::ordered_json extra;
  extra["backbone_format"] = "privtranslate-backbone";
  extra["input_size"] = model.net->input_size;
  extra["base_channels"] = model.net->base_channels;
  extra["n_down_blocks"] = model.net->n_down_blocks;
  extra["embedding_dim"] = model.net->embedding_dim;
  extra["pretrain_task"] = model.pretrain_task;
  extra["seed"] = model.seed;
  save_named_tensors(named_state(*model.net), dir, extra);
}

json metrics_json(const Metrics& m) {
  json j;
  j["accuracy"] = m.accuracy;
  j["precision"] = m.precision;
  j["recall"] = m.recall;
  j["f1"] = m.f1;
  return j;
}

}  // namespace

int run_synth_data(RunContext& ctx) {
  return run_stage(ctx, "synth-data", [&](std::vector<std::string>& artifacts, json& detail)
                                          -> std::pair<int, std::string> {
    const auto& d = ctx.config.at("data");
    if (d.at("source").get<std::string>() != "synth") {
      throw InvalidConfigError("data.source is not synth; use the ingest stage");
    }
    const uint64_t s = ctx.stage_seed("synth-data");
    const int size = d.at("size").get<int>();
    const std::string face_tag = d.at("face_tag").get<std::string>();
    const std::string target_tag = d.at("target_tag").get<std::string>();

    auto make = [&](const char* label, const json& group, const std::string& tag) {
      return synth_identity_dataset(group.at("identities").get<int>(),
                                    group.at("per_identity").get<int>(), size, tag,
                                    derive_seed(s, label));
    };
    auto store = [&](const DomainDataset& ds, const char* name, uint64_t seed) {
      save_dataset(ds, ctx.data_dir() / name, static_cast<int64_t>(seed));
      artifacts.push_back((ctx.data_dir() / name).string());
      detail[name] = ds.count();
    };

    store(make("gan-faces", d.at("gan_faces"), face_tag), "gan_faces", derive_seed(s, "gan-faces"));
    store(make("gan-targets", d.at("gan_targets"), target_tag), "gan_targets",
          derive_seed(s, "gan-targets"));

    auto users_raw = make("users", d.at("users"), face_tag);
    store(users_raw, "users_raw", derive_seed(s, "users"));
    auto params = augment_from_config(d.at("users").at("augment"), derive_seed(s, "augment"));
    auto users = augmented_users(users_raw, params, d.at("users").at("augment_copies").get<int>());
    store(users, "users", derive_seed(s, "augment"));

    store(make("negatives", d.at("negatives"), face_tag), "negatives",
          derive_seed(s, "negatives"));

    auto aux_faces = synth_identity_dataset(d.at("aux").at("identities_per_domain").get<int>(),
                                            d.at("aux").at("per_identity").get<int>(), size,
                                            face_tag, derive_seed(s, "aux-faces"));
    auto aux_targets = synth_identity_dataset(d.at("aux").at("identities_per_domain").get<int>(),
                                              d.at("aux").at("per_identity").get<int>(), size,
                                              target_tag, derive_seed(s, "aux-targets"));
    DomainDataset aux;
    aux.domain_tag = "aux";
    aux.images = ImageBatch::concat({aux_faces.images, aux_targets.images});
    std::vector<int64_t> aux_ids;
    for (int64_t id : *aux_faces.identity_ids) aux_ids.push_back(1000 + id);
    for (int64_t id : *aux_targets.identity_ids) aux_ids.push_back(2000 + id);
    aux.identity_ids = std::move(aux_ids);
    store(aux, "aux", derive_seed(s, "aux-faces"));

    store(make("attacker", d.at("attacker"), face_tag), "attacker", derive_seed(s, "attacker"));
    return {kExitOk, "complete"};
  });
}

int run_ingest(RunContext& ctx) {
  return run_stage(ctx, "ingest", [&](std::vector<std::string>& artifacts, json& detail)
                                      -> std::pair<int, std::string> {
    const auto& d = ctx.config.at("data");
    if (d.at("source").get<std::string>() != "folder") {
      throw InvalidConfigError("data.source is not folder; use the synth-data stage");
    }
    const auto& f = d.at("folder");
    const int size = d.at("size").get<int>();
    const std::string face_tag = d.at("face_tag").get<std::string>();
    const std::string target_tag = d.at("target_tag").get<std::string>();
    const uint64_t s = ctx.stage_seed("ingest");

    auto dir_of = [&](const char* key) { return fs::path(f.at(key).get<std::string>()); };
    auto store = [&](const DomainDataset& ds, const char* name) {
      save_dataset(ds, ctx.data_dir() / name, static_cast<int64_t>(s));
      artifacts.push_back((ctx.data_dir() / name).string());
      detail[name] = ds.count();
      if (ds.skipped_files > 0) detail[std::string(name) + "_skipped"] = ds.skipped_files;
    };

    if (f.at("faces_dir").get<std::string>().empty() ||
        f.at("targets_dir").get<std::string>().empty()) {
      throw InvalidConfigError("data.folder.faces_dir and data.folder.targets_dir are required");
    }
    auto users = ingest_folder(dir_of("faces_dir"), size, face_tag);
    store(users, "users");
    DomainDataset gan_faces = users;
    gan_faces.identity_ids.reset();
    store(gan_faces, "gan_faces");
    store(ingest_folder(dir_of("targets_dir"), size, target_tag), "gan_targets");
    if (!f.at("negatives_dir").get<std::string>().empty()) {
      store(ingest_folder(dir_of("negatives_dir"), size, face_tag), "negatives");
    }
    if (!f.at("aux_dir").get<std::string>().empty()) {
      auto aux = ingest_folder(dir_of("aux_dir"), size, "aux");
      store(aux, "aux");
    }
    if (!f.at("attacker_dir").get<std::string>().empty()) {
      store(ingest_folder(dir_of("attacker_dir"), size, face_tag), "attacker");
    }
    return {kExitOk, "complete"};
  });
}

namespace {

TrainConfig train_config_from(const RunContext& ctx) {
  const auto& g = ctx.config.at("gan");
  TrainConfig tc;
  tc.framework = framework_from_string(g.at("framework").get<std::string>());
  tc.epochs = g.at("epochs").get<int>();
  tc.batch_size = g.at("batch_size").get<int>();
  tc.learning_rate = g.at("learning_rate").get<double>();
  tc.beta1 = g.at("beta1").get<double>();
  tc.use_lsgan = g.at("use_lsgan").get<bool>();
  tc.use_wgan_gp = g.at("use_wgan_gp").get<bool>();
  tc.use_spectral_norm = g.at("use_spectral_norm").get<bool>();
  tc.use_feature_matching = g.at("use_feature_matching").get<bool>();
  tc.seed = ctx.stage_seed("train-gan");
  tc.checkpoint_every = g.at("checkpoint_every").get<int>();
  tc.base_channels = g.at("base_channels").get<int>();
  tc.n_down_blocks = g.at("n_down_blocks").get<int>();
  tc.n_res_blocks = g.at("n_res_blocks").get<int>();
  tc.embedding_dim = g.at("embedding_dim").get<int>();
  tc.critic_steps = g.at("critic_steps").get<int>();
  tc.disc_lr_mult = g.at("disc_lr_mult").get<double>();
  tc.collapse_epsilon = g.at("collapse_epsilon").get<double>();
  tc.collapse_window = g.at("collapse_window").get<int>();
  tc.halt_on_collapse = g.at("halt_on_collapse").get<bool>();
  const auto& w = g.at("weights");
  tc.loss_weights.adv = w.at("adv").get<double>();
  tc.loss_weights.cycle = w.at("cycle").get<double>();
  tc.loss_weights.feature_match = w.at("feature_match").get<double>();
  tc.loss_weights.gradient_penalty = w.at("gradient_penalty").get<double>();
  tc.loss_weights.travel = w.at("travel").get<double>();
  tc.loss_weights.siamese_margin = w.at("siamese_margin").get<double>();
  tc.loss_weights.margin = w.at("margin").get<double>();
  return tc;
}

}  // namespace

int run_train_gan(RunContext& ctx) {
  return run_stage(ctx, "train-gan", [&](std::vector<std::string>& artifacts, json& detail)
                                         -> std::pair<int, std::string> {
    const auto data_dir = resolve_data_dir(ctx);
    auto faces = load_dataset(data_dir / "gan_faces");
    auto targets = load_dataset(data_dir / "gan_targets");
    TrainConfig tc = train_config_from(ctx);
    if (tc.checkpoint_every > 0) tc.checkpoint_dir = ctx.gan_dir() / "checkpoints";

    auto result = train_gan(faces, targets, tc);
    save_model(result.model, ctx.gan_dir() / "model");
    write_history_jsonl(result.history, ctx.gan_dir() / "history.jsonl");
    artifacts.push_back((ctx.gan_dir() / "model").string());
    artifacts.push_back((ctx.gan_dir() / "history.jsonl").string());

    auto verdict = detect_mode_collapse(result.history, tc.collapse_epsilon, tc.collapse_window);
    json summary;
    summary["framework"] = to_string(tc.framework);
    summary["epochs"] = tc.epochs;
    summary["steps"] = result.history.steps.size();
    summary["config_hash"] = hash_hex(tc.hash());
    summary["generator_param_hash"] = hash_hex(result.model.generator_param_hash());
    summary["collapse"]["epsilon"] = tc.collapse_epsilon;
    summary["collapse"]["window"] = tc.collapse_window;
    summary["collapse"]["fired"] = verdict.collapsed;
    summary["collapse"]["first_offending_step"] =
        verdict.first_offending_step.has_value() ? json(*verdict.first_offending_step) : json(nullptr);
    if (!result.history.steps.empty()) {
      summary["final_loss_d"] = result.history.steps.back().loss_d;
      summary["final_loss_g"] = result.history.steps.back().loss_g;
    }
    write_json_file(ctx.gan_dir() / "train_summary.json", summary);
    artifacts.push_back((ctx.gan_dir() / "train_summary.json").string());

    detail["collapse_fired"] = verdict.collapsed;
    if (verdict.collapsed) {
      detail["first_offending_step"] = *verdict.first_offending_step;
      if (tc.halt_on_collapse) return {kExitRuntime, "collapsed"};
    }
    return {kExitOk, "complete"};
  });
}

int run_translate(RunContext& ctx) {
  return run_stage(ctx, "translate", [&](std::vector<std::string>& artifacts, json& detail)
                                         -> std::pair<int, std::string> {
    auto model = load_model(resolve_model_dir(ctx));
    const auto data_dir = resolve_data_dir(ctx);
    const auto& t = ctx.config.at("translate");
    const uint64_t s = ctx.stage_seed("translate");

    bool first = true;
    for (const auto& input : t.at("inputs")) {
      const std::string name = input.get<std::string>();
      auto ds = load_dataset(data_dir / name);
      auto out = translate(model, ds.images);
      DomainDataset translated;
      translated.domain_tag = model.target_tag;
      translated.images = out;
      translated.identity_ids = ds.identity_ids;
      save_dataset(translated, ctx.translated_dir() / name, static_cast<int64_t>(s));
      artifacts.push_back((ctx.translated_dir() / name).string());
      detail[name] = translated.count();
      if (first) {
        const int64_t grid_n =
            std::min<int64_t>(t.at("grid_images").get<int>(), translated.count());
        std::vector<int64_t> idx(grid_n);
        for (int64_t i = 0; i < grid_n; ++i) idx[i] = i;
        save_grid_png(translated.images.slice(idx), 4, ctx.translated_dir() / "sample_grid.png");
        artifacts.push_back((ctx.translated_dir() / "sample_grid.png").string());
        first = false;
      }
    }
    return {kExitOk, "complete"};
  });
}

int run_consistency(RunContext& ctx) {
  return run_stage(ctx, "consistency", [&](std::vector<std::string>& artifacts, json& detail)
                                           -> std::pair<int, std::string> {
    auto model = load_model(resolve_model_dir(ctx));
    auto users = load_dataset(resolve_data_dir(ctx) / "users");
    const auto& c = ctx.config.at("consistency");
    const auto sim = similarity_from_string(c.at("similarity").get<std::string>());
    auto report = consistency_report(model, users, sim, c.at("max_cross_pairs").get<int>());

    json j;
    j["similarity"] = c.at("similarity");
    j["images"] = users.count();
    j["within_identity"] = report.within_identity;
    j["cross_identity"] = report.cross_identity;
    j["separation_ratio"] = report.separation_ratio;
    json per_id = json::object();
    for (const auto& [id, value] : report.per_identity_within) per_id[std::to_string(id)] = value;
    j["per_identity_within"] = std::move(per_id);
    j["skipped_identities"] = report.skipped_identities;
    write_json_file(ctx.run_dir / "consistency.json", j);
    artifacts.push_back((ctx.run_dir / "consistency.json").string());

    detail["separation_ratio"] = report.separation_ratio;
    return {kExitOk, "complete"};
  });
}

int run_train_classifiers(RunContext& ctx) {
  return run_stage(ctx, "train-classifiers", [&](std::vector<std::string>& artifacts, json& detail)
                                                 -> std::pair<int, std::string> {
    const auto data_dir = resolve_data_dir(ctx);
    const auto translated_dir = resolve_translated_dir(ctx);
    const auto& cl = ctx.config.at("classify");
    const uint64_t s = ctx.stage_seed("train-classifiers");

    auto aux = load_dataset(data_dir / "aux");
    const auto& bb = cl.at("backbone");
    BackbonePretrainConfig bcfg;
    bcfg.epochs = bb.at("epochs").get<int>();
    bcfg.batch_size = bb.at("batch_size").get<int>();
    bcfg.learning_rate = bb.at("learning_rate").get<double>();
    bcfg.base_channels = bb.at("base_channels").get<int>();
    bcfg.n_down_blocks = bb.at("n_down_blocks").get<int>();
    bcfg.embedding_dim = bb.at("embedding_dim").get<int>();
    auto backbone = pretrain_backbone(aux, derive_seed(s, "backbone"), bcfg);
    save_backbone(backbone, ctx.classify_dir() / "backbone");
    artifacts.push_back((ctx.classify_dir() / "backbone").string());

    auto users = load_dataset(data_dir / "users");
    auto negatives = load_dataset(data_dir / "negatives");
    auto users_t = load_dataset(translated_dir / "users");
    auto negatives_t = load_dataset(translated_dir / "negatives");

    std::vector<MetricsReport> reports;
    for (const auto& mode_name : cl.at("backbone_modes")) {
      for (const char* domain : {"faces", "translated"}) {
        const bool faces = std::string(domain) == "faces";
        ClassifierConfig cc;
        cc.backbone_mode = backbone_mode_from_string(mode_name.get<std::string>());
        cc.epochs = cl.at("epochs").get<int>();
        cc.threshold = cl.at("threshold").get<double>();
        cc.learning_rate = cl.at("learning_rate").get<double>();
        cc.negatives_per_positive = cl.at("negatives_per_positive").get<int>();
        cc.seed = derive_seed(s, "crossval-" + mode_name.get<std::string>() + "-" + domain);
        auto report = crossval_experiment(backbone, faces ? users : users_t,
                                          faces ? negatives.images : negatives_t.images,
                                          cl.at("k_folds").get<int>(), cc, ctx.jobs);
        report.label = mode_name.get<std::string>() + "_" + domain;
        const auto path = ctx.classify_dir() / ("metrics_" + report.label + ".json");
        write_metrics_report_json(report, path);
        artifacts.push_back(path.string());
        detail[report.label] = metrics_json(report.average);
        reports.push_back(std::move(report));
      }
    }
    std::vector<const MetricsReport*> pointers;
    for (const auto& r : reports) pointers.push_back(&r);
    write_per_identity_csv(pointers, ctx.classify_dir() / "per_identity.csv");
    artifacts.push_back((ctx.classify_dir() / "per_identity.csv").string());
    return {kExitOk, "complete"};
  });
}

int run_evaluate(RunContext& ctx) {
  return run_stage(ctx, "evaluate", [&](std::vector<std::string>& artifacts, json& detail)
                                        -> std::pair<int, std::string> {
    const auto& cl = ctx.config.at("classify");
    const fs::path dir = ctx.classify_dir();

    json evaluation;
    evaluation["threshold"] = cl.at("threshold");
    evaluation["k_folds"] = cl.at("k_folds");
    evaluation["epochs"] = cl.at("epochs");
    auto rows = json::array();
    std::map<std::string, Metrics> averages;
    for (const auto& mode_name : cl.at("backbone_modes")) {
      for (const char* domain : {"faces", "translated"}) {
        const std::string label = mode_name.get<std::string>() + "_" + std::string(domain);
        auto j = load_json_file_impl(dir / ("metrics_" + label + ".json"), "metrics report");
        Metrics m;
        m.accuracy = j.at("average").at("accuracy").get<double>();
        m.precision = j.at("average").at("precision").get<double>();
        m.recall = j.at("average").at("recall").get<double>();
        m.f1 = j.at("average").at("f1").get<double>();
        averages[label] = m;
        json row = metrics_json(m);
        row["backbone"] = mode_name;
        row["domain"] = domain;
        rows.push_back(std::move(row));
      }
    }
    evaluation["rows"] = std::move(rows);

    json drops = json::object();
    for (const auto& mode_name : cl.at("backbone_modes")) {
      const std::string mode = mode_name.get<std::string>();
      if (!averages.count(mode + "_faces") || !averages.count(mode + "_translated")) continue;
      const auto& a = averages[mode + "_faces"];
      const auto& b = averages[mode + "_translated"];
      json d;
      d["accuracy"] = std::abs(a.accuracy - b.accuracy);
      d["precision"] = std::abs(a.precision - b.precision);
      d["recall"] = std::abs(a.recall - b.recall);
      d["f1"] = std::abs(a.f1 - b.f1);
      drops[mode] = std::move(d);
    }
    evaluation["drops"] = std::move(drops);

    json reference;
    reference["note"] = "original large-scale experiment, recorded for context";
    for (const auto& [key, m] : paper_reference_metrics()) reference[key] = metrics_json(m);
    {
      const auto ref = paper_reference_metrics();
      reference["drops"]["frozen_f1"] =
          std::abs(ref.at("frozen_faces").f1 - ref.at("frozen_translated").f1);
      reference["drops"]["trainable_f1"] =
          std::abs(ref.at("trainable_faces").f1 - ref.at("trainable_translated").f1);
    }
    evaluation["reference"] = std::move(reference);
    write_json_file(dir / "evaluation.json", evaluation);
    artifacts.push_back((dir / "evaluation.json").string());

    std::ofstream csv(dir / "table.csv");
    if (!csv) throw Error("cannot write " + (dir / "table.csv").string());
    csv << "label,accuracy,precision,recall,f1\n";
    for (const auto& [label, m] : averages) {
      char row[160];
      std::snprintf(row, sizeof(row), "%s,%.6f,%.6f,%.6f,%.6f\n", label.c_str(), m.accuracy,
                    m.precision, m.recall, m.f1);
      csv << row;
    }
    artifacts.push_back((dir / "table.csv").string());

    if (evaluation.at("drops").contains("trainable")) {
      detail["trainable_f1_drop"] = evaluation["drops"]["trainable"]["f1"];
    }
    return {kExitOk, "complete"};
  });
}

int run_attack(RunContext& ctx) {
  return run_stage(ctx, "attack", [&](std::vector<std::string>& artifacts, json& detail)
                                      -> std::pair<int, std::string> {
    const auto data_dir = resolve_data_dir(ctx);
    auto model = load_model(resolve_model_dir(ctx));
    auto users = load_dataset(data_dir / "users");
    if (!users.identity_ids.has_value()) {
      throw InvalidArgumentError("users dataset needs identity labels for the attack benchmark");
    }
    auto attacker_faces = load_dataset(data_dir / "attacker");

    const auto& a = ctx.config.at("attack");
    AttackConfig ac;
    ac.mode = attack_mode_from_string(a.at("mode").get<std::string>());
    ac.epochs = a.at("epochs").get<int>();
    ac.batch_size = a.at("batch_size").get<int>();
    ac.learning_rate = a.at("learning_rate").get<double>();
    ac.seed = ctx.stage_seed("attack");
    ac.reconstruction_loss = recon_loss_from_string(a.at("reconstruction_loss").get<std::string>());
    ac.framework = framework_from_string(a.at("framework").get<std::string>());
    ac.base_channels = a.at("base_channels").get<int>();
    ac.n_down_blocks = a.at("n_down_blocks").get<int>();
    ac.n_res_blocks = a.at("n_res_blocks").get<int>();

    BackboneModel backbone;
    const auto backbone_dir = resolve_backbone_dir(ctx);
    if (fs::exists(backbone_dir / "meta.json")) {
      backbone = load_backbone(backbone_dir);
    } else {
      // Fall back to the classify stage's derivation so both paths agree.
      auto aux = load_dataset(data_dir / "aux");
      const auto& bb = ctx.config.at("classify").at("backbone");
      BackbonePretrainConfig bcfg;
      bcfg.epochs = bb.at("epochs").get<int>();
      bcfg.batch_size = bb.at("batch_size").get<int>();
      bcfg.learning_rate = bb.at("learning_rate").get<double>();
      bcfg.base_channels = bb.at("base_channels").get<int>();
      bcfg.n_down_blocks = bb.at("n_down_blocks").get<int>();
      bcfg.embedding_dim = bb.at("embedding_dim").get<int>();
      backbone = pretrain_backbone(aux, derive_seed(ctx.stage_seed("train-classifiers"), "backbone"),
                                   bcfg);
    }

    auto translated_users = translate(model, users.images);
    ImageBatch reconstructed;
    if (ac.mode == AttackMode::Itn) {
      auto result = itn_attack(model, attacker_faces, ac);
      write_history_jsonl(result.history, ctx.attack_dir() / "itn_history.jsonl");
      artifacts.push_back((ctx.attack_dir() / "itn_history.jsonl").string());
      reconstructed = result.reconstruct(translated_users);
      detail["final_train_loss"] = result.epoch_train_loss.back();
    } else {
      DomainDataset private_domain;
      private_domain.domain_tag = model.target_tag;
      private_domain.images = translated_users;
      auto result = naive_inverse_attack(private_domain, attacker_faces, ac);
      write_history_jsonl(result.history, ctx.attack_dir() / "naive_history.jsonl");
      artifacts.push_back((ctx.attack_dir() / "naive_history.jsonl").string());
      reconstructed = translate(result.model, translated_users);
    }

    AttackReport report;
    report.mode = ac.mode;
    report.config_hash = ac.hash();
    report.reconstruction = reconstruction_metrics(users.images, reconstructed);
    auto reid = reidentification_rate(reconstructed, users, *users.identity_ids, backbone);
    report.reidentification = reid.rate;
    report.chance_rate = 1.0 / static_cast<double>(users.distinct_identities().size());
    report.predicted_ids = reid.predicted_ids;
    report.degenerate_gallery = reid.degenerate_gallery;
    write_attack_report_json(report, ctx.attack_dir() / "attack.json");
    artifacts.push_back((ctx.attack_dir() / "attack.json").string());

    save_reconstruction_grid(users.images, reconstructed, ctx.attack_dir() / "reconstruction_grid.png",
                             a.at("grid_pairs").get<int>());
    artifacts.push_back((ctx.attack_dir() / "reconstruction_grid.png").string());

    detail["reidentification"] = report.reidentification;
    detail["chance_rate"] = report.chance_rate;
    detail["reconstruction_mse"] = report.reconstruction.mse;
    return {kExitOk, "complete"};
  });
}

int run_report(RunContext& ctx) {
  return run_stage(ctx, "report", [&](std::vector<std::string>& artifacts, json& detail)
                                      -> std::pair<int, std::string> {
    json report;
    report["experiment_id"] = ctx.config.at("experiment_id");
    report["seed"] = ctx.config.at("seed");

    auto attach = [&](const char* key, const fs::path& path) {
      if (fs::exists(path)) {
        report[key] = load_json_file_impl(path, key);
      } else {
        report[key] = nullptr;
      }
    };
    attach("train_summary", ctx.gan_dir() / "train_summary.json");
    attach("consistency", ctx.run_dir / "consistency.json");
    attach("evaluation", ctx.classify_dir() / "evaluation.json");
    attach("attack", ctx.attack_dir() / "attack.json");
    write_json_file(ctx.run_dir / "report.json", report);
    artifacts.push_back((ctx.run_dir / "report.json").string());

    std::ofstream md(ctx.run_dir / "report.md");
    if (!md) throw Error("cannot write report.md");
    md << "# Run " << ctx.config.at("experiment_id").get<std::string>() << "\n\n";
    if (!report["train_summary"].is_null()) {
      const auto& ts = report["train_summary"];
      md << "## Translation model\n\n";
      md << "- framework: " << ts.at("framework").get<std::string>() << "\n";
      md << "- steps: " << ts.at("steps") << "\n";
      md << "- mode collapse fired: " << (ts.at("collapse").at("fired").get<bool>() ? "yes" : "no")
         << "\n\n";
    }
    if (!report["consistency"].is_null()) {
      const auto& cj = report["consistency"];
      md << "## Translation consistency\n\n";
      md << "- within identity: " << cj.at("within_identity") << "\n";
      md << "- cross identity: " << cj.at("cross_identity") << "\n";
      md << "- separation ratio: " << cj.at("separation_ratio") << "\n\n";
    }
    if (!report["evaluation"].is_null()) {
      md << "## Authentication\n\n";
      md << "| backbone | domain | accuracy | precision | recall | f1 |\n";
      md << "|---|---|---|---|---|---|\n";
      for (const auto& row : report["evaluation"].at("rows")) {
        char line[256];
        std::snprintf(line, sizeof(line), "| %s | %s | %.4f | %.4f | %.4f | %.4f |\n",
                      row.at("backbone").get<std::string>().c_str(),
                      row.at("domain").get<std::string>().c_str(),
                      row.at("accuracy").get<double>(), row.at("precision").get<double>(),
                      row.at("recall").get<double>(), row.at("f1").get<double>());
        md << line;
      }
      md << "\n";
    }
    if (!report["attack"].is_null()) {
      const auto& aj = report["attack"];
      md << "## Attack\n\n";
      md << "- mode: " << aj.at("mode").get<std::string>() << "\n";
      md << "- reconstruction mse: " << aj.at("reconstruction").at("mse") << "\n";
      md << "- re-identification rate: " << aj.at("reidentification") << " (chance "
         << aj.at("chance_rate") << ")\n";
    }
    artifacts.push_back((ctx.run_dir / "report.md").string());
    detail["sections"] = 4;
    return {kExitOk, "complete"};
  });
}

int run_pipeline(RunContext& ctx) {
  const bool synth = ctx.config.at("data").at("source").get<std::string>() == "synth";
  int code = synth ? run_synth_data(ctx) : run_ingest(ctx);
  if (code != kExitOk) return code;
  if ((code = run_train_gan(ctx)) != kExitOk) return code;
  if ((code = run_translate(ctx)) != kExitOk) return code;
  if ((code = run_consistency(ctx)) != kExitOk) return code;
  if ((code = run_train_classifiers(ctx)) != kExitOk) return code;
  if ((code = run_evaluate(ctx)) != kExitOk) return code;
  if ((code = run_attack(ctx)) != kExitOk) return code;
  return run_report(ctx);
}

}  // namespace privtranslate
