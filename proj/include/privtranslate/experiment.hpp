#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace privtranslate {

using json = nlohmann::ordered_json;

/// Full experiment configuration with defaults; see default_config() for the
/// schema. Validation errors carry the offending field path.
json default_config();
json load_config_file(const std::filesystem::path& path);
std::vector<std::string> validate_config(const json& config);

/// Applies one `--set key=value` override (dotted path; value parsed as JSON
/// when possible, else kept as a string).
void apply_override(json& config, const std::string& key_value);

struct RunContext {
  json config;
  std::filesystem::path run_dir;
  uint64_t seed = 0;
  int jobs = 1;

  std::filesystem::path data_dir() const { return run_dir / "data"; }
  std::filesystem::path gan_dir() const { return run_dir / "gan"; }
  std::filesystem::path translated_dir() const { return run_dir / "translated"; }
  std::filesystem::path classify_dir() const { return run_dir / "classify"; }
  std::filesystem::path attack_dir() const { return run_dir / "attack"; }
  uint64_t stage_seed(const std::string& stage) const;
};

/// Appends stage records to runs/<id>/manifest.json. A stage already recorded
/// as complete refuses to run again.
class Manifest {
 public:
  Manifest(const std::filesystem::path& run_dir, const json& config);

  static bool exists(const std::filesystem::path& run_dir);
  static Manifest open(const std::filesystem::path& run_dir);

  bool stage_complete(const std::string& name) const;
  void begin_stage(const std::string& name);
  void end_stage(const std::string& name, const std::string& status, double seconds,
                 const std::vector<std::string>& artifacts, const json& detail = {});
  void save() const;

  const json& data() const { return data_; }

 private:
  Manifest() = default;
  std::filesystem::path path_;
  json data_;
};

/// Subcommand entry points; every stage validates its inputs, writes its
/// artifacts under the run directory and appends a manifest record.
int run_synth_data(RunContext& ctx);
int run_ingest(RunContext& ctx);
int run_train_gan(RunContext& ctx);
int run_translate(RunContext& ctx);
int run_consistency(RunContext& ctx);
int run_train_classifiers(RunContext& ctx);
int run_evaluate(RunContext& ctx);
int run_attack(RunContext& ctx);
int run_report(RunContext& ctx);
int run_pipeline(RunContext& ctx);

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

}  // namespace privtranslate
