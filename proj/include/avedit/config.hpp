#pragma once

#include "avedit/dataset_update.hpp"
#include "avedit/editor.hpp"
#include "avedit/scene.hpp"
#include "avedit/training.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace avedit {

struct RenderConfig {
  int samples = 64;
  double guide_halfwidth = 0.15;  // fraction of the scene radius
};

struct FitConfig {
  int iters = 4000;
  double learning_rate = 1e-4;
  double loss_alpha = 0.5;
  int eval_every = 500;
  int holdout_stride = 5;
};

struct EditRunConfig {
  EditConfig editor;
  int iters = 2000;
  int update_period = 10;
  int eval_every = 200;
  int snapshot_every = 0;
  double learning_rate = 1e-4;
  double loss_alpha = 0.5;
};

struct PerceptualSettings {
  uint64_t seed = 7;
  std::vector<double> layer_weights = {1.0, 1.0, 1.0};
};

// Everything a run depends on besides its input files.
struct RunConfig {
  uint64_t seed = 0;
  SceneSpec scene;
  ModelConfig model;
  RenderConfig render;
  FitConfig fit;
  EditRunConfig edit;
  PerceptualSettings perceptual;
  std::vector<HueRule> toy_rules = default_hue_rules();

  RenderOptions render_options(const Dataset& dataset) const;
  TrainSchedule fit_schedule() const;
  DUSchedule edit_schedule() const;
  PerceptualConfig perceptual_config() const;
};

nlohmann::json to_json(const RunConfig& config);
// Strict: unknown keys and wrong types raise ConfigError naming the key.
RunConfig config_from_json(const nlohmann::json& j);

// Reads a config file. A run manifest is accepted too (its "config" member is
// used), so a run can be repeated from its manifest.
nlohmann::json read_config_json(const std::filesystem::path& path);

// Applies "a.b.c=value" to `j`. The value is parsed as JSON when possible and
// taken as a string otherwise. Unknown keys surface when the result is
// parsed by config_from_json.
void apply_override(nlohmann::json& j, const std::string& assignment);

// Default config, then file, then overrides, then validation.
RunConfig resolve_config(const std::filesystem::path& path, const std::vector<std::string>& overrides);

// FNV-1a over the canonical JSON dump.
uint64_t config_hash(const RunConfig& config);

}  // namespace avedit
