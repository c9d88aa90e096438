#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "malvis/nn.hpp"

namespace malvis {

struct SplitSpec {
  double test_fraction = 0.20;
  double val_fraction = 0.15;  // of the training partition
  bool stratified = true;
  std::uint64_t seed = 0;
};

struct ObfuscationConfig {
  double pack_fraction = 1.0;
  double morph_fraction = 0.5;
  int morph_passes = 3;
  std::vector<int> sensitivity_passes{1, 2, 3};
  std::string packer_cmd;          // optional external packer, "" = built-in
  std::string substitution_table;  // optional JSON table path, "" = built-in
};

struct XaiConfig {
  std::size_t window = 8;
  std::size_t stride = 4;
  double baseline = 0.0;
  std::size_t grid = 8;
  std::size_t coalitions = 2048;
  std::size_t samples_per_class = 2;
  std::size_t top_k = 256;
};

// Everything a run depends on. Serialized into every artifact so a run can
// be replayed exactly.
struct Config {
  std::uint64_t seed = 1;
  std::string corpus = "default";  // "default" or a family spec JSON path
  nn::Hyperparams model;
  SplitSpec split;
  ObfuscationConfig obfuscation;
  XaiConfig xai;
  std::vector<double> progressive_fractions{0.2, 0.4, 0.6, 0.8, 1.0};
  bool run_xai = true;
};

/// Throws Error("InvalidConfig") on unknown keys or invalid values.
Config config_from_json(const nlohmann::json& j);
nlohmann::ordered_json config_to_json(const Config& c);
Config load_config(const std::filesystem::path& path);

nlohmann::ordered_json hyperparams_to_json(const nn::Hyperparams& hp);
nn::Hyperparams hyperparams_from_json(const nlohmann::json& j);

/// Applies MALVIS_SEED when set.
void apply_env_overrides(Config& c);

void validate(const Config& c);

}  // namespace malvis
