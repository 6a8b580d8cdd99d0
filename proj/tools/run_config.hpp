#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "occforge/train.hpp"

namespace occ::cli {

/// Everything a command reads, resolved from defaults, then --config, then flags.
struct RunConfig {
  std::string command;
  std::uint64_t seed = 0;
  Preset preset = Preset::Toy;
  train::Mode mode = train::Mode::Student;
  std::string toggles = "none";
  std::size_t epochs = 1;
  std::size_t teacher_epochs = 0;
  double lr = 5e-3;
  std::string schedule = "cosine";  // or "constant"
  loss::LossWeights weights;
  double depth_noise = 0.0;
  std::size_t count = 4;
  std::string scenes;      // directory of .ocsn files; empty = generate `count` from seed
  std::string val_scenes;  // ablation validation directory; empty = generate `val_count`
  std::size_t val_count = 10;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::string out;
  std::string checkpoint;
  std::string input;  // export-ply source (.ocsn or .svox)

  train::TrainConfig train_config() const;
  nlohmann::json to_json() const;
  /// Overlays the keys present in `j`; unknown keys throw ConfigError.
  void merge(const nlohmann::json& j);
  void validate() const;
};

RunConfig load_config_file(const std::filesystem::path& path, RunConfig base);
void write_config(const std::filesystem::path& dir, const RunConfig& cfg);

}  // namespace occ::cli
