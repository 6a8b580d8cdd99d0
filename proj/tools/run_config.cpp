#include "run_config.hpp"

#include <fstream>

#include "occforge/errors.hpp"

namespace occ::cli {

using nlohmann::json;

train::TrainConfig RunConfig::train_config() const {
  train::TrainConfig t;
  t.preset = preset;
  t.mode = mode;
  t.toggles = pipe::Toggles::parse(toggles);
  t.weights = weights;
  t.lr = lr;
  t.cosine = schedule == "cosine";
  t.epochs = epochs;
  t.teacher_epochs = teacher_epochs;
  t.seed = seed;
  t.depth_noise = depth_noise;
  return t;
}

json RunConfig::to_json() const {
  return json{{"command", command},
              {"seed", seed},
              {"preset", to_string(preset)},
              {"mode", train::to_string(mode)},
              {"toggles", pipe::Toggles::parse(toggles).str()},
              {"epochs", epochs},
              {"teacher_epochs", teacher_epochs},
              {"lr", lr},
              {"schedule", schedule},
              {"lambda1", weights.sem},
              {"lambda2", weights.distill},
              {"lambda3", weights.ssc},
              {"lambda4", weights.scal_sem},
              {"lambda5", weights.scal_geo},
              {"depth_noise", depth_noise},
              {"count", count},
              {"scenes", scenes},
              {"val_scenes", val_scenes},
              {"val_count", val_count},
              {"seeds", seeds},
              {"out", out},
              {"checkpoint", checkpoint},
              {"input", input}};
}

void RunConfig::merge(const json& j) {
  if (!j.is_object()) throw ConfigError("config file must hold a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "command") command = v.get<std::string>();
      else if (key == "seed") seed = v.get<std::uint64_t>();
      else if (key == "preset") preset = parse_preset(v.get<std::string>());
      else if (key == "mode") mode = train::parse_mode(v.get<std::string>());
      else if (key == "toggles") toggles = v.get<std::string>();
      else if (key == "epochs") epochs = v.get<std::size_t>();
      else if (key == "teacher_epochs") teacher_epochs = v.get<std::size_t>();
      else if (key == "lr") lr = v.get<double>();
      else if (key == "schedule") schedule = v.get<std::string>();
      else if (key == "lambda1") weights.sem = v.get<double>();
      else if (key == "lambda2") weights.distill = v.get<double>();
      else if (key == "lambda3") weights.ssc = v.get<double>();
      else if (key == "lambda4") weights.scal_sem = v.get<double>();
      else if (key == "lambda5") weights.scal_geo = v.get<double>();
      else if (key == "depth_noise") depth_noise = v.get<double>();
      else if (key == "count") count = v.get<std::size_t>();
      else if (key == "scenes") scenes = v.get<std::string>();
      else if (key == "val_scenes") val_scenes = v.get<std::string>();
      else if (key == "val_count") val_count = v.get<std::size_t>();
      else if (key == "seeds") seeds = v.get<std::vector<std::uint64_t>>();
      else if (key == "out") out = v.get<std::string>();
      else if (key == "checkpoint") checkpoint = v.get<std::string>();
      else if (key == "input") input = v.get<std::string>();
      else throw ConfigError("unknown config key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
}

void RunConfig::validate() const {
  pipe::Toggles::parse(toggles);
  train_config().validate();
  if (seeds.empty()) throw ConfigError("seeds must not be empty");
  if (schedule != "cosine" && schedule != "constant") throw ConfigError("schedule must be cosine or constant");
}

RunConfig load_config_file(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  base.merge(j);
  return base;
}

void write_config(const std::filesystem::path& dir, const RunConfig& cfg) {
  std::filesystem::create_directories(dir);
  std::ofstream out(dir / "config.json");
  if (!out) throw FormatError(FormatErrorKind::Io, "cannot write " + (dir / "config.json").string());
  out << cfg.to_json().dump(2) << '\n';
}

}  // namespace occ::cli
