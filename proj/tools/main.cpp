#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "occforge/checkpoint.hpp"
#include "occforge/errors.hpp"
#include "occforge/gradsuite.hpp"
#include "occforge/grid_io.hpp"
#include "run_config.hpp"

namespace fs = std::filesystem;
using namespace occ;
using occ::cli::RunConfig;

namespace {

constexpr int kOk = 0, kUsage = 1, kVerifyFailed = 2;
constexpr std::uint64_t kValSeedOffset = 100000;

void setup_logging() {
  spdlog::set_default_logger(spdlog::stderr_color_mt("occforge"));
  spdlog::set_pattern("[%H:%M:%S] %^%l%$ %v");
  const char* env = std::getenv("OCCFORGE_LOG");
  const std::string level = env ? env : "info";
  if (level == "error") spdlog::set_level(spdlog::level::err);
  else if (level == "debug") spdlog::set_level(spdlog::level::debug);
  else spdlog::set_level(spdlog::level::info);
  if (level != "error" && level != "info" && level != "debug")
    spdlog::warn("OCCFORGE_LOG={} is not one of error, info, debug; using info", level);
}

class VerificationFailed : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flags as given on the command line; unset ones fall back to --config, then defaults.
struct Flags {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> preset, mode, toggles, schedule, scenes, val_scenes, out, checkpoint, input, config;
  std::optional<std::size_t> epochs, teacher_epochs, count, val_count;
  std::optional<double> lr, depth_noise;
  std::optional<double> lambda[5];
  std::optional<std::vector<std::uint64_t>> seeds;
};

void add_base(CLI::App* app, Flags& f) {
  app->add_option("--seed", f.seed, "Random seed (default 0)");
  app->add_option("--preset", f.preset, "Scale preset: micro, toy or kitti (default toy)")
      ->check(CLI::IsMember({"micro", "toy", "kitti"}));
  app->add_option("--config", f.config, "JSON config file; flags given here override its values")
      ->check(CLI::ExistingFile);
}

void add_scenes(CLI::App* app, Flags& f) {
  app->add_option("--scenes", f.scenes, "Directory of .ocsn scene files (default: generate --count scenes)");
  app->add_option("--count", f.count, "Number of scenes to generate when --scenes is not given (default 4)");
}

void add_model(CLI::App* app, Flags& f) {
  app->add_option("--mode", f.mode, "student, teacher or distill (default student)")
      ->check(CLI::IsMember({"student", "teacher", "distill"}));
  app->add_option("--toggles", f.toggles, "Comma list from aux, icca, distill, cvt; or none, all (default none)");
  app->add_option("--depth-noise", f.depth_noise, "Gaussian sigma in meters on student depth (default 0)");
}

void add_training(CLI::App* app, Flags& f) {
  app->add_option("--epochs", f.epochs, "Passes over the training scenes (default 1)");
  app->add_option("--teacher-epochs", f.teacher_epochs, "Teacher passes in distill mode; 0 = --epochs (default 0)");
  app->add_option("--lr", f.lr, "Adam learning rate (default 0.005)");
  app->add_option("--schedule", f.schedule, "Learning rate schedule per phase: cosine or constant (default cosine)")
      ->check(CLI::IsMember({"cosine", "constant"}));
  const char* names[5] = {"--lambda1", "--lambda2", "--lambda3", "--lambda4", "--lambda5"};
  const char* help[5] = {"Weight of the 2D semantic loss (default 4)", "Weight of the distillation loss (default 3)",
                         "Weight of the voxel cross-entropy (default 2)",
                         "Weight of the semantic scene-class affinity loss (default 1)",
                         "Weight of the geometric scene-class affinity loss (default 0.5)"};
  for (int i = 0; i < 5; ++i) app->add_option(names[i], f.lambda[i], help[i]);
}

RunConfig resolve(const std::string& command, const Flags& f) {
  RunConfig c;
  if (f.config) c = cli::load_config_file(*f.config, c);
  c.command = command;
  if (f.seed) c.seed = *f.seed;
  if (f.preset) c.preset = parse_preset(*f.preset);
  if (f.mode) c.mode = train::parse_mode(*f.mode);
  if (f.toggles) c.toggles = *f.toggles;
  if (f.scenes) c.scenes = *f.scenes;
  if (f.val_scenes) c.val_scenes = *f.val_scenes;
  if (f.out) c.out = *f.out;
  if (f.checkpoint) c.checkpoint = *f.checkpoint;
  if (f.input) c.input = *f.input;
  if (f.epochs) c.epochs = *f.epochs;
  if (f.teacher_epochs) c.teacher_epochs = *f.teacher_epochs;
  if (f.count) c.count = *f.count;
  if (f.val_count) c.val_count = *f.val_count;
  if (f.lr) c.lr = *f.lr;
  if (f.schedule) c.schedule = *f.schedule;
  if (f.depth_noise) c.depth_noise = *f.depth_noise;
  double* w[5] = {&c.weights.sem, &c.weights.distill, &c.weights.ssc, &c.weights.scal_sem, &c.weights.scal_geo};
  for (int i = 0; i < 5; ++i)
    if (f.lambda[i]) *w[i] = *f.lambda[i];
  if (f.seeds) c.seeds = *f.seeds;
  c.validate();
  return c;
}

std::vector<scene::SyntheticScene> load_scene_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ConfigError("scene directory " + dir.string() + " does not exist");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".ocsn") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw ConfigError("no .ocsn files in " + dir.string());
  std::vector<scene::SyntheticScene> out;
  for (const auto& p : files) out.push_back(scene::load_scene(p));
  spdlog::info("loaded {} scenes from {}", out.size(), dir.string());
  return out;
}

std::vector<scene::SyntheticScene> generate(std::uint64_t first_seed, std::size_t n, Preset preset) {
  std::vector<scene::SyntheticScene> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(scene::generate_scene(first_seed + i, preset));
  return out;
}

std::vector<scene::SyntheticScene> scenes_for(const RunConfig& c) {
  if (!c.scenes.empty()) return load_scene_dir(c.scenes);
  if (c.count == 0) throw ConfigError("--count must be >= 1");
  spdlog::info("generating {} {} scenes from seed {}", c.count, to_string(c.preset), c.seed);
  return generate(c.seed, c.count, c.preset);
}

fs::path require_out(const RunConfig& c) {
  if (c.out.empty()) throw ConfigError("--out is required");
  fs::create_directories(c.out);
  return c.out;
}

void print_iou_table(const eval::MiouResult& r) {
  std::printf("%-14s %s\n", "class", "IoU");
  for (std::size_t k = 0; k < r.iou.size(); ++k) {
    if (r.iou[k]) std::printf("%-14s %.4f\n", class_name(k), *r.iou[k]);
    else std::printf("%-14s %s\n", class_name(k), "-");
  }
  std::printf("occupancy IoU  %.4f\n", r.occupancy_iou);
  std::printf("mIoU %.6f\n", r.miou);
}

int cmd_gen_data(const RunConfig& c) {
  const fs::path out = require_out(c);
  if (c.count == 0) throw ConfigError("--count must be >= 1");
  for (std::size_t i = 0; i < c.count; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "scene_%04zu.ocsn", i);
    scene::save_scene(out / name, scene::generate_scene(c.seed + i, c.preset));
    spdlog::debug("wrote {}", (out / name).string());
  }
  cli::write_config(out, c);
  spdlog::info("wrote {} scenes to {}", c.count, out.string());
  return kOk;
}

int cmd_train(const RunConfig& c) {
  const fs::path out = require_out(c);
  const auto scenes = scenes_for(c);
  const train::TrainConfig tcfg = c.train_config();
  ad::ParameterStore store = c.checkpoint.empty() ? ad::ParameterStore(c.seed) : ad::load_checkpoint(c.checkpoint);
  cli::write_config(out, c);
  std::optional<loss::LossCurveWriter> curve;
  std::string current;
  const auto start = std::chrono::steady_clock::now();
  train::train_model(store, tcfg, scenes, [&](std::string_view phase, std::size_t step, const loss::LossBreakdown& b) {
    if (phase != current) {
      current = phase;
      curve.emplace((out / ("loss_" + current + ".csv")).string());
    }
    curve->append(step, b);
    spdlog::debug("{} step {} loss {:.6f}", current, step, b.total.item());
    if (step % 50 == 0) spdlog::info("{} step {} loss {:.6f}", current, step, b.total.item());
  });
  ad::save_checkpoint(out / "checkpoint.ocfg", store);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  spdlog::info("trained in {:.1f}s; checkpoint {}", secs, (out / "checkpoint.ocfg").string());
  return kOk;
}

int cmd_eval(const RunConfig& c) {
  if (c.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  ad::ParameterStore store = ad::load_checkpoint(c.checkpoint);
  const auto scenes = scenes_for(c);
  const eval::MiouResult r = eval::compute_miou(train::evaluate(store, c.train_config(), scenes));
  print_iou_table(r);
  if (!c.out.empty()) {
    const fs::path out = require_out(c);
    nlohmann::json j{{"miou", r.miou}, {"occupancy_iou", r.occupancy_iou}};
    for (std::size_t k = 0; k < r.iou.size(); ++k) j["iou"][class_name(k)] = r.iou[k] ? nlohmann::json(*r.iou[k]) : nullptr;
    std::ofstream(out / "metrics.json") << j.dump(2) << '\n';
    cli::write_config(out, c);
  }
  return kOk;
}

int cmd_gradcheck(const RunConfig& c) {
  const auto cases = verify::gradient_suite(c.preset, c.seed);
  std::size_t failed = 0;
  for (const auto& k : cases) {
    std::printf("%-24s %-4s max error %.3e over %zu parameters\n", k.name.c_str(), k.report.passed() ? "ok" : "FAIL",
                k.report.max_error(), k.report.entries.size());
    for (const auto& e : k.report.entries) {
      if (!e.passed) std::printf("    %s max error %.3e\n", e.path.c_str(), e.max_error);
      spdlog::debug("{} {} {:.3e} ({} elements)", k.name, e.path, e.max_error, e.checked);
    }
    failed += !k.report.passed();
  }
  if (!c.out.empty()) cli::write_config(require_out(c), c);
  if (failed) throw VerificationFailed(std::to_string(failed) + " gradient checks failed");
  std::printf("all %zu gradient checks passed\n", cases.size());
  return kOk;
}

int cmd_ablate(const RunConfig& c) {
  const auto train_scenes = scenes_for(c);
  const auto val = c.val_scenes.empty() ? generate(c.seed + kValSeedOffset, c.val_count, c.preset)
                                        : load_scene_dir(c.val_scenes);
  train::AblationConfig a;
  a.base = c.train_config();
  a.seeds = c.seeds;
  const auto rows = train::run_ablation(a, train_scenes, val, [](const std::string& s) { spdlog::info("{}", s); });
  const std::string md = train::ablation_markdown(rows);
  std::printf("%s", md.c_str());
  if (!c.out.empty()) {
    const fs::path out = require_out(c);
    std::ofstream(out / "ablation.csv") << train::ablation_csv(rows);
    std::ofstream(out / "ablation.md") << md;
    cli::write_config(out, c);
  }
  return kOk;
}

int cmd_export_ply(const RunConfig& c) {
  if (c.input.empty()) throw ConfigError("--input is required");
  if (c.out.empty()) throw ConfigError("--out is required");
  const fs::path in = c.input;
  geo::LabelGrid grid;
  if (in.extension() == ".svox") {
    if (!c.checkpoint.empty()) throw ConfigError("--checkpoint needs a scene (.ocsn) input");
    grid = geo::load_grid(in);
  } else {
    const scene::SyntheticScene s = scene::load_scene(in);
    grid = s.labels;
    if (!c.checkpoint.empty()) {
      ad::ParameterStore store = ad::load_checkpoint(c.checkpoint);
      train::TrainConfig t = c.train_config();
      t.preset = c.preset;
      grid.labels = train::predict(store, t, s);
    }
  }
  const fs::path out = c.out;
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  eval::export_ply(grid, out);
  RunConfig saved = c;
  const fs::path dir = out.has_parent_path() ? out.parent_path() : fs::path(".");
  std::ofstream(dir / (out.stem().string() + ".config.json")) << saved.to_json().dump(2) << '\n';
  spdlog::info("wrote {}", out.string());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"occforge: monocular semantic occupancy toolkit"};
  app.require_subcommand(1);
  Flags f;

  auto* gen = app.add_subcommand("gen-data", "Write N synthetic scene files");
  add_base(gen, f);
  gen->add_option("--count", f.count, "Number of scenes (default 4)");
  gen->add_option("--out", f.out, "Output directory")->required();

  auto* tr = app.add_subcommand("train", "Train the student, the teacher, or both (distill)");
  add_base(tr, f);
  add_scenes(tr, f);
  add_model(tr, f);
  add_training(tr, f);
  tr->add_option("--checkpoint", f.checkpoint, "Resume from this checkpoint");
  tr->add_option("--out", f.out, "Output directory for checkpoint, loss curves and config")->required();

  auto* ev = app.add_subcommand("eval", "Score a checkpoint: per-class IoU and mIoU");
  add_base(ev, f);
  add_scenes(ev, f);
  add_model(ev, f);
  ev->add_option("--checkpoint", f.checkpoint, "Checkpoint to score")->required();
  ev->add_option("--out", f.out, "Optional directory for metrics.json and config");

  auto* gc = app.add_subcommand("gradcheck", "Run the finite-difference gradient suite");
  add_base(gc, f);
  gc->add_option("--out", f.out, "Optional directory for the resolved config");

  auto* ab = app.add_subcommand("ablate", "Train and score the component ablation matrix");
  add_base(ab, f);
  add_scenes(ab, f);
  add_training(ab, f);
  ab->add_option("--depth-noise", f.depth_noise, "Gaussian sigma in meters on student depth (default 0)");
  ab->add_option("--val-scenes", f.val_scenes, "Validation scene directory (default: generate --val-count)");
  ab->add_option("--val-count", f.val_count, "Validation scenes to generate (default 10)");
  ab->add_option("--seeds", f.seeds, "Training seeds (default 0 1 2)");
  ab->add_option("--out", f.out, "Optional directory for ablation.csv, ablation.md and config");

  auto* ex = app.add_subcommand("export-ply", "Export a label grid or a prediction as a PLY mesh");
  add_base(ex, f);
  add_model(ex, f);
  ex->add_option("--input", f.input, "Scene (.ocsn) or grid (.svox) file")->required();
  ex->add_option("--checkpoint", f.checkpoint, "Export this model's prediction instead of the ground truth");
  ex->add_option("--out", f.out, "Output .ply path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  CLI::App* sub = app.get_subcommands().front();
  try {
    const RunConfig c = resolve(sub->get_name(), f);
    spdlog::debug("config {}", c.to_json().dump());
    if (sub == gen) return cmd_gen_data(c);
    if (sub == tr) return cmd_train(c);
    if (sub == ev) return cmd_eval(c);
    if (sub == gc) return cmd_gradcheck(c);
    if (sub == ab) return cmd_ablate(c);
    return cmd_export_ply(c);
  } catch (const VerificationFailed& e) {
    spdlog::error("{}", e.what());
    return kVerifyFailed;
  } catch (const ConfigError& e) {
    spdlog::error("{}", e.what());
    std::cerr << "run with --help for usage\n";
    return kUsage;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kUsage;
  }
}
