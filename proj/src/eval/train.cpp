#include "occforge/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <sstream>

#include "occforge/errors.hpp"

namespace occ::train {

namespace {

constexpr std::uint64_t kOrderSalt = 0x0bde4a11c0ffee01ULL;
constexpr std::uint64_t kNoiseSalt = 0x5eed0f0d15ea5e02ULL;
constexpr std::uint64_t kEvalSalt = 0xe7a1e7a1e7a1e7a1ULL;

const PresetSpec& check_scene(const PresetSpec& spec, const scene::SyntheticScene& s) {
  if (s.labels.spec != spec.grid) throw ConfigError("scene grid does not match the preset grid");
  if (s.frames() < spec.teacher_frames) throw ConfigError("scene has fewer frames than the preset needs");
  return spec;
}

std::vector<pipe::FrameInput> teacher_frames(const scene::SyntheticScene& s, std::size_t n) {
  std::vector<pipe::FrameInput> frames;
  for (std::size_t i = s.frames() - n; i < s.frames(); ++i) frames.push_back(scene::frame_input(s, i));
  return frames;
}

bool has_teacher(const ad::ParameterStore& store) { return store.contains("teacher/query_embed"); }

template <typename StepFn>
void run_phase(ad::ParameterStore& store, const TrainConfig& cfg, std::size_t epochs, std::size_t scenes,
               std::string_view phase, const StepCallback& on_step, StepFn&& loss_of) {
  ad::Adam opt({.lr = cfg.lr});
  Rng order_rng(cfg.seed ^ kOrderSalt ^ stable_hash(phase));
  std::vector<std::size_t> order(scenes);
  std::size_t step = 0;
  const double total = static_cast<double>(epochs * scenes);
  for (std::size_t e = 0; e < epochs; ++e) {
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<std::size_t>(order_rng.integer(0, static_cast<std::int64_t>(i) - 1))]);
    }
    for (std::size_t idx : order) {
      if (cfg.cosine) opt.set_lr(0.5 * cfg.lr * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / total)));
      ad::Tape tape;
      ad::ParamBinder binder(tape, store, true);
      const loss::LossBreakdown b = loss_of(binder, idx);
      tape.backward(b.total);
      opt.step(store, binder.gradients());
      if (on_step) on_step(phase, step, b);
      ++step;
    }
  }
}

}  // namespace

Mode parse_mode(std::string_view name) {
  if (name == "student") return Mode::Student;
  if (name == "teacher") return Mode::Teacher;
  if (name == "distill") return Mode::Distill;
  throw ConfigError("unknown mode '" + std::string(name) + "' (expected student, teacher or distill)");
}

const char* to_string(Mode mode) {
  switch (mode) {
    case Mode::Student:
      return "student";
    case Mode::Teacher:
      return "teacher";
    case Mode::Distill:
      return "distill";
  }
  return "?";
}

void TrainConfig::validate() const {
  weights.validate();
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be > 0");
  if (epochs == 0) throw ConfigError("epochs must be >= 1");
  if (!(depth_noise >= 0.0)) throw ConfigError("depth noise must be >= 0");
}

loss::LossBreakdown student_step_loss(ad::ParamBinder& params, const Tensor* teacher_volume,
                                      const scene::SyntheticScene& s, const TrainConfig& cfg, Rng& noise) {
  const PresetSpec spec = preset_spec(cfg.preset);
  check_scene(spec, s);
  const pipe::BranchConfig bcfg = pipe::BranchConfig::student(spec, cfg.toggles);
  const pipe::FrameInput frame = scene::frame_input(s, s.frames() - 1, cfg.depth_noise, &noise);
  const pipe::BranchOutputs out = pipe::run_student(params, frame, bcfg);
  loss::LossTerms terms;
  terms.ssc = loss::ssc_loss(out.voxels, s.labels.labels);
  const loss::ScalTerms scal = loss::scal_losses(out.voxels, s.labels.labels);
  terms.scal_sem = scal.sem;
  terms.scal_geo = scal.geo;
  if (cfg.toggles.aux_loss) {
    const Shape& ls = out.sem2d->logits.shape();
    terms.sem = loss::semantic_aux_loss(*out.sem2d, scene::sparse_labels_2d(s, ls[1], ls[2]));
  }
  if (cfg.toggles.distill) {
    if (teacher_volume == nullptr) throw ConfigError("distillation needs the teacher's volume");
    ad::Tape& tape = params.tape();
    const pipe::VoxelFeatureVolume teacher{tape.constant(*teacher_volume), pipe::Stage::Conditioned,
                                           pipe::Branch::Teacher};
    terms.distill = loss::distill_loss(teacher, out.conditioned);
  }
  return loss::total_loss(params.tape(), terms, cfg.weights);
}

loss::LossBreakdown teacher_step_loss(ad::ParamBinder& params, const scene::SyntheticScene& s, const TrainConfig& cfg) {
  const PresetSpec spec = preset_spec(cfg.preset);
  check_scene(spec, s);
  const pipe::BranchConfig bcfg = pipe::BranchConfig::teacher(spec);
  const auto frames = teacher_frames(s, bcfg.frames);
  const pipe::BranchOutputs out = pipe::run_teacher(params, frames, bcfg);
  loss::LossTerms terms;
  terms.ssc = loss::ssc_loss(out.voxels, s.labels.labels);
  const loss::ScalTerms scal = loss::scal_losses(out.voxels, s.labels.labels);
  terms.scal_sem = scal.sem;
  terms.scal_geo = scal.geo;
  return loss::total_loss(params.tape(), terms, cfg.weights);
}

std::vector<Tensor> teacher_targets(ad::ParameterStore& store, const TrainConfig& cfg,
                                    std::span<const scene::SyntheticScene> scenes) {
  if (!has_teacher(store)) throw ConfigError("distillation needs a trained teacher (train with --mode distill)");
  const PresetSpec spec = preset_spec(cfg.preset);
  const pipe::BranchConfig bcfg = pipe::BranchConfig::teacher(spec);
  std::vector<Tensor> out;
  for (const auto& s : scenes) {
    check_scene(spec, s);
    ad::Tape tape;
    ad::ParamBinder binder(tape, store, false);
    out.push_back(pipe::run_teacher(binder, teacher_frames(s, bcfg.frames), bcfg).conditioned.tensor.value());
  }
  return out;
}

void train_model(ad::ParameterStore& store, const TrainConfig& cfg, std::span<const scene::SyntheticScene> scenes,
                 const StepCallback& on_step) {
  cfg.validate();
  if (scenes.empty()) throw ConfigError("no training scenes");
  if (cfg.mode == Mode::Teacher || cfg.mode == Mode::Distill) {
    const std::size_t epochs = cfg.mode == Mode::Distill && cfg.teacher_epochs ? cfg.teacher_epochs : cfg.epochs;
    run_phase(store, cfg, epochs, scenes.size(), "teacher", on_step,
              [&](ad::ParamBinder& b, std::size_t i) { return teacher_step_loss(b, scenes[i], cfg); });
  }
  if (cfg.mode == Mode::Teacher) return;
  TrainConfig scfg = cfg;
  if (cfg.mode == Mode::Distill) scfg.toggles.distill = true;
  std::vector<Tensor> targets;
  if (scfg.toggles.distill) targets = teacher_targets(store, scfg, scenes);
  Rng noise(cfg.seed ^ kNoiseSalt);
  run_phase(store, scfg, cfg.epochs, scenes.size(), "student", on_step, [&](ad::ParamBinder& b, std::size_t i) {
    return student_step_loss(b, targets.empty() ? nullptr : &targets[i], scenes[i], scfg, noise);
  });
}

std::vector<std::uint8_t> predict(ad::ParameterStore& store, const TrainConfig& cfg, const scene::SyntheticScene& s) {
  const PresetSpec spec = preset_spec(cfg.preset);
  check_scene(spec, s);
  ad::Tape tape;
  ad::ParamBinder binder(tape, store, false);
  if (cfg.mode == Mode::Teacher) {
    const pipe::BranchConfig bcfg = pipe::BranchConfig::teacher(spec);
    return pipe::run_teacher(binder, teacher_frames(s, bcfg.frames), bcfg).voxels.labels();
  }
  pipe::Toggles t = cfg.toggles;
  t.aux_loss = false;  // the 2D head does not affect voxel predictions
  Rng noise(cfg.seed ^ kEvalSalt);
  const pipe::FrameInput frame = scene::frame_input(s, s.frames() - 1, cfg.depth_noise, &noise);
  return pipe::run_student(binder, frame, pipe::BranchConfig::student(spec, t)).voxels.labels();
}

eval::ConfusionMatrix evaluate(ad::ParameterStore& store, const TrainConfig& cfg,
                               std::span<const scene::SyntheticScene> scenes) {
  eval::ConfusionMatrix cm(preset_spec(cfg.preset).dims.classes);
  for (const auto& s : scenes) cm.add(predict(store, cfg, s), s.labels.labels);
  return cm;
}

std::vector<AblationRow> ablation_rows() {
  using pipe::Toggles;
  return {{"baseline", Toggles::parse("none"), {}, 0, 0},
          {"+aux", Toggles::parse("aux"), {}, 0, 0},
          {"+icca", Toggles::parse("icca"), {}, 0, 0},
          {"+aux+icca", Toggles::parse("aux,icca"), {}, 0, 0},
          {"all", Toggles::parse("aux,icca,distill"), {}, 0, 0}};
}

void summarize(AblationRow& row) {
  const double n = static_cast<double>(row.miou.size());
  row.mean = row.miou.empty() ? 0.0 : std::accumulate(row.miou.begin(), row.miou.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : row.miou) ss += (v - row.mean) * (v - row.mean);
  row.sd = row.miou.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
}

std::vector<AblationRow> run_ablation(const AblationConfig& cfg, std::span<const scene::SyntheticScene> train_scenes,
                                      std::span<const scene::SyntheticScene> val_scenes,
                                      const std::function<void(const std::string&)>& log) {
  if (cfg.seeds.empty()) throw ConfigError("ablation needs at least one seed");
  std::vector<AblationRow> rows = ablation_rows();
  for (std::uint64_t seed : cfg.seeds) {
    TrainConfig tcfg = cfg.base;
    tcfg.seed = seed;
    tcfg.mode = Mode::Teacher;
    if (tcfg.teacher_epochs) tcfg.epochs = tcfg.teacher_epochs;
    ad::ParameterStore teacher(seed);
    train_model(teacher, tcfg, train_scenes);
    for (AblationRow& row : rows) {
      TrainConfig rcfg = cfg.base;
      rcfg.seed = seed;
      rcfg.mode = Mode::Student;
      rcfg.toggles = row.toggles;
      ad::ParameterStore store(seed);
      if (row.toggles.distill)
        for (const auto& [path, value] : teacher.entries()) store.set(path, value);
      train_model(store, rcfg, train_scenes);
      const double miou = eval::compute_miou(evaluate(store, rcfg, val_scenes)).miou;
      row.miou.push_back(miou);
      if (log) {
        char buf[128];
        std::snprintf(buf, sizeof buf, "seed %llu %-10s mIoU %.4f", static_cast<unsigned long long>(seed),
                      row.name.c_str(), miou);
        log(buf);
      }
    }
  }
  for (AblationRow& row : rows) summarize(row);
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out << "row,toggles,seed_index,miou\n";
  char buf[32];
  for (const AblationRow& r : rows)
    for (std::size_t i = 0; i < r.miou.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", r.miou[i]);
      out << r.name << ',' << '"' << r.toggles.str() << '"' << ',' << i << ',' << buf << '\n';
    }
  return out.str();
}

std::string ablation_markdown(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out << "| row | toggles | mIoU (mean ± sd) | per seed |\n|---|---|---|---|\n";
  char buf[64];
  for (const AblationRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%.2f ± %.2f", 100.0 * r.mean, 100.0 * r.sd);
    out << "| " << r.name << " | " << r.toggles.str() << " | " << buf << " |";
    for (std::size_t i = 0; i < r.miou.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%s%.2f", i ? ", " : " ", 100.0 * r.miou[i]);
      out << buf;
    }
    out << " |\n";
  }
  return out.str();
}

}  // namespace occ::train
