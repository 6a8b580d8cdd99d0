#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "occforge/losses.hpp"
#include "occforge/metrics.hpp"
#include "occforge/optim.hpp"
#include "occforge/scenes.hpp"

namespace occ::train {

enum class Mode { Student, Teacher, Distill };

/// "student", "teacher" or "distill"; throws ConfigError otherwise.
Mode parse_mode(std::string_view name);
const char* to_string(Mode mode);

struct TrainConfig {
  Preset preset = Preset::Toy;
  Mode mode = Mode::Student;
  pipe::Toggles toggles;
  loss::LossWeights weights;
  double lr = 5e-3;
  bool cosine = true;               // decay lr to 0 over each phase
  std::size_t epochs = 1;          // passes over the training scenes
  std::size_t teacher_epochs = 0;  // distill phase 1; 0 = same as epochs
  std::uint64_t seed = 0;
  double depth_noise = 0.0;        // sigma in meters on student depth

  void validate() const;
};

/// Called after every optimizer step with the phase ("teacher" or "student").
using StepCallback = std::function<void(std::string_view phase, std::size_t step, const loss::LossBreakdown&)>;

/// Student losses on one scene. `teacher_volume` is the frozen teacher's
/// conditioned volume for this scene, required when distillation is on.
loss::LossBreakdown student_step_loss(ad::ParamBinder& params, const Tensor* teacher_volume,
                                      const scene::SyntheticScene& scene, const TrainConfig& cfg, Rng& noise);
loss::LossBreakdown teacher_step_loss(ad::ParamBinder& params, const scene::SyntheticScene& scene,
                                      const TrainConfig& cfg);

/// Teacher conditioned volume for every scene, computed with frozen parameters.
std::vector<Tensor> teacher_targets(ad::ParameterStore& store, const TrainConfig& cfg,
                                    std::span<const scene::SyntheticScene> scenes);

/// Trains per `cfg.mode`. Distill runs a teacher phase followed by a student
/// phase with distillation enabled against the frozen teacher. Scene order is
/// reshuffled every epoch from `cfg.seed`. New parameters are initialized from
/// the store's seed; existing ones continue training.
void train_model(ad::ParameterStore& store, const TrainConfig& cfg, std::span<const scene::SyntheticScene> scenes,
                 const StepCallback& on_step = {});

/// Argmax labels of the student (or teacher in teacher mode) on one scene.
std::vector<std::uint8_t> predict(ad::ParameterStore& store, const TrainConfig& cfg, const scene::SyntheticScene& s);

/// Confusion over all voxels of all scenes.
eval::ConfusionMatrix evaluate(ad::ParameterStore& store, const TrainConfig& cfg,
                               std::span<const scene::SyntheticScene> scenes);

struct AblationRow {
  std::string name;
  pipe::Toggles toggles;
  std::vector<double> miou;  // one per seed
  double mean = 0.0, sd = 0.0;
};

/// Baseline, +aux, +icca, +aux+icca and all (aux, icca, distill).
std::vector<AblationRow> ablation_rows();

/// Sample mean and standard deviation (n - 1 denominator; 0 for one sample).
void summarize(AblationRow& row);

struct AblationConfig {
  TrainConfig base;  // mode and toggles are overridden per row
  std::vector<std::uint64_t> seeds{0, 1, 2};
};

/// Trains every row once per seed on `train_scenes` and scores mIoU on
/// `val_scenes`. The teacher for the distillation row is trained once per seed.
std::vector<AblationRow> run_ablation(const AblationConfig& cfg, std::span<const scene::SyntheticScene> train_scenes,
                                      std::span<const scene::SyntheticScene> val_scenes,
                                      const std::function<void(const std::string&)>& log = {});

std::string ablation_csv(const std::vector<AblationRow>& rows);
std::string ablation_markdown(const std::vector<AblationRow>& rows);

}  // namespace occ::train
