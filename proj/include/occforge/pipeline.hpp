#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "occforge/attention.hpp"
#include "occforge/geometry.hpp"
#include "occforge/presets.hpp"

namespace occ::pipe {

using ad::ParamBinder;
using ad::Var;

/// One camera frame as the network sees it.
struct FrameInput {
  Tensor image;  // [3,H,W]
  Tensor depth;  // [H,W] meters, 0 = no measurement
  geo::CameraModel camera;
};

struct FeatureMap2D {
  Var tensor;  // [d,h,w]
  std::size_t frame = 0;
  std::size_t stride = 4;
};

struct QuerySet {
  std::vector<geo::VoxelIndex> indices;  // ascending linear order, unique
  std::vector<std::size_t> linear;
  Var features;  // [N,d]
};

enum class Stage { Initial, Refined, Conditioned };
enum class Branch { Student, Teacher };

struct VoxelFeatureVolume {
  Var tensor;  // [X,Y,Z,d] at feature scale
  Stage stage = Stage::Initial;
  Branch branch = Branch::Student;
};

struct SemanticVoxelMap {
  Var logits;  // [X,Y,Z,C] at full resolution
  /// Per-voxel argmax in linear order; ties go to the lowest class id.
  std::vector<std::uint8_t> labels() const;
};

struct SemanticMap2D {
  Var logits;  // [C,h,w]
};

struct Toggles {
  bool aux_loss = false;
  bool icca = false;
  bool distill = false;
  bool cvt = false;

  /// Comma-separated subset of {aux, icca, distill, cvt}, or "none" / "all".
  static Toggles parse(std::string_view text);
  std::string str() const;
  friend bool operator==(const Toggles&, const Toggles&) = default;
};

struct BranchConfig {
  Branch branch = Branch::Student;
  std::string prefix = "student/";
  std::size_t width = 1;   // backbone width multiplier
  std::size_t frames = 1;  // temporal frames consumed
  Toggles toggles;
  PresetSpec preset;

  /// Student: 1 frame, width >= 1. Teacher: >= 2 frames.
  void validate() const;

  static BranchConfig student(const PresetSpec& preset, Toggles toggles);
  /// Width 2, preset.teacher_frames frames, ICCA and CVT on.
  static BranchConfig teacher(const PresetSpec& preset);
};

/// conv3x3/s2 + SiLU, conv3x3/s2 + SiLU, 1x1 projection to d channels.
/// Parameters: prefix + {conv1,conv2,proj}.{w,b}. H and W must be divisible by 4.
FeatureMap2D extract_features(ParamBinder& params, Var image, const std::string& prefix, std::size_t base_channels,
                              std::size_t width, std::size_t dim);

/// Per-voxel keep decision from raw occupancy. A 3x3x3 convolution (prefix +
/// "corrector.{w,b}") produces keep-logits; voxels with sigmoid(logit) > 0.5
/// survive. Initialized to reproduce the raw occupancy.
std::vector<std::uint8_t> correct_occupancy(ParamBinder& params, const std::vector<std::uint8_t>& occupied,
                                            const geo::VoxelGridSpec& grid, const std::string& prefix);

/// unproject -> voxelize on `grid` -> correct. Every kept voxel gets the shared
/// learned embedding prefix + "query_embed". Depth maps from several frames are
/// unioned. Throws DegenerateSceneError when nothing is kept.
QuerySet generate_depth_queries(ParamBinder& params, std::span<const FrameInput> frames, const geo::VoxelGridSpec& grid,
                                std::size_t dim, const std::string& prefix);

/// Volume with visible rows at their voxels and `token` everywhere else.
Var fill_mask_tokens(Var visible, std::span<const std::size_t> linear, Var token, const geo::VoxelGridSpec& grid);

/// Nearest upsampling by `factor`, then a per-voxel linear map d -> classes
/// (prefix + "head.{w,b}"). The map is applied before upsampling, which gives
/// identical values at a fraction of the cost.
SemanticVoxelMap decode_semantic_voxels(ParamBinder& params, Var volume, std::size_t factor, std::size_t classes,
                                        const std::string& prefix);

/// Two 3x3 convolutions with SiLU and a 1x1 head to `classes` (prefix + "sem2d/").
SemanticMap2D decode_semantics_2d(ParamBinder& params, const FeatureMap2D& fmap, std::size_t classes,
                                  const std::string& prefix);

struct BranchOutputs {
  std::vector<FeatureMap2D> features;  // one per frame, frame t last
  QuerySet queries;
  Var visible;                 // DCA (student) or temporal mean (teacher) rows, [N,d]
  VoxelFeatureVolume initial;  // F^3D
  VoxelFeatureVolume refined;  // after DSA
  VoxelFeatureVolume conditioned;
  SemanticVoxelMap voxels;
  std::optional<SemanticMap2D> sem2d;  // student with aux_loss only
};

BranchOutputs run_student(ParamBinder& params, const FrameInput& frame, const BranchConfig& cfg);
/// `frames` oldest first; frame t (last) supplies the ICCA conditioning and the grid frame.
BranchOutputs run_teacher(ParamBinder& params, std::span<const FrameInput> frames, const BranchConfig& cfg);

}  // namespace occ::pipe
