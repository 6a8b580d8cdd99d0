#pragma once

#include <array>
#include <fstream>
#include <span>
#include <string>

#include "occforge/pipeline.hpp"

namespace occ::loss {

using ad::Var;

struct LossWeights {
  double sem = 4.0;       // lambda1
  double distill = 3.0;   // lambda2
  double ssc = 2.0;       // lambda3
  double scal_sem = 1.0;  // lambda4
  double scal_geo = 0.5;  // lambda5

  /// Throws ConfigError on a negative or non-finite weight.
  void validate() const;
  std::array<double, 5> as_array() const { return {sem, distill, ssc, scal_sem, scal_geo}; }
};

/// Raw terms. A default-constructed Var marks a disabled term.
struct LossTerms {
  Var sem, distill, ssc, scal_sem, scal_geo;
};

struct LossBreakdown {
  Var sem, distill, ssc, scal_sem, scal_geo, total;

  /// sem, distill, ssc, scal_sem, scal_geo, total.
  std::array<double, 6> values() const;
};

/// Mean cross-entropy over labeled pixels; `sparse_gt` is [h*w] row-major, 255 = ignore.
Var semantic_aux_loss(const pipe::SemanticMap2D& pred, std::span<const std::uint8_t> sparse_gt);

/// Mean voxel cross-entropy over labeled voxels, gt in linear grid order.
Var ssc_loss(const pipe::SemanticVoxelMap& pred, std::span<const std::uint8_t> gt);

struct ScalTerms {
  Var sem, geo;
};
/// Scene-class affinity losses on the softmax probabilities of `pred`.
ScalTerms scal_losses(const pipe::SemanticVoxelMap& pred, std::span<const std::uint8_t> gt);

/// Mean over voxels of KL(softmax(teacher) || softmax(student)) along channels.
/// The teacher is detached; when it lives on another tape its value is copied in
/// as a constant.
Var distill_loss(const pipe::VoxelFeatureVolume& teacher, const pipe::VoxelFeatureVolume& student);

/// Weighted total. Disabled terms become constant zeros on `tape`.
LossBreakdown total_loss(ad::Tape& tape, const LossTerms& terms, const LossWeights& weights);

/// CSV with header step,sem,distill,ssc,scal_sem,scal_geo,total; values at full precision.
class LossCurveWriter {
 public:
  explicit LossCurveWriter(const std::string& path);
  void append(std::size_t step, const LossBreakdown& b);

 private:
  std::ofstream out_;
};

}  // namespace occ::loss
