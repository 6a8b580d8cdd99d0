#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "occforge/geometry.hpp"

namespace occ::eval {

/// counts[g * C + p] for ground truth g and prediction p over labeled voxels.
struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::uint64_t> counts;
  std::uint64_t ignored = 0;

  explicit ConfusionMatrix(std::size_t classes = 0) : classes(classes), counts(classes * classes, 0) {}

  /// Voxels with gt == ignore are counted in `ignored` only.
  void add(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, std::uint8_t ignore = 255);
  void merge(const ConfusionMatrix& other);
  std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts[gt * classes + pred]; }
  std::uint64_t total() const;
};

struct MiouResult {
  /// Per class; empty for classes absent from both gt and prediction.
  std::vector<std::optional<double>> iou;
  double miou = 0.0;           // over present semantic classes, free (0) excluded
  double occupancy_iou = 0.0;  // occupied vs free
};

MiouResult compute_miou(const ConfusionMatrix& cm);
MiouResult compute_miou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, std::size_t classes);

/// ASCII PLY with 8 vertices and 12 triangles per voxel that is neither free
/// nor ignored, colored by class.
void export_ply(const geo::LabelGrid& grid, const std::filesystem::path& path);

}  // namespace occ::eval
