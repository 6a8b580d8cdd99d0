#pragma once

#include <cstddef>
#include <string>
#include <string_view>

#include "occforge/geometry.hpp"

namespace occ {

enum class Preset { Micro, Toy, Kitti };

/// "micro", "toy" or "kitti"; throws ConfigError otherwise.
Preset parse_preset(std::string_view name);
const char* to_string(Preset preset);

/// Network sizes shared by both branches.
struct ModelDims {
  std::size_t dim = 32;            // d
  std::size_t heads = 2;
  std::size_t points = 4;          // K
  std::size_t base_channels = 16;  // backbone channels at width 1
  std::size_t classes = 8;         // C, including free (0)
  std::size_t dsa_layers = 1;
};

struct PresetSpec {
  Preset preset = Preset::Toy;
  geo::VoxelGridSpec grid;  // full-resolution label grid
  std::size_t image_h = 0, image_w = 0;
  geo::Intrinsics intrinsics;
  /// Feature grid = grid.coarsened(upsample); decoding upsamples back.
  std::size_t upsample = 1;
  ModelDims dims;
  std::size_t teacher_frames = 3;
  double camera_height = 0.0;  // world z of the frame-t camera

  geo::VoxelGridSpec feature_grid() const { return grid.coarsened(upsample); }
};

PresetSpec preset_spec(Preset preset);

/// Class palette of the synthetic scenes.
enum SemanticClass : std::uint8_t {
  kFree = 0,
  kRoad = 1,
  kBuilding = 2,
  kCar = 3,
  kPerson = 4,
  kPole = 5,
  kVegetation = 6,
  kRareVehicle = 7,
};
inline constexpr std::size_t kNumClasses = 8;
const char* class_name(std::size_t c);

}  // namespace occ
