#include "occforge/presets.hpp"

#include "occforge/errors.hpp"

namespace occ {

Preset parse_preset(std::string_view name) {
  if (name == "micro") return Preset::Micro;
  if (name == "toy") return Preset::Toy;
  if (name == "kitti") return Preset::Kitti;
  throw ConfigError("unknown preset '" + std::string(name) + "' (expected micro, toy or kitti)");
}

const char* to_string(Preset preset) {
  switch (preset) {
    case Preset::Micro:
      return "micro";
    case Preset::Toy:
      return "toy";
    case Preset::Kitti:
      return "kitti";
  }
  return "?";
}

PresetSpec preset_spec(Preset preset) {
  PresetSpec s;
  s.preset = preset;
  switch (preset) {
    case Preset::Micro:
      s.grid = geo::micro_grid();
      s.image_h = 16;
      s.image_w = 16;
      s.intrinsics = {8.0, 8.0, 7.5, 7.5};
      s.upsample = 2;
      s.dims = {.dim = 8, .heads = 2, .points = 2, .base_channels = 4};
      s.teacher_frames = 2;
      s.camera_height = 0.0;
      break;
    case Preset::Toy:
      s.grid = geo::toy_grid();
      s.image_h = 48;
      s.image_w = 64;
      s.intrinsics = {32.0, 32.0, 31.5, 23.5};
      // Block-constant upsampling from a coarser grid cannot represent thin
      // structures, so the toy grid decodes at full resolution.
      s.upsample = 1;
      s.dims = {.dim = 32, .heads = 2, .points = 4, .base_channels = 16};
      s.teacher_frames = 3;
      s.camera_height = 0.0;
      break;
    case Preset::Kitti:
      s.grid = geo::kitti_grid();
      s.image_h = 376;
      s.image_w = 1240;
      s.intrinsics = {707.0912, 707.0912, 601.8873, 183.1104};
      s.upsample = 2;
      s.dims = {.dim = 32, .heads = 2, .points = 4, .base_channels = 16};
      s.teacher_frames = 3;
      s.camera_height = 0.0;
      break;
  }
  return s;
}

const char* class_name(std::size_t c) {
  static const char* names[] = {"free", "road", "building", "car", "person", "pole", "vegetation", "rare-vehicle"};
  return c < kNumClasses ? names[c] : "unknown";
}

}  // namespace occ
