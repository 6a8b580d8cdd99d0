#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include "occforge/geometry.hpp"
#include "occforge/pipeline.hpp"
#include "occforge/presets.hpp"
#include "occforge/rng.hpp"

namespace occ::scene {

inline constexpr char kSceneMagic[] = "OCSN";
inline constexpr std::uint32_t kSceneVersion = 1;

struct SyntheticScene {
  geo::LabelGrid labels;                 // full-resolution ground truth, every voxel labeled
  std::vector<geo::CameraModel> cameras;  // oldest first, frame t last
  std::vector<Tensor> images;             // [3,H,W] in [0,1]
  std::vector<Tensor> depths;             // [H,W] camera-frame z, 0 = no hit
  geo::PointCloud cloud;                  // labeled surface samples seen from frame t

  std::size_t frames() const { return cameras.size(); }
  friend bool operator==(const SyntheticScene&, const SyntheticScene&) = default;
};

struct SceneOptions {
  bool plane_only = false;     // ground plane and nothing else
  double image_noise = 0.02;   // Gaussian sigma on image colors
};

/// Ground plane, 1-3 buildings, 0-4 objects and an occasional rare vehicle,
/// seen by a camera that moves forward along +x with small yaw jitter.
/// Deterministic per (seed, preset, options).
SyntheticScene generate_scene(std::uint64_t seed, Preset preset, const SceneOptions& options = {});

/// Flat RGB color per class in [0,1]; class 0 is the sky/background color.
std::array<double, 3> class_color(std::size_t c);

struct RayHit {
  double depth = 0.0;  // camera-frame z of the first occupied voxel entry, 0 = miss
  std::uint8_t label = 0;
  geo::VoxelIndex voxel;
};

/// First occupied voxel along the ray through pixel (u, v), by DDA traversal.
RayHit cast_ray(const geo::LabelGrid& grid, const geo::CameraModel& cam, double u, double v);

/// Camera-frame z of the first occupied voxel per pixel, 0 where the ray
/// leaves the grid. Hits are nudged 1e-6 past the entry face so that
/// unprojected points fall inside the hit voxel.
Tensor render_depth(const geo::LabelGrid& grid, const geo::CameraModel& cam);

/// Z-buffered label image [H*W] row-major for `cam`'s raster: every valid point
/// writes its label to pixel (round(v), round(u)) when it is the nearest point
/// there so far. Untouched pixels are 255.
std::vector<std::uint8_t> project_labels_to_image(const geo::PointCloud& cloud, const geo::CameraModel& cam);

/// Sparse 2D ground truth at an h x w feature raster of frame t.
std::vector<std::uint8_t> sparse_labels_2d(const SyntheticScene& scene, std::size_t h, std::size_t w);

/// Zero-mean Gaussian noise on nonzero depths, clamped at 0.
Tensor noisy_depth(const Tensor& depth, double sigma, Rng& rng);

/// Network input for frame `i`. Depth noise with `sigma` > 0 draws from `rng`.
pipe::FrameInput frame_input(const SyntheticScene& scene, std::size_t i, double sigma = 0.0, Rng* rng = nullptr);

/// Layout (little-endian): "OCSN", u32 version, SVOX grid block, u32 frame
/// count, per frame { f64 K[3][3], f64 world_to_camera[4][4], u32 H, u32 W,
/// f64 image[3][H][W], f64 depth[H][W] }, then u64 point count, f64 xyz per
/// point, u8 labeled flag, u8 label per point when labeled.
void write_scene(std::ostream& out, const SyntheticScene& scene);
SyntheticScene read_scene(std::istream& in);
void save_scene(const std::filesystem::path& path, const SyntheticScene& scene);
SyntheticScene load_scene(const std::filesystem::path& path);

}  // namespace occ::scene
