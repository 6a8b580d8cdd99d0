#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "occforge/tensor.hpp"

namespace occ::geo {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<std::array<double, 3>, 3>;
using Mat4 = std::array<std::array<double, 4>, 4>;

Mat4 identity4();
/// Inverse of a rigid transform [R t; 0 1].
Mat4 rigid_inverse(const Mat4& m);
Mat4 compose(const Mat4& a, const Mat4& b);
/// a*[p;1], accumulated left to right per row.
Vec3 transform_point(const Mat4& a, const Vec3& p);

struct Intrinsics {
  double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
  friend bool operator==(const Intrinsics&, const Intrinsics&) = default;
};

/// Pinhole camera: pixel (u, v) = (fx*x/z + cx, fy*y/z + cy) in the camera frame
/// (x right, y down, z forward). Construction validates fx, fy > 0 and that the
/// extrinsic rotation is orthonormal with determinant +1 (within 1e-9).
class CameraModel {
 public:
  CameraModel(Intrinsics intrinsics, Mat4 world_to_camera, std::size_t height, std::size_t width);

  const Intrinsics& intrinsics() const { return k_; }
  Mat3 intrinsic_matrix() const;
  const Mat4& world_to_camera() const { return extrinsics_; }
  const Mat4& camera_to_world() const { return inverse_; }
  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  Vec3 center() const { return {inverse_[0][3], inverse_[1][3], inverse_[2][3]}; }

  /// Same viewing geometry on an h x w raster: normalized image coordinates
  /// u/(W-1), v/(H-1) are preserved.
  CameraModel rescaled(std::size_t height, std::size_t width) const;

  friend bool operator==(const CameraModel&, const CameraModel&) = default;

 private:
  Intrinsics k_;
  Mat4 extrinsics_;
  Mat4 inverse_;
  std::size_t height_, width_;
};

/// World-to-camera transform for a camera at `position` looking along world +x
/// rotated by `yaw` about world +z, with world z up.
Mat4 forward_looking_extrinsics(const Vec3& position, double yaw);

struct VoxelIndex {
  std::size_t x = 0, y = 0, z = 0;
  friend bool operator==(const VoxelIndex&, const VoxelIndex&) = default;
  friend auto operator<=>(const VoxelIndex&, const VoxelIndex&) = default;
};

/// Regular grid with half-open voxel intervals [origin + i*res, origin + (i+1)*res).
struct VoxelGridSpec {
  Vec3 origin{0.0, 0.0, 0.0};
  double resolution = 1.0;
  std::array<std::size_t, 3> dims{1, 1, 1};

  VoxelGridSpec() = default;
  VoxelGridSpec(Vec3 origin, double resolution, std::array<std::size_t, 3> dims);

  std::size_t voxel_count() const { return dims[0] * dims[1] * dims[2]; }
  /// x-major linear index (matches Tensor[X,Y,Z,...] row-major layout).
  std::size_t linear(const VoxelIndex& i) const { return (i.x * dims[1] + i.y) * dims[2] + i.z; }
  VoxelIndex unlinear(std::size_t l) const;
  bool contains(const VoxelIndex& i) const { return i.x < dims[0] && i.y < dims[1] && i.z < dims[2]; }
  Vec3 centroid(const VoxelIndex& i) const;
  /// Voxel containing p (floor indexing), or nullopt outside the grid.
  std::optional<VoxelIndex> locate(const Vec3& p) const;
  /// Grid `factor` times coarser over the same extent; dims must divide.
  VoxelGridSpec coarsened(std::size_t factor) const;

  friend bool operator==(const VoxelGridSpec&, const VoxelGridSpec&) = default;
};

/// SemanticKITTI geometry: [0, 51.2] x [-25.6, 25.6] x [-2, 4.4] m at 0.2 m.
VoxelGridSpec kitti_grid();
/// Desk-scale default: 32 x 32 x 8 voxels at 0.4 m.
VoxelGridSpec toy_grid();
VoxelGridSpec micro_grid();

inline constexpr std::uint8_t kIgnoreLabel = 255;

struct PointCloud {
  std::vector<Vec3> points;
  std::vector<std::uint8_t> labels;  // empty or one per point

  bool labeled() const { return !labels.empty(); }
  friend bool operator==(const PointCloud&, const PointCloud&) = default;
};

/// Per-voxel labels in VoxelGridSpec::linear order.
struct LabelGrid {
  VoxelGridSpec spec;
  std::vector<std::uint8_t> labels;

  LabelGrid() = default;
  LabelGrid(VoxelGridSpec spec, std::uint8_t fill);

  std::uint8_t at(const VoxelIndex& i) const { return labels[spec.linear(i)]; }
  std::uint8_t& at(const VoxelIndex& i) { return labels[spec.linear(i)]; }
  /// Occupied = labeled and not free (class 0).
  bool occupied(const VoxelIndex& i) const {
    const auto l = at(i);
    return l != 0 && l != kIgnoreLabel;
  }

  friend bool operator==(const LabelGrid&, const LabelGrid&) = default;
};

struct Projection {
  double u = 0.0, v = 0.0;    // pixels
  double depth = 0.0;         // camera-frame z
  double un = 0.0, vn = 0.0;  // u/(W-1), v/(H-1)
  bool valid = false;
};

/// Back-projects every `stride`-th pixel with positive depth into world space.
PointCloud unproject_depth(const Tensor& depth, const CameraModel& cam, std::size_t stride = 1);

Projection project_point(const Vec3& p, const CameraModel& cam);
std::vector<Projection> project_points(const PointCloud& cloud, const CameraModel& cam);

struct Voxelization {
  std::vector<std::uint8_t> occupied;  // per voxel, 0/1
  std::optional<LabelGrid> labels;     // majority label (ties -> lowest id); free where empty
};

Voxelization voxelize(const PointCloud& cloud, const VoxelGridSpec& spec);

struct RefPoints {
  std::vector<double> coords;        // [N,2] normalized (u, v)
  std::vector<std::uint8_t> valid;   // [N]
  std::size_t size() const { return valid.size(); }
};

/// Projects voxel centroids into the image. Throws ShapeError for indices outside the grid.
RefPoints voxel_refpoints(const VoxelGridSpec& spec, std::span<const VoxelIndex> indices, const CameraModel& cam);

}  // namespace occ::geo
