#include "occforge/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "occforge/errors.hpp"

namespace occ::geo {

Mat4 identity4() {
  Mat4 m{};
  for (int i = 0; i < 4; ++i) m[i][i] = 1.0;
  return m;
}

Mat4 rigid_inverse(const Mat4& m) {
  Mat4 inv{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) inv[i][j] = m[j][i];
  for (int i = 0; i < 3; ++i) inv[i][3] = -(inv[i][0] * m[0][3] + inv[i][1] * m[1][3] + inv[i][2] * m[2][3]);
  inv[3][3] = 1.0;
  return inv;
}

Mat4 compose(const Mat4& a, const Mat4& b) {
  Mat4 out{};
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      for (int k = 0; k < 4; ++k) out[i][j] += a[i][k] * b[k][j];
  return out;
}

Vec3 transform_point(const Mat4& a, const Vec3& p) {
  Vec3 out;
  for (int i = 0; i < 3; ++i) out[i] = a[i][0] * p[0] + a[i][1] * p[1] + a[i][2] * p[2] + a[i][3];
  return out;
}

CameraModel::CameraModel(Intrinsics intrinsics, Mat4 world_to_camera, std::size_t height, std::size_t width)
    : k_(intrinsics), extrinsics_(world_to_camera), height_(height), width_(width) {
  if (!(k_.fx > 0.0 && k_.fy > 0.0)) throw ConfigError("camera focal lengths must be positive");
  if (height_ == 0 || width_ == 0) throw ConfigError("camera image size must be nonzero");
  const auto& r = extrinsics_;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double dot = 0.0;
      for (int k = 0; k < 3; ++k) dot += r[i][k] * r[j][k];
      if (std::abs(dot - (i == j ? 1.0 : 0.0)) > 1e-9) throw ConfigError("camera rotation is not orthonormal");
    }
  const double det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) -
                     r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0]) +
                     r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
  if (std::abs(det - 1.0) > 1e-9) throw ConfigError("camera rotation must have determinant +1");
  if (r[3][0] != 0.0 || r[3][1] != 0.0 || r[3][2] != 0.0 || r[3][3] != 1.0) {
    throw ConfigError("camera extrinsics must be a rigid transform");
  }
  inverse_ = rigid_inverse(extrinsics_);
}

Mat3 CameraModel::intrinsic_matrix() const {
  return Mat3{{{k_.fx, 0.0, k_.cx}, {0.0, k_.fy, k_.cy}, {0.0, 0.0, 1.0}}};
}

CameraModel CameraModel::rescaled(std::size_t height, std::size_t width) const {
  auto ratio = [](std::size_t to, std::size_t from) {
    return from > 1 ? static_cast<double>(to - 1) / static_cast<double>(from - 1) : 1.0;
  };
  const double sx = ratio(width, width_), sy = ratio(height, height_);
  Intrinsics k{k_.fx * sx, k_.fy * sy, k_.cx * sx, k_.cy * sy};
  return CameraModel(k, extrinsics_, height, width);
}

Mat4 forward_looking_extrinsics(const Vec3& position, double yaw) {
  const double c = std::cos(yaw), s = std::sin(yaw);
  const Vec3 right{s, -c, 0.0};
  const Vec3 down{0.0, 0.0, -1.0};
  const Vec3 forward{c, s, 0.0};
  Mat4 m = identity4();
  const Vec3* rows[3] = {&right, &down, &forward};
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) m[i][j] = (*rows[i])[j];
    m[i][3] = -((*rows[i])[0] * position[0] + (*rows[i])[1] * position[1] + (*rows[i])[2] * position[2]);
  }
  return m;
}

VoxelGridSpec::VoxelGridSpec(Vec3 origin_, double resolution_, std::array<std::size_t, 3> dims_)
    : origin(origin_), resolution(resolution_), dims(dims_) {
  if (!(resolution > 0.0)) throw ConfigError("voxel resolution must be positive");
  if (dims[0] == 0 || dims[1] == 0 || dims[2] == 0) throw ConfigError("voxel grid dims must be >= 1");
}

VoxelIndex VoxelGridSpec::unlinear(std::size_t l) const {
  VoxelIndex i;
  i.z = l % dims[2];
  l /= dims[2];
  i.y = l % dims[1];
  i.x = l / dims[1];
  return i;
}

Vec3 VoxelGridSpec::centroid(const VoxelIndex& i) const {
  return {origin[0] + (static_cast<double>(i.x) + 0.5) * resolution,
          origin[1] + (static_cast<double>(i.y) + 0.5) * resolution,
          origin[2] + (static_cast<double>(i.z) + 0.5) * resolution};
}

std::optional<VoxelIndex> VoxelGridSpec::locate(const Vec3& p) const {
  std::size_t idx[3];
  for (int a = 0; a < 3; ++a) {
    const double f = std::floor((p[a] - origin[a]) / resolution);
    if (!(f >= 0.0) || f >= static_cast<double>(dims[a])) return std::nullopt;
    idx[a] = static_cast<std::size_t>(f);
  }
  return VoxelIndex{idx[0], idx[1], idx[2]};
}

VoxelGridSpec VoxelGridSpec::coarsened(std::size_t factor) const {
  if (factor == 0 || dims[0] % factor || dims[1] % factor || dims[2] % factor) {
    throw ConfigError("grid dims not divisible by factor " + std::to_string(factor));
  }
  return VoxelGridSpec(origin, resolution * static_cast<double>(factor),
                       {dims[0] / factor, dims[1] / factor, dims[2] / factor});
}

VoxelGridSpec kitti_grid() { return VoxelGridSpec({0.0, -25.6, -2.0}, 0.2, {256, 256, 32}); }
VoxelGridSpec toy_grid() { return VoxelGridSpec({0.0, -6.4, -1.2}, 0.4, {32, 32, 8}); }
VoxelGridSpec micro_grid() { return VoxelGridSpec({0.0, -3.2, -1.2}, 0.8, {8, 8, 4}); }

LabelGrid::LabelGrid(VoxelGridSpec s, std::uint8_t fill) : spec(s), labels(s.voxel_count(), fill) {}

PointCloud unproject_depth(const Tensor& depth, const CameraModel& cam, std::size_t stride) {
  if (depth.rank() != 2) throw ShapeError("unproject_depth: depth must be [H,W], got " + shape_str(depth.shape()));
  if (stride == 0) throw ConfigError("unproject_depth: stride must be >= 1");
  const std::size_t h = depth.shape()[0], w = depth.shape()[1];
  const Intrinsics& k = cam.intrinsics();
  PointCloud cloud;
  for (std::size_t v = 0; v < h; v += stride)
    for (std::size_t u = 0; u < w; u += stride) {
      const double z = depth[v * w + u];
      if (z < 0.0) throw Error("unproject_depth: negative depth");
      if (z == 0.0) continue;
      const Vec3 pc{z * (static_cast<double>(u) - k.cx) / k.fx, z * (static_cast<double>(v) - k.cy) / k.fy, z};
      cloud.points.push_back(transform_point(cam.camera_to_world(), pc));
    }
  return cloud;
}

Projection project_point(const Vec3& p, const CameraModel& cam) {
  const Vec3 pc = transform_point(cam.world_to_camera(), p);
  Projection pr;
  pr.depth = pc[2];
  if (!(pc[2] > 0.0)) return pr;
  const Intrinsics& k = cam.intrinsics();
  // Homogeneous K * pc, then perspective divide.
  pr.u = (k.fx * pc[0] + k.cx * pc[2]) / pc[2];
  pr.v = (k.fy * pc[1] + k.cy * pc[2]) / pc[2];
  const double wm1 = static_cast<double>(cam.width() - 1), hm1 = static_cast<double>(cam.height() - 1);
  pr.un = wm1 > 0 ? pr.u / wm1 : 0.0;
  pr.vn = hm1 > 0 ? pr.v / hm1 : 0.0;
  pr.valid = pr.u >= 0.0 && pr.u <= wm1 && pr.v >= 0.0 && pr.v <= hm1;
  return pr;
}

std::vector<Projection> project_points(const PointCloud& cloud, const CameraModel& cam) {
  std::vector<Projection> out;
  out.reserve(cloud.points.size());
  for (const Vec3& p : cloud.points) out.push_back(project_point(p, cam));
  return out;
}

Voxelization voxelize(const PointCloud& cloud, const VoxelGridSpec& spec) {
  if (cloud.labeled() && cloud.labels.size() != cloud.points.size()) {
    throw ShapeError("voxelize: label count does not match point count");
  }
  Voxelization out;
  out.occupied.assign(spec.voxel_count(), 0);
  std::vector<std::pair<std::size_t, std::uint8_t>> votes;
  for (std::size_t i = 0; i < cloud.points.size(); ++i) {
    const auto idx = spec.locate(cloud.points[i]);
    if (!idx) continue;
    const std::size_t l = spec.linear(*idx);
    out.occupied[l] = 1;
    if (cloud.labeled()) votes.emplace_back(l, cloud.labels[i]);
  }
  if (cloud.labeled()) {
    LabelGrid grid(spec, 0);
    std::sort(votes.begin(), votes.end());
    for (std::size_t i = 0; i < votes.size();) {
      const std::size_t voxel = votes[i].first;
      std::uint8_t best = votes[i].second;
      std::size_t best_count = 0;
      while (i < votes.size() && votes[i].first == voxel) {
        const std::uint8_t label = votes[i].second;
        std::size_t count = 0;
        while (i < votes.size() && votes[i].first == voxel && votes[i].second == label) {
          ++count;
          ++i;
        }
        // Labels arrive in ascending order, so strict > keeps the lowest id on ties.
        if (count > best_count) {
          best = label;
          best_count = count;
        }
      }
      grid.labels[voxel] = best;
    }
    out.labels = std::move(grid);
  }
  return out;
}

RefPoints voxel_refpoints(const VoxelGridSpec& spec, std::span<const VoxelIndex> indices, const CameraModel& cam) {
  RefPoints rp;
  rp.coords.resize(indices.size() * 2);
  rp.valid.resize(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (!spec.contains(indices[i])) {
      throw ShapeError("voxel_refpoints: index (" + std::to_string(indices[i].x) + "," + std::to_string(indices[i].y) +
                       "," + std::to_string(indices[i].z) + ") outside grid");
    }
    const Projection p = project_point(spec.centroid(indices[i]), cam);
    rp.valid[i] = p.valid ? 1 : 0;
    rp.coords[2 * i] = p.valid ? p.un : 0.0;
    rp.coords[2 * i + 1] = p.valid ? p.vn : 0.0;
  }
  return rp;
}

}  // namespace occ::geo
