#include "occforge/scenes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "occforge/binary_io.hpp"
#include "occforge/errors.hpp"
#include "occforge/grid_io.hpp"

namespace occ::scene {

namespace {

using geo::LabelGrid;
using geo::VoxelIndex;

constexpr double kNudge = 1e-6;

struct Box {
  long x0, x1, y0, y1, z0, z1;  // half-open voxel ranges
};

void fill(LabelGrid& g, Box b, std::uint8_t label, bool only_free) {
  const auto& d = g.spec.dims;
  auto clip = [](long v, std::size_t hi) { return static_cast<std::size_t>(std::clamp<long>(v, 0, static_cast<long>(hi))); };
  for (std::size_t x = clip(b.x0, d[0]); x < clip(b.x1, d[0]); ++x)
    for (std::size_t y = clip(b.y0, d[1]); y < clip(b.y1, d[1]); ++y)
      for (std::size_t z = clip(b.z0, d[2]); z < clip(b.z1, d[2]); ++z) {
        std::uint8_t& v = g.at({x, y, z});
        if (!only_free || v == kFree) v = label;
      }
}

long voxels(double meters, double res) { return std::max(1L, std::lround(meters / res)); }

struct Ray {
  geo::Vec3 origin, dir;  // dir has camera-frame z component 1, so t is depth
};

Ray pixel_ray(const geo::CameraModel& cam, double u, double v) {
  const geo::Intrinsics& k = cam.intrinsics();
  const geo::Vec3 dc{(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0};
  const geo::Mat4& inv = cam.camera_to_world();
  Ray r{cam.center(), {}};
  for (int a = 0; a < 3; ++a) r.dir[a] = inv[a][0] * dc[0] + inv[a][1] * dc[1] + inv[a][2] * dc[2];
  return r;
}

struct Raster {
  Tensor depth;
  std::vector<std::uint8_t> labels;
};

Raster render(const LabelGrid& grid, const geo::CameraModel& cam) {
  const std::size_t h = cam.height(), w = cam.width();
  Raster r{Tensor({h, w}), std::vector<std::uint8_t>(h * w, kFree)};
  for (std::size_t v = 0; v < h; ++v)
    for (std::size_t u = 0; u < w; ++u) {
      const RayHit hit = cast_ray(grid, cam, static_cast<double>(u), static_cast<double>(v));
      r.depth[v * w + u] = hit.depth;
      r.labels[v * w + u] = hit.label;
    }
  return r;
}

Tensor shade(const std::vector<std::uint8_t>& labels, std::size_t h, std::size_t w, double noise, Rng& rng) {
  Tensor img({3, h, w});
  for (std::size_t p = 0; p < h * w; ++p) {
    const auto c = class_color(labels[p]);
    for (std::size_t ch = 0; ch < 3; ++ch) {
      const double jitter = noise > 0.0 ? noise * rng.normal() : 0.0;
      img[ch * h * w + p] = std::clamp(c[ch] + jitter, 0.0, 1.0);
    }
  }
  return img;
}

void populate(LabelGrid& g, Rng& rng, const SceneOptions& opt) {
  const auto& d = g.spec.dims;
  const double res = g.spec.resolution;
  const long X = static_cast<long>(d[0]), Y = static_cast<long>(d[1]), Z = static_cast<long>(d[2]);
  // Ground layer: road with vegetated verges.
  fill(g, {0, X, 0, Y, 0, 1}, kRoad, false);
  if (opt.plane_only) return;
  const long verge = std::max(1L, Y / 8);
  fill(g, {0, X, 0, verge, 0, 1}, kVegetation, false);
  fill(g, {0, X, Y - verge, Y, 0, 1}, kVegetation, false);

  const int buildings = static_cast<int>(rng.integer(1, 3));
  for (int i = 0; i < buildings; ++i) {
    const long len = std::max(1L, std::lround(rng.uniform(0.2, 0.45) * X));
    const long depth = std::max(1L, std::lround(rng.uniform(0.08, 0.16) * Y));
    const long height = std::max(2L, std::lround(rng.uniform(0.5, 1.0) * Z));
    const int side = static_cast<int>(rng.integer(0, 2));
    if (side == 2) {
      const long y0 = rng.integer(0, std::max(0L, Y - 2 * len));
      fill(g, {X - depth, X, y0, y0 + std::min(Y, 2 * len), 1, height}, kBuilding, false);
    } else {
      const long x0 = rng.integer(X / 10, std::max(X / 10, X - len));
      const long y0 = side == 0 ? 0 : Y - depth;
      fill(g, {x0, x0 + len, y0, y0 + depth, 1, height}, kBuilding, false);
    }
  }

  struct Kind {
    std::uint8_t label;
    double lx, ly, lz;
  };
  static constexpr Kind kinds[] = {{kCar, 4.0, 1.8, 1.6}, {kPerson, 0.6, 0.6, 1.8}, {kPole, 0.4, 0.4, 3.2},
                                   {kVegetation, 1.2, 1.2, 2.4}};
  static constexpr double kind_cdf[] = {0.45, 0.7, 0.9, 1.0};
  auto place = [&](const Kind& k) {
    const long sx = voxels(k.lx, res), sy = voxels(k.ly, res), sz = voxels(k.lz, res);
    const long cx = std::lround(rng.uniform(0.15, 0.85) * X), cy = std::lround(rng.uniform(0.25, 0.75) * Y);
    fill(g, {cx - sx / 2, cx - sx / 2 + sx, cy - sy / 2, cy - sy / 2 + sy, 1, 1 + sz}, k.label, true);
  };
  const int objects = static_cast<int>(rng.integer(0, 4));
  for (int i = 0; i < objects; ++i) {
    const double r = rng.uniform();
    std::size_t k = 0;
    while (r >= kind_cdf[k]) ++k;
    place(kinds[k]);
  }
  // Long-tail class: small and infrequent.
  if (rng.bernoulli(0.2)) place({kRareVehicle, 1.6, 0.8, 1.2});
}

}  // namespace

std::array<double, 3> class_color(std::size_t c) {
  static constexpr std::array<double, 3> palette[] = {
      {0.55, 0.70, 0.90}, {0.30, 0.30, 0.32}, {0.70, 0.40, 0.30}, {0.10, 0.20, 0.80},
      {0.90, 0.20, 0.20}, {0.90, 0.90, 0.20}, {0.20, 0.65, 0.20}, {0.60, 0.20, 0.70},
  };
  return c < std::size(palette) ? palette[c] : std::array<double, 3>{1.0, 1.0, 1.0};
}

RayHit cast_ray(const LabelGrid& grid, const geo::CameraModel& cam, double u, double v) {
  const Ray ray = pixel_ray(cam, u, v);
  const auto& s = grid.spec;
  geo::Vec3 lo = s.origin, hi;
  for (int a = 0; a < 3; ++a) hi[a] = lo[a] + static_cast<double>(s.dims[a]) * s.resolution;
  double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (ray.dir[a] == 0.0) {
      if (ray.origin[a] < lo[a] || ray.origin[a] >= hi[a]) return {};
      continue;
    }
    double ta = (lo[a] - ray.origin[a]) / ray.dir[a], tb = (hi[a] - ray.origin[a]) / ray.dir[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  if (t0 > t1) return {};
  std::array<long, 3> idx;
  for (int a = 0; a < 3; ++a) {
    const double p = ray.origin[a] + t0 * ray.dir[a];
    idx[a] = std::clamp(static_cast<long>(std::floor((p - lo[a]) / s.resolution)), 0L,
                        static_cast<long>(s.dims[a]) - 1);
  }
  double t = t0;
  while (true) {
    const VoxelIndex vi{static_cast<std::size_t>(idx[0]), static_cast<std::size_t>(idx[1]),
                        static_cast<std::size_t>(idx[2])};
    if (grid.occupied(vi)) return {t + kNudge, grid.at(vi), vi};
    int axis = -1;
    double next = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
      if (ray.dir[a] == 0.0) continue;
      const long face = idx[a] + (ray.dir[a] > 0.0 ? 1 : 0);
      const double ta = (lo[a] + static_cast<double>(face) * s.resolution - ray.origin[a]) / ray.dir[a];
      if (ta < next) {
        next = ta;
        axis = a;
      }
    }
    if (axis < 0) return {};
    idx[axis] += ray.dir[axis] > 0.0 ? 1 : -1;
    if (idx[axis] < 0 || idx[axis] >= static_cast<long>(s.dims[axis])) return {};
    t = next;
  }
}

Tensor render_depth(const LabelGrid& grid, const geo::CameraModel& cam) { return render(grid, cam).depth; }

std::vector<std::uint8_t> project_labels_to_image(const geo::PointCloud& cloud, const geo::CameraModel& cam) {
  if (!cloud.labeled()) throw ConfigError("project_labels_to_image: point cloud has no labels");
  const std::size_t h = cam.height(), w = cam.width();
  std::vector<std::uint8_t> out(h * w, geo::kIgnoreLabel);
  std::vector<double> zbuf(h * w, std::numeric_limits<double>::infinity());
  const auto proj = geo::project_points(cloud, cam);
  for (std::size_t i = 0; i < proj.size(); ++i) {
    if (!proj[i].valid) continue;
    const std::size_t px = static_cast<std::size_t>(std::floor(proj[i].u + 0.5));
    const std::size_t py = static_cast<std::size_t>(std::floor(proj[i].v + 0.5));
    const std::size_t p = py * w + px;
    if (proj[i].depth < zbuf[p]) {
      zbuf[p] = proj[i].depth;
      out[p] = cloud.labels[i];
    }
  }
  return out;
}

std::vector<std::uint8_t> sparse_labels_2d(const SyntheticScene& scene, std::size_t h, std::size_t w) {
  return project_labels_to_image(scene.cloud, scene.cameras.back().rescaled(h, w));
}

Tensor noisy_depth(const Tensor& depth, double sigma, Rng& rng) {
  if (sigma < 0.0) throw ConfigError("depth noise sigma must be >= 0");
  Tensor out = depth;
  if (sigma == 0.0) return out;
  for (std::size_t i = 0; i < out.numel(); ++i)
    if (out[i] > 0.0) out[i] = std::max(0.0, out[i] + sigma * rng.normal());
  return out;
}

pipe::FrameInput frame_input(const SyntheticScene& scene, std::size_t i, double sigma, Rng* rng) {
  if (i >= scene.frames()) throw ConfigError("frame index out of range");
  pipe::FrameInput f{scene.images[i], scene.depths[i], scene.cameras[i]};
  if (sigma > 0.0) {
    if (rng == nullptr) throw ConfigError("depth noise requires a generator");
    f.depth = noisy_depth(f.depth, sigma, *rng);
  }
  return f;
}

SyntheticScene generate_scene(std::uint64_t seed, Preset preset, const SceneOptions& options) {
  const PresetSpec spec = preset_spec(preset);
  Rng rng(seed ^ 0x5ce9e5ce9e5ce9e5ULL);
  SyntheticScene s;
  s.labels = LabelGrid(spec.grid, kFree);
  populate(s.labels, rng, options);

  const double step = 2.5 * spec.grid.resolution;
  const std::size_t n = spec.teacher_frames;
  for (std::size_t k = 0; k < n; ++k) {
    const double back = static_cast<double>(n - 1 - k);
    const bool jitter = k + 1 < n;
    const double dy = jitter ? rng.uniform(-0.1, 0.1) * step : 0.0;
    const double yaw = jitter ? rng.uniform(-0.05, 0.05) : 0.0;
    s.cameras.emplace_back(spec.intrinsics,
                           geo::forward_looking_extrinsics({-back * step, dy, spec.camera_height}, yaw),
                           spec.image_h, spec.image_w);
  }
  for (const geo::CameraModel& cam : s.cameras) {
    const Raster r = render(s.labels, cam);
    s.depths.push_back(r.depth);
    s.images.push_back(shade(r.labels, cam.height(), cam.width(), options.image_noise, rng));
  }
  // Lidar-like labeled samples on every second pixel of frame t.
  const geo::CameraModel& cam = s.cameras.back();
  for (std::size_t v = 0; v < cam.height(); v += 2)
    for (std::size_t u = 0; u < cam.width(); u += 2) {
      const RayHit hit = cast_ray(s.labels, cam, static_cast<double>(u), static_cast<double>(v));
      if (hit.depth == 0.0) continue;
      const Ray ray = pixel_ray(cam, static_cast<double>(u), static_cast<double>(v));
      geo::Vec3 p;
      for (int a = 0; a < 3; ++a) p[a] = ray.origin[a] + hit.depth * ray.dir[a];
      s.cloud.points.push_back(p);
      s.cloud.labels.push_back(hit.label);
    }
  return s;
}

void write_scene(std::ostream& out, const SyntheticScene& scene) {
  io::BinaryWriter w(out);
  w.magic(kSceneMagic);
  w.u32(kSceneVersion);
  geo::write_grid(out, scene.labels);
  w.u32(static_cast<std::uint32_t>(scene.frames()));
  for (std::size_t f = 0; f < scene.frames(); ++f) {
    const geo::CameraModel& cam = scene.cameras[f];
    for (const auto& row : cam.intrinsic_matrix())
      for (double v : row) w.f64(v);
    for (const auto& row : cam.world_to_camera())
      for (double v : row) w.f64(v);
    w.u32(static_cast<std::uint32_t>(cam.height()));
    w.u32(static_cast<std::uint32_t>(cam.width()));
    for (std::size_t i = 0; i < scene.images[f].numel(); ++i) w.f64(scene.images[f][i]);
    for (std::size_t i = 0; i < scene.depths[f].numel(); ++i) w.f64(scene.depths[f][i]);
  }
  w.u64(scene.cloud.points.size());
  for (const auto& p : scene.cloud.points)
    for (double v : p) w.f64(v);
  w.u8(scene.cloud.labeled() ? 1 : 0);
  if (scene.cloud.labeled()) w.bytes(scene.cloud.labels.data(), scene.cloud.labels.size());
}

SyntheticScene read_scene(std::istream& in) {
  io::BinaryReader r(in);
  r.expect_magic(kSceneMagic);
  const std::uint32_t version = r.u32();
  if (version != kSceneVersion) throw FormatError(FormatErrorKind::BadVersion, "scene version " + std::to_string(version));
  SyntheticScene s;
  s.labels = geo::read_grid(in);
  const std::uint32_t frames = r.u32();
  if (frames == 0 || frames > 1024) throw FormatError(FormatErrorKind::Corrupt, "implausible frame count");
  for (std::uint32_t f = 0; f < frames; ++f) {
    geo::Mat3 k;
    geo::Mat4 e;
    for (auto& row : k)
      for (double& v : row) v = r.f64();
    for (auto& row : e)
      for (double& v : row) v = r.f64();
    const std::size_t h = r.u32(), w = r.u32();
    if (h == 0 || w == 0 || h * w > (std::size_t{1} << 26)) throw FormatError(FormatErrorKind::Corrupt, "bad image size");
    try {
      s.cameras.emplace_back(geo::Intrinsics{k[0][0], k[1][1], k[0][2], k[1][2]}, e, h, w);
    } catch (const ConfigError& err) {
      throw FormatError(FormatErrorKind::Corrupt, std::string("camera: ") + err.what());
    }
    Tensor img({3, h, w}), depth({h, w});
    for (std::size_t i = 0; i < img.numel(); ++i) img[i] = r.f64();
    for (std::size_t i = 0; i < depth.numel(); ++i) depth[i] = r.f64();
    s.images.push_back(std::move(img));
    s.depths.push_back(std::move(depth));
  }
  const std::uint64_t n = r.u64();
  if (n > (std::uint64_t{1} << 28)) throw FormatError(FormatErrorKind::Corrupt, "implausible point count");
  s.cloud.points.resize(n);
  for (auto& p : s.cloud.points)
    for (double& v : p) v = r.f64();
  const std::uint8_t labeled = r.u8();
  if (labeled > 1) throw FormatError(FormatErrorKind::Corrupt, "bad label flag");
  if (labeled) {
    s.cloud.labels.resize(n);
    r.bytes(s.cloud.labels.data(), n);
  }
  return s;
}

void save_scene(const std::filesystem::path& path, const SyntheticScene& scene) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(FormatErrorKind::Io, "cannot open " + path.string() + " for writing");
  write_scene(out, scene);
  if (!out) throw FormatError(FormatErrorKind::Io, "write failed: " + path.string());
}

SyntheticScene load_scene(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrorKind::Io, "cannot open " + path.string());
  return read_scene(in);
}

}  // namespace occ::scene
