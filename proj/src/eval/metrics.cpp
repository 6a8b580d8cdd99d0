#include "occforge/metrics.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

#include "occforge/errors.hpp"
#include "occforge/scenes.hpp"

namespace occ::eval {

void ConfusionMatrix::add(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, std::uint8_t ignore) {
  if (pred.size() != gt.size()) {
    throw ShapeError("confusion: " + std::to_string(pred.size()) + " predictions for " + std::to_string(gt.size()) +
                     " labels");
  }
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] == ignore) {
      ++ignored;
      continue;
    }
    if (gt[i] >= classes || pred[i] >= classes) throw Error("confusion: class id out of range");
    ++counts[gt[i] * classes + pred[i]];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.classes != classes) throw ShapeError("confusion: class count mismatch");
  for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
  ignored += other.ignored;
}

std::uint64_t ConfusionMatrix::total() const { return std::accumulate(counts.begin(), counts.end(), std::uint64_t{0}); }

MiouResult compute_miou(const ConfusionMatrix& cm) {
  const std::size_t c = cm.classes;
  MiouResult r;
  r.iou.resize(c);
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t k = 0; k < c; ++k) {
    std::uint64_t tp = cm.at(k, k), fp = 0, fn = 0;
    for (std::size_t j = 0; j < c; ++j) {
      if (j == k) continue;
      fp += cm.at(j, k);
      fn += cm.at(k, j);
    }
    if (tp + fp + fn == 0) continue;
    r.iou[k] = static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
    if (k != 0) {
      sum += *r.iou[k];
      ++present;
    }
  }
  r.miou = present ? sum / static_cast<double>(present) : 0.0;
  std::uint64_t tp = 0, fp = 0, fn = 0;
  for (std::size_t g = 0; g < c; ++g)
    for (std::size_t p = 0; p < c; ++p) {
      const std::uint64_t n = cm.at(g, p);
      if (g != 0 && p != 0) tp += n;
      if (g == 0 && p != 0) fp += n;
      if (g != 0 && p == 0) fn += n;
    }
  r.occupancy_iou = tp + fp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fp + fn) : 0.0;
  return r;
}

MiouResult compute_miou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, std::size_t classes) {
  ConfusionMatrix cm(classes);
  cm.add(pred, gt);
  return compute_miou(cm);
}

void export_ply(const geo::LabelGrid& grid, const std::filesystem::path& path) {
  std::vector<std::size_t> voxels;
  for (std::size_t l = 0; l < grid.labels.size(); ++l)
    if (grid.occupied(grid.spec.unlinear(l))) voxels.push_back(l);
  std::ofstream out(path);
  if (!out) throw FormatError(FormatErrorKind::Io, "cannot open " + path.string() + " for writing");
  out << "ply\nformat ascii 1.0\ncomment occforge voxel export\n"
      << "element vertex " << 8 * voxels.size() << "\n"
      << "property float x\nproperty float y\nproperty float z\n"
      << "property uchar red\nproperty uchar green\nproperty uchar blue\n"
      << "element face " << 12 * voxels.size() << "\n"
      << "property list uchar int vertex_indices\nend_header\n";
  const auto& s = grid.spec;
  for (std::size_t l : voxels) {
    const geo::VoxelIndex i = s.unlinear(l);
    const auto rgb = scene::class_color(grid.labels[l]);
    const double x0 = s.origin[0] + static_cast<double>(i.x) * s.resolution;
    const double y0 = s.origin[1] + static_cast<double>(i.y) * s.resolution;
    const double z0 = s.origin[2] + static_cast<double>(i.z) * s.resolution;
    for (int corner = 0; corner < 8; ++corner) {
      out << x0 + (corner & 1) * s.resolution << ' ' << y0 + ((corner >> 1) & 1) * s.resolution << ' '
          << z0 + ((corner >> 2) & 1) * s.resolution;
      for (double ch : rgb) out << ' ' << static_cast<int>(std::lround(ch * 255.0));
      out << '\n';
    }
  }
  // Two triangles per cube face, corners indexed by bits (x, y, z).
  static constexpr int faces[12][3] = {{0, 2, 3}, {0, 3, 1}, {4, 5, 7}, {4, 7, 6}, {0, 1, 5}, {0, 5, 4},
                                       {2, 6, 7}, {2, 7, 3}, {0, 4, 6}, {0, 6, 2}, {1, 3, 7}, {1, 7, 5}};
  for (std::size_t v = 0; v < voxels.size(); ++v)
    for (const auto& f : faces) out << "3 " << 8 * v + f[0] << ' ' << 8 * v + f[1] << ' ' << 8 * v + f[2] << '\n';
  if (!out) throw FormatError(FormatErrorKind::Io, "write failed: " + path.string());
}

}  // namespace occ::eval
