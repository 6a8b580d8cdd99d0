#pragma once

// Independent reference implementations used by the unit and acceptance tests.
// Everything here is written as plain loops over raw tensors; none of it goes
// through the tape.

#include <cstdint>
#include <vector>

#include "occforge/attention.hpp"
#include "occforge/geometry.hpp"
#include "occforge/params.hpp"
#include "occforge/rng.hpp"
#include "occforge/tensor.hpp"

namespace occ::oracle {

Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0);
/// Overwrites every parameter with U(-bound, bound), keeping offset scales positive.
void randomize(ad::ParameterStore& store, Rng& rng, double bound = 0.5);

// ---- geometry ----------------------------------------------------------------

/// Occupancy by testing every point against every voxel's box.
std::vector<std::uint8_t> voxelize_occupancy(const geo::PointCloud& cloud, const geo::VoxelGridSpec& spec);
/// Majority label per voxel by explicit per-voxel histograms.
std::vector<std::uint8_t> voxelize_labels(const geo::PointCloud& cloud, const geo::VoxelGridSpec& spec);

struct Pixel {
  double u, v, depth;
  bool valid;
};
/// K * (E * [p;1]) with matrix loops, then perspective divide.
Pixel project(const geo::Vec3& p, const geo::CameraModel& cam);

// ---- attention ---------------------------------------------------------------

double bilinear(const Tensor& fmap, std::size_t channel, double u, double v);
/// volume[X,Y,Z,C]; coordinates normalized to [0,1] per axis.
double trilinear(const Tensor& volume, std::size_t channel, double x, double y, double z);

/// Row-by-row: offsets, softmax, sample raw features, value-project, weight, output-project.
Tensor dca(const ad::ParameterStore& store, const attn::DeformAttnConfig& cfg, const Tensor& queries,
           const geo::RefPoints& refs, const Tensor& fmap);
Tensor dsa(const ad::ParameterStore& store, const attn::DeformAttnConfig& cfg, const Tensor& volume, bool residual,
           bool positional);
Tensor icca(const ad::ParameterStore& store, const attn::DeformAttnConfig& cfg, const Tensor& volume,
            const Tensor& fmap, const geo::VoxelGridSpec& grid, const geo::CameraModel& cam);
std::vector<Tensor> cvt(const ad::ParameterStore& store, const attn::CrossViewConfig& cfg,
                        const std::vector<Tensor>& features, double pe_base = 10000.0);

/// Closed-form sinusoid tables (recomputed here rather than shared with the library).
double pe2d(std::size_t channel, std::size_t dim, std::size_t y, std::size_t x, double base);
double pe3d(std::size_t channel, std::size_t dim, std::size_t x, std::size_t y, std::size_t z, double base);

}  // namespace occ::oracle
