#pragma once

#include <span>
#include <string>
#include <vector>

#include "occforge/geometry.hpp"
#include "occforge/ops.hpp"
#include "occforge/params.hpp"

namespace occ::attn {

using ad::ParamBinder;
using ad::Var;

/// Single-level multi-head deformable attention block.
///
/// Parameters under `prefix`:
///   offset.w [d, heads*points*D], offset.b, offset_scale [heads] (init 0.01)
///   attn.w [d, heads*points], attn.b
///   value.w [d, d] (no bias)
///   out.w [d, d], out.b [d]  (zero-initialized when zero_output is set)
/// where D is 2 for image sampling and 3 for volume sampling. Offsets are in
/// normalized coordinates and multiplied by the per-head scale.
struct DeformAttnConfig {
  std::string prefix;
  std::size_t dim = 32;
  std::size_t heads = 2;
  std::size_t points = 4;
  double offset_scale_init = 0.01;
  bool zero_output = true;

  void validate() const;
};

/// Optional capture of the attention internals for inspection in tests.
struct AttentionTrace {
  Tensor weights;    // [N, heads*points], softmax-normalized per head
  Tensor locations;  // [N, heads*points*D]
};

/// O = DCA(Q, F): queries[N,d] sample feature_map[d,h,w] around their reference
/// points. Rows with an invalid reference point are exactly zero.
Var deformable_cross_attention(ParamBinder& params, Var queries, const geo::RefPoints& refs, Var feature_map,
                               const DeformAttnConfig& cfg, AttentionTrace* trace = nullptr);

/// Mean of per-frame DCA outputs (same queries, per-frame reference points),
/// accumulated as a running mean so identical frames reproduce one frame exactly.
Var temporal_aggregate(ParamBinder& params, Var queries, std::span<const geo::RefPoints> refs,
                       std::span<const Var> feature_maps, const DeformAttnConfig& cfg);

struct SelfAttnOptions {
  bool residual = true;
  /// Adds a fixed 3D sinusoidal encoding of the voxel position to the queries
  /// and the sampled values.
  bool positional = true;
};

/// Deformable self-attention over a volume[X,Y,Z,d]: every voxel is a query whose
/// reference point is its own normalized grid coordinate i/(dim-1); samples are
/// trilinear. Returns volume + attention (or the attention alone without residual).
Var deformable_self_attention(ParamBinder& params, Var volume, const DeformAttnConfig& cfg,
                              const SelfAttnOptions& options = {}, AttentionTrace* trace = nullptr);

/// Re-attends a volume[X,Y,Z,d] to feature_map[d,h,w]. Voxels whose centroid
/// (under `grid`) projects inside the image receive a DCA residual; the rest are
/// copied through unchanged.
Var image_conditioned_cross_attention(ParamBinder& params, Var volume, Var feature_map, const geo::VoxelGridSpec& grid,
                                      const geo::CameraModel& cam, const DeformAttnConfig& cfg);

/// Fixed sinusoidal positional encoding.
struct SinusoidalPE {
  std::size_t dim = 32;
  double base = 10000.0;

  /// [dim, h, w]; channels 4f..4f+3 hold sin/cos of row then column at frequency f.
  Tensor encode_2d(std::size_t h, std::size_t w) const;
  /// [X*Y*Z, dim] in volume order; channels 6f..6f+5 hold sin/cos of x, y, z.
  Tensor encode_3d(std::size_t x, std::size_t y, std::size_t z) const;
};

/// Parameters under `prefix`: q.w, k.w, v.w [d,d]; out.w [d,d], out.b [d].
struct CrossViewConfig {
  std::string prefix;
  std::size_t dim = 32;
  bool zero_output = true;
};

/// For every chronologically adjacent pair (i-1, i), single-head cross-attention
/// in both directions over flattened spatial positions, with residual
/// connections. Queries, keys and values see the maps plus the positional
/// encoding; the residual adds to the maps themselves, so a single frame passes
/// through unchanged. Maps are [d,h,w], oldest first.
std::vector<Var> cross_view_transform(ParamBinder& params, std::span<const Var> features, const SinusoidalPE& pe,
                                      const CrossViewConfig& cfg);

}  // namespace occ::attn
