#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "occforge/tape.hpp"

// Differentiable operations on tape variables. Every op validates shapes
// (ShapeError) and rejects non-finite results (NumericError).
namespace occ::ad {

// Elementwise, identical shapes.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var silu(Var a);
Var sigmoid(Var a);
Var log(Var a);

Var sum(Var a);
Var mean(Var a);

/// Copy with new extents (same element count).
Var reshape(Var a, Shape shape);
/// [M,N] -> [N,M]
Var transpose(Var a);

/// [M,K] x [K,N] -> [M,N]
Var matmul(Var a, Var b);
/// x[M,K] * w[K,N] + bias[N]; pass a default-constructed Var for no bias.
Var linear(Var x, Var w, Var bias = {});

/// x[M,N] * v[N] broadcast over rows.
Var mul_cols(Var x, Var v);
/// [n] -> [n*times], each entry repeated `times` times consecutively.
Var repeat_each(Var v, std::size_t times);

/// Numerically stable softmax along `axis` (max subtracted).
Var softmax(Var a, std::size_t axis);
Var log_softmax(Var a, std::size_t axis);

/// [d] -> [n,d]
Var broadcast_rows(Var v, std::size_t n);
/// Rows `index` of x[N,d] -> [M,d].
Var gather_rows(Var x, std::span<const std::size_t> index);
/// Copy of base[N,d] with rows `index` replaced by rows[M,d]. Indices must be unique.
Var scatter_rows(Var base, std::span<const std::size_t> index, Var rows);
/// Copy of base[N,d] with rows[M,d] added at `index`; untouched rows are copied bit-exactly.
Var scatter_add_rows(Var base, std::span<const std::size_t> index, Var rows);
/// Zeroes rows i of x[N,d] where keep[i] == 0.
Var mask_rows(Var x, std::span<const std::uint8_t> keep);

/// x[C,H,W], w[O,C,k,k], bias[O] (optional) -> [O,Ho,Wo] with Ho = (H + 2*pad - k)/stride + 1.
Var conv2d(Var x, Var w, Var bias, std::size_t stride, std::size_t pad);

/// Bilinear interpolation of fmap[C,H,W] at points[P,2] given as normalized (u, v)
/// in [0,1]; pixel coordinates are (u*(W-1), v*(H-1)). Points outside [0,1]^2
/// sample the zero vector. Result [P,C].
Var bilinear_sample(Var fmap, Var points);

/// Multi-head deformable sampling over a single 2D level.
/// value[C,h,w] with C = heads*dh; locations[N, heads*points*2] normalized (u,v);
/// weights[N, heads*points]. out[n, h*dh + c] = sum_k w[n,h,k] * bilinear(value[h*dh + c], loc[n,h,k]).
Var deform_sample_2d(Var value, Var locations, Var weights, std::size_t heads, std::size_t points);

/// 3D analogue over value[X,Y,Z,C] (channels last) with trilinear interpolation;
/// locations[N, heads*points*3] normalized (x,y,z), coordinate = p*(dim-1).
Var deform_sample_3d(Var value, Var locations, Var weights, std::size_t heads, std::size_t points);

/// x[X,Y,Z,C] -> [fX,fY,fZ,C], nearest neighbour.
Var upsample_nearest3d(Var x, std::size_t factor);

/// Mean cross-entropy over entries whose label != ignore. Logits are viewed as
/// [outer, C, inner] around `class_axis`; labels are indexed outer-major. Returns 0
/// (zero gradient) when every label is ignored.
Var cross_entropy(Var logits, std::span<const std::uint8_t> labels, std::size_t class_axis,
                  std::uint8_t ignore = 255);

enum class ScalKind { Semantic, Geometric };

/// Scene-class affinity loss on probabilities[M,C] (rows summing to 1).
/// Semantic: classes with at least one labeled voxel each contribute
///   -log(precision) - log(recall) - log(specificity), averaged over those classes.
/// Geometric: the same three terms for the occupied side of the free(0)/occupied split.
Var scal_loss(Var probs, std::span<const std::uint8_t> labels, ScalKind kind, std::uint8_t ignore = 255);

/// Mean over rows of KL(softmax(teacher) || softmax(student)) along the last axis.
/// The teacher side is detached: no gradient flows into it.
Var kl_softmax(Var teacher_logits, Var student_logits);

/// Weighted sum  sum_i coeffs[i] * terms[i]  of scalars, accumulated left to right.
Var weighted_sum(std::span<const Var> terms, std::span<const double> coeffs);

}  // namespace occ::ad
