#include "occforge/attention.hpp"

#include <cmath>

#include "occforge/errors.hpp"

namespace occ::attn {
namespace {

using ad::Init;

struct Projections {
  Var locations;
  Var weights;
};

// Offsets and attention weights shared by the 2D and 3D variants. `base` holds
// the reference point of each query repeated over heads*points.
Projections project_queries(ParamBinder& p, Var queries, Tensor base, std::size_t coord_dims,
                            const DeformAttnConfig& cfg) {
  const std::size_t d = cfg.dim, hk = cfg.heads * cfg.points;
  const std::string& pre = cfg.prefix;
  Var off_w = p(pre + "offset.w", {d, hk * coord_dims}, Init::kaiming(d));
  Var off_b = p(pre + "offset.b", {hk * coord_dims}, Init::zeros());
  Var off_s = p(pre + "offset_scale", {cfg.heads}, Init::constant(cfg.offset_scale_init));
  Var att_w = p(pre + "attn.w", {d, hk}, Init::kaiming(d));
  Var att_b = p(pre + "attn.b", {hk}, Init::zeros());

  Var offsets = ad::mul_cols(ad::linear(queries, off_w, off_b), ad::repeat_each(off_s, cfg.points * coord_dims));
  Var loc = ad::add(p.tape().constant(std::move(base)), offsets);
  const std::size_t n = queries.shape()[0];
  Var logits = ad::reshape(ad::linear(queries, att_w, att_b), {n * cfg.heads, cfg.points});
  Var w = ad::reshape(ad::softmax(logits, 1), {n, hk});
  return {loc, w};
}

Var value_projection(ParamBinder& p, Var tokens, const DeformAttnConfig& cfg) {
  return ad::linear(tokens, p(cfg.prefix + "value.w", {cfg.dim, cfg.dim}, Init::kaiming(cfg.dim)));
}

Var output_projection(ParamBinder& p, Var x, std::size_t d, const std::string& prefix, bool zero) {
  Var w = p(prefix + "out.w", {d, d}, zero ? Init::zeros() : Init::kaiming(d));
  Var b = p(prefix + "out.b", {d}, Init::zeros());
  return ad::linear(x, w, b);
}

// [d,h,w] <-> [h*w,d]
Var to_tokens(Var map) {
  const Shape& s = map.shape();
  return ad::transpose(ad::reshape(map, {s[0], s[1] * s[2]}));
}

Var from_tokens(Var tokens, std::size_t h, std::size_t w) {
  return ad::reshape(ad::transpose(tokens), {tokens.shape()[1], h, w});
}

void check_queries(const char* op, Var q, std::size_t d) {
  if (q.shape().size() != 2 || q.shape()[1] != d) {
    throw ShapeError(std::string(op) + ": queries must be [N," + std::to_string(d) + "], got " + shape_str(q.shape()));
  }
}

void check_map(const char* op, Var f, std::size_t d) {
  if (f.shape().size() != 3 || f.shape()[0] != d) {
    throw ShapeError(std::string(op) + ": feature map must be [" + std::to_string(d) + ",h,w], got " +
                     shape_str(f.shape()));
  }
}

}  // namespace

void DeformAttnConfig::validate() const {
  if (dim == 0 || heads == 0 || points == 0) throw ConfigError("attention dims, heads and points must be >= 1");
  if (dim % heads != 0) throw ConfigError("attention dim " + std::to_string(dim) + " not divisible by heads");
}

Var deformable_cross_attention(ParamBinder& params, Var queries, const geo::RefPoints& refs, Var feature_map,
                               const DeformAttnConfig& cfg, AttentionTrace* trace) {
  cfg.validate();
  check_queries("deformable_cross_attention", queries, cfg.dim);
  check_map("deformable_cross_attention", feature_map, cfg.dim);
  const std::size_t n = queries.shape()[0], hk = cfg.heads * cfg.points;
  if (refs.size() != n || refs.coords.size() != 2 * n) {
    throw ShapeError("deformable_cross_attention: " + std::to_string(refs.size()) + " reference points for " +
                     std::to_string(n) + " queries");
  }
  Tensor base({n, hk * 2});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < hk; ++j) {
      base[(i * hk + j) * 2] = refs.coords[2 * i];
      base[(i * hk + j) * 2 + 1] = refs.coords[2 * i + 1];
    }
  auto [loc, w] = project_queries(params, queries, std::move(base), 2, cfg);
  const std::size_t h = feature_map.shape()[1], wd = feature_map.shape()[2];
  Var value = from_tokens(value_projection(params, to_tokens(feature_map), cfg), h, wd);
  Var sampled = ad::deform_sample_2d(value, loc, w, cfg.heads, cfg.points);
  Var out = output_projection(params, sampled, cfg.dim, cfg.prefix, cfg.zero_output);
  if (trace) {
    trace->weights = w.value();
    trace->locations = loc.value();
  }
  return ad::mask_rows(out, refs.valid);
}

Var temporal_aggregate(ParamBinder& params, Var queries, std::span<const geo::RefPoints> refs,
                       std::span<const Var> feature_maps, const DeformAttnConfig& cfg) {
  if (feature_maps.empty()) throw ConfigError("temporal_aggregate: at least one frame is required");
  if (refs.size() != feature_maps.size()) throw ShapeError("temporal_aggregate: one set of reference points per frame");
  Var mean = deformable_cross_attention(params, queries, refs[0], feature_maps[0], cfg);
  for (std::size_t k = 1; k < feature_maps.size(); ++k) {
    Var x = deformable_cross_attention(params, queries, refs[k], feature_maps[k], cfg);
    mean = ad::add(mean, ad::scale(ad::sub(x, mean), 1.0 / static_cast<double>(k + 1)));
  }
  return mean;
}

Var deformable_self_attention(ParamBinder& params, Var volume, const DeformAttnConfig& cfg,
                              const SelfAttnOptions& options, AttentionTrace* trace) {
  cfg.validate();
  const Shape& s = volume.shape();
  if (s.size() != 4 || s[3] != cfg.dim) {
    throw ShapeError("deformable_self_attention: volume must be [X,Y,Z," + std::to_string(cfg.dim) + "], got " +
                     shape_str(s));
  }
  const std::size_t n = s[0] * s[1] * s[2], hk = cfg.heads * cfg.points;
  auto norm = [](std::size_t i, std::size_t dim) {
    return dim > 1 ? static_cast<double>(i) / static_cast<double>(dim - 1) : 0.0;
  };
  Tensor base({n, hk * 3});
  for (std::size_t x = 0, i = 0; x < s[0]; ++x)
    for (std::size_t y = 0; y < s[1]; ++y)
      for (std::size_t z = 0; z < s[2]; ++z, ++i)
        for (std::size_t j = 0; j < hk; ++j) {
          base[(i * hk + j) * 3] = norm(x, s[0]);
          base[(i * hk + j) * 3 + 1] = norm(y, s[1]);
          base[(i * hk + j) * 3 + 2] = norm(z, s[2]);
        }
  Var rows = ad::reshape(volume, {n, cfg.dim});
  Var q = rows;
  if (options.positional) {
    q = ad::add(rows, params.tape().constant(SinusoidalPE{cfg.dim}.encode_3d(s[0], s[1], s[2])));
  }
  auto [loc, w] = project_queries(params, q, std::move(base), 3, cfg);
  Var value = ad::reshape(value_projection(params, q, cfg), s);
  Var sampled = ad::deform_sample_3d(value, loc, w, cfg.heads, cfg.points);
  Var out = ad::reshape(output_projection(params, sampled, cfg.dim, cfg.prefix, cfg.zero_output), s);
  if (trace) {
    trace->weights = w.value();
    trace->locations = loc.value();
  }
  return options.residual ? ad::add(volume, out) : out;
}

Var image_conditioned_cross_attention(ParamBinder& params, Var volume, Var feature_map, const geo::VoxelGridSpec& grid,
                                      const geo::CameraModel& cam, const DeformAttnConfig& cfg) {
  const Shape& s = volume.shape();
  if (s.size() != 4 || s[0] != grid.dims[0] || s[1] != grid.dims[1] || s[2] != grid.dims[2] || s[3] != cfg.dim) {
    throw ShapeError("image_conditioned_cross_attention: volume " + shape_str(s) + " does not match grid");
  }
  const std::size_t n = grid.voxel_count();
  std::vector<geo::VoxelIndex> all(n);
  for (std::size_t l = 0; l < n; ++l) all[l] = grid.unlinear(l);
  const geo::RefPoints refs = geo::voxel_refpoints(grid, all, cam);

  std::vector<std::size_t> visible;
  geo::RefPoints vis_refs;
  for (std::size_t l = 0; l < n; ++l) {
    if (!refs.valid[l]) continue;
    visible.push_back(l);
    vis_refs.coords.push_back(refs.coords[2 * l]);
    vis_refs.coords.push_back(refs.coords[2 * l + 1]);
    vis_refs.valid.push_back(1);
  }
  if (visible.empty()) return volume;
  Var rows = ad::reshape(volume, {n, cfg.dim});
  Var attended = deformable_cross_attention(params, ad::gather_rows(rows, visible), vis_refs, feature_map, cfg);
  return ad::reshape(ad::scatter_add_rows(rows, visible, attended), s);
}

Tensor SinusoidalPE::encode_2d(std::size_t h, std::size_t w) const {
  Tensor pe({dim, h, w});
  const std::size_t freqs = dim / 4;
  for (std::size_t f = 0; f < freqs; ++f) {
    const double omega = std::pow(base, -static_cast<double>(f) / static_cast<double>(freqs));
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double ay = static_cast<double>(y) * omega, ax = static_cast<double>(x) * omega;
        pe[((4 * f) * h + y) * w + x] = std::sin(ay);
        pe[((4 * f + 1) * h + y) * w + x] = std::cos(ay);
        pe[((4 * f + 2) * h + y) * w + x] = std::sin(ax);
        pe[((4 * f + 3) * h + y) * w + x] = std::cos(ax);
      }
  }
  return pe;
}

Tensor SinusoidalPE::encode_3d(std::size_t nx, std::size_t ny, std::size_t nz) const {
  Tensor pe({nx * ny * nz, dim});
  const std::size_t freqs = dim / 6;
  for (std::size_t x = 0, i = 0; x < nx; ++x)
    for (std::size_t y = 0; y < ny; ++y)
      for (std::size_t z = 0; z < nz; ++z, ++i) {
        const double pos[3] = {static_cast<double>(x), static_cast<double>(y), static_cast<double>(z)};
        for (std::size_t f = 0; f < freqs; ++f) {
          const double omega = std::pow(base, -static_cast<double>(f) / static_cast<double>(freqs));
          for (std::size_t a = 0; a < 3; ++a) {
            pe[i * dim + 6 * f + 2 * a] = std::sin(pos[a] * omega);
            pe[i * dim + 6 * f + 2 * a + 1] = std::cos(pos[a] * omega);
          }
        }
      }
  return pe;
}

namespace {

// tokens_q[M,d] attend to tokens_kv[M',d]; returns the projected update [M,d].
Var cross_attend(ParamBinder& p, Var tq, Var tkv, const CrossViewConfig& cfg) {
  const std::size_t d = cfg.dim;
  Var wq = p(cfg.prefix + "q.w", {d, d}, Init::kaiming(d));
  Var wk = p(cfg.prefix + "k.w", {d, d}, Init::kaiming(d));
  Var wv = p(cfg.prefix + "v.w", {d, d}, Init::kaiming(d));
  Var q = ad::linear(tq, wq), k = ad::linear(tkv, wk), v = ad::linear(tkv, wv);
  Var scores = ad::scale(ad::matmul(q, ad::transpose(k)), 1.0 / std::sqrt(static_cast<double>(d)));
  Var attended = ad::matmul(ad::softmax(scores, 1), v);
  return output_projection(p, attended, d, cfg.prefix, cfg.zero_output);
}

}  // namespace

std::vector<Var> cross_view_transform(ParamBinder& params, std::span<const Var> features, const SinusoidalPE& pe,
                                      const CrossViewConfig& cfg) {
  if (features.empty()) throw ConfigError("cross_view_transform: at least one frame is required");
  if (pe.dim != cfg.dim) throw ConfigError("cross_view_transform: encoding width differs from feature width");
  const Shape s = features[0].shape();
  check_map("cross_view_transform", features[0], cfg.dim);
  // The encoding marks positions for attention; the residual stream carries the raw features.
  Var enc = to_tokens(params.tape().constant(pe.encode_2d(s[1], s[2])));
  std::vector<Var> tokens;
  for (Var f : features) {
    if (f.shape() != s) throw ShapeError("cross_view_transform: frames must share one shape");
    tokens.push_back(to_tokens(f));
  }
  for (std::size_t i = 1; i < tokens.size(); ++i) {
    Var prev = tokens[i - 1], cur = tokens[i];
    Var prev_pe = ad::add(prev, enc), cur_pe = ad::add(cur, enc);
    tokens[i] = ad::add(cur, cross_attend(params, cur_pe, prev_pe, cfg));
    tokens[i - 1] = ad::add(prev, cross_attend(params, prev_pe, cur_pe, cfg));
  }
  std::vector<Var> out;
  for (Var t : tokens) out.push_back(from_tokens(t, s[1], s[2]));
  return out;
}

}  // namespace occ::attn
