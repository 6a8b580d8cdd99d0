#include "occforge/pipeline.hpp"

#include <cmath>
#include <sstream>

#include "occforge/errors.hpp"

namespace occ::pipe {

using ad::Init;

std::vector<std::uint8_t> SemanticVoxelMap::labels() const {
  const Tensor& l = logits.value();
  const std::size_t c = l.shape().back(), n = l.numel() / c;
  std::vector<std::uint8_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < c; ++k)
      if (l[i * c + k] > l[i * c + best]) best = k;
    out[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

Toggles Toggles::parse(std::string_view text) {
  Toggles t;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t end = std::min(text.find(',', pos), text.size());
    const std::string_view tok = text.substr(pos, end - pos);
    if (tok == "aux") {
      t.aux_loss = true;
    } else if (tok == "icca") {
      t.icca = true;
    } else if (tok == "distill") {
      t.distill = true;
    } else if (tok == "cvt") {
      t.cvt = true;
    } else if (tok == "all") {
      t = {true, true, true, true};
    } else if (tok != "none" && !tok.empty()) {
      throw ConfigError("unknown toggle '" + std::string(tok) + "' (expected aux, icca, distill, cvt, none, all)");
    }
    pos = end + 1;
  }
  return t;
}

std::string Toggles::str() const {
  std::string s;
  auto add = [&](bool on, const char* name) {
    if (!on) return;
    if (!s.empty()) s += ',';
    s += name;
  };
  add(aux_loss, "aux");
  add(icca, "icca");
  add(distill, "distill");
  add(cvt, "cvt");
  return s.empty() ? "none" : s;
}

void BranchConfig::validate() const {
  if (width == 0) throw ConfigError("backbone width must be >= 1");
  if (branch == Branch::Student && frames != 1) throw ConfigError("the student branch consumes exactly one frame");
  if (branch == Branch::Teacher && frames < 2) throw ConfigError("the teacher branch needs at least two frames");
  attn::DeformAttnConfig a;
  a.dim = preset.dims.dim;
  a.heads = preset.dims.heads;
  a.points = preset.dims.points;
  a.validate();
  if (preset.dims.classes < 2) throw ConfigError("at least two classes are required");
}

BranchConfig BranchConfig::student(const PresetSpec& preset, Toggles toggles) {
  BranchConfig c;
  c.preset = preset;
  c.toggles = toggles;
  return c;
}

BranchConfig BranchConfig::teacher(const PresetSpec& preset) {
  BranchConfig c;
  c.branch = Branch::Teacher;
  c.prefix = "teacher/";
  c.width = 2;
  c.frames = preset.teacher_frames;
  c.toggles = {.aux_loss = false, .icca = true, .distill = false, .cvt = true};
  c.preset = preset;
  return c;
}

FeatureMap2D extract_features(ParamBinder& p, Var image, const std::string& prefix, std::size_t base_channels,
                              std::size_t width, std::size_t dim) {
  const Shape& s = image.shape();
  if (s.size() != 3 || s[0] != 3) throw ShapeError("extract_features: image must be [3,H,W], got " + shape_str(s));
  if (s[1] % 4 != 0 || s[2] % 4 != 0) {
    throw ConfigError("extract_features: image size " + shape_str(s) + " not divisible by the backbone stride 4");
  }
  const std::size_t c = base_channels * width;
  Var h = ad::silu(ad::conv2d(image, p(prefix + "conv1.w", {c, 3, 3, 3}, Init::kaiming(27)),
                              p(prefix + "conv1.b", {c}, Init::zeros()), 2, 1));
  h = ad::silu(ad::conv2d(h, p(prefix + "conv2.w", {c, c, 3, 3}, Init::kaiming(9 * c)),
                          p(prefix + "conv2.b", {c}, Init::zeros()), 2, 1));
  h = ad::conv2d(h, p(prefix + "proj.w", {dim, c, 1, 1}, Init::kaiming(c)), p(prefix + "proj.b", {dim}, Init::zeros()),
                 1, 0);
  return {h, 0, 4};
}

std::vector<std::uint8_t> correct_occupancy(ParamBinder& p, const std::vector<std::uint8_t>& occupied,
                                            const geo::VoxelGridSpec& grid, const std::string& prefix) {
  if (occupied.size() != grid.voxel_count()) throw ShapeError("correct_occupancy: occupancy does not match grid");
  ad::ParameterStore& store = p.store();
  if (!store.contains(prefix + "corrector.w")) {
    Tensor w({27}, 0.0);
    w[13] = 2.0;
    store.set(prefix + "corrector.w", w);
    store.set(prefix + "corrector.b", Tensor({1}, std::vector<double>{-1.0}));
  }
  const Tensor& w = p.raw(prefix + "corrector.w", {27}, Init::zeros());
  const double b = p.raw(prefix + "corrector.b", {1}, Init::zeros())[0];
  const auto& d = grid.dims;
  std::vector<std::uint8_t> keep(occupied.size(), 0);
  for (std::size_t x = 0; x < d[0]; ++x)
    for (std::size_t y = 0; y < d[1]; ++y)
      for (std::size_t z = 0; z < d[2]; ++z) {
        double logit = b;
        for (int k = 0; k < 27; ++k) {
          const long nx = static_cast<long>(x) + k / 9 - 1, ny = static_cast<long>(y) + (k / 3) % 3 - 1,
                     nz = static_cast<long>(z) + k % 3 - 1;
          if (nx < 0 || ny < 0 || nz < 0 || nx >= static_cast<long>(d[0]) || ny >= static_cast<long>(d[1]) ||
              nz >= static_cast<long>(d[2])) {
            continue;
          }
          logit += w[k] * occupied[grid.linear({static_cast<std::size_t>(nx), static_cast<std::size_t>(ny),
                                                static_cast<std::size_t>(nz)})];
        }
        keep[grid.linear({x, y, z})] = 1.0 / (1.0 + std::exp(-logit)) > 0.5 ? 1 : 0;
      }
  return keep;
}

QuerySet generate_depth_queries(ParamBinder& p, std::span<const FrameInput> frames, const geo::VoxelGridSpec& grid,
                                std::size_t dim, const std::string& prefix) {
  std::vector<std::uint8_t> occupied(grid.voxel_count(), 0);
  for (const FrameInput& f : frames) {
    const auto v = geo::voxelize(geo::unproject_depth(f.depth, f.camera), grid);
    for (std::size_t i = 0; i < occupied.size(); ++i) occupied[i] |= v.occupied[i];
  }
  const std::vector<std::uint8_t> keep = correct_occupancy(p, occupied, grid, prefix);
  QuerySet q;
  for (std::size_t l = 0; l < keep.size(); ++l) {
    if (!keep[l]) continue;
    q.linear.push_back(l);
    q.indices.push_back(grid.unlinear(l));
  }
  if (q.linear.empty()) throw DegenerateSceneError("depth produced no occupied voxels inside the grid");
  q.features = ad::broadcast_rows(p(prefix + "query_embed", {dim}, Init::kaiming(dim)), q.linear.size());
  return q;
}

Var fill_mask_tokens(Var visible, std::span<const std::size_t> linear, Var token, const geo::VoxelGridSpec& grid) {
  const std::size_t d = token.shape().at(0);
  if (visible.shape().size() != 2 || visible.shape()[0] != linear.size() || visible.shape()[1] != d) {
    throw ShapeError("fill_mask_tokens: visible rows " + shape_str(visible.shape()) + " for " +
                     std::to_string(linear.size()) + " indices");
  }
  Var base = ad::broadcast_rows(token, grid.voxel_count());
  return ad::reshape(ad::scatter_rows(base, linear, visible), {grid.dims[0], grid.dims[1], grid.dims[2], d});
}

SemanticVoxelMap decode_semantic_voxels(ParamBinder& p, Var volume, std::size_t factor, std::size_t classes,
                                        const std::string& prefix) {
  const Shape& s = volume.shape();
  if (s.size() != 4) throw ShapeError("decode_semantic_voxels: volume must be [X,Y,Z,d], got " + shape_str(s));
  if (factor == 0) throw ConfigError("decode_semantic_voxels: factor must be >= 1");
  const std::size_t d = s[3], n = s[0] * s[1] * s[2];
  Var logits = ad::linear(ad::reshape(volume, {n, d}), p(prefix + "head.w", {d, classes}, Init::kaiming(d)),
                          p(prefix + "head.b", {classes}, Init::zeros()));
  logits = ad::reshape(logits, {s[0], s[1], s[2], classes});
  if (factor > 1) logits = ad::upsample_nearest3d(logits, factor);
  return {logits};
}

SemanticMap2D decode_semantics_2d(ParamBinder& p, const FeatureMap2D& fmap, std::size_t classes,
                                  const std::string& prefix) {
  const std::size_t d = fmap.tensor.shape().at(0);
  const std::string pre = prefix + "sem2d/";
  Var h = ad::silu(ad::conv2d(fmap.tensor, p(pre + "conv1.w", {d, d, 3, 3}, Init::kaiming(9 * d)),
                              p(pre + "conv1.b", {d}, Init::zeros()), 1, 1));
  h = ad::silu(ad::conv2d(h, p(pre + "conv2.w", {d, d, 3, 3}, Init::kaiming(9 * d)),
                          p(pre + "conv2.b", {d}, Init::zeros()), 1, 1));
  h = ad::conv2d(h, p(pre + "head.w", {classes, d, 1, 1}, Init::kaiming(d)), p(pre + "head.b", {classes}, Init::zeros()),
                 1, 0);
  return {h};
}

namespace {

attn::DeformAttnConfig attn_config(const BranchConfig& cfg, const std::string& name, bool zero_output) {
  const ModelDims& m = cfg.preset.dims;
  return {.prefix = cfg.prefix + name, .dim = m.dim, .heads = m.heads, .points = m.points, .zero_output = zero_output};
}

// fill -> DSA layers -> optional ICCA -> decode, shared by both branches.
void complete_scene(ParamBinder& p, const BranchConfig& cfg, const FeatureMap2D& current, const geo::CameraModel& cam,
                    BranchOutputs& out) {
  const ModelDims& m = cfg.preset.dims;
  const geo::VoxelGridSpec grid = cfg.preset.feature_grid();
  Var token = p(cfg.prefix + "mask_token", {m.dim}, Init::kaiming(m.dim));
  out.initial = {fill_mask_tokens(out.visible, out.queries.linear, token, grid), Stage::Initial, cfg.branch};
  Var v = out.initial.tensor;
  for (std::size_t l = 0; l < m.dsa_layers; ++l) {
    v = attn::deformable_self_attention(p, v, attn_config(cfg, "dsa" + std::to_string(l) + "/", true));
  }
  out.refined = {v, Stage::Refined, cfg.branch};
  if (cfg.toggles.icca) {
    v = attn::image_conditioned_cross_attention(p, v, current.tensor, grid, cam, attn_config(cfg, "icca/", true));
  }
  out.conditioned = {v, Stage::Conditioned, cfg.branch};
  out.voxels = decode_semantic_voxels(p, v, cfg.preset.upsample, m.classes, cfg.prefix);
}

}  // namespace

BranchOutputs run_student(ParamBinder& p, const FrameInput& frame, const BranchConfig& cfg) {
  cfg.validate();
  if (cfg.frames != 1) throw ConfigError("run_student: configuration must use one frame");
  const ModelDims& m = cfg.preset.dims;
  const geo::VoxelGridSpec grid = cfg.preset.feature_grid();
  BranchOutputs out;
  out.features.push_back(extract_features(p, p.tape().constant(frame.image), cfg.prefix + "backbone/", m.base_channels,
                                          cfg.width, m.dim));
  const FeatureMap2D& f = out.features.back();
  out.queries = generate_depth_queries(p, std::span(&frame, 1), grid, m.dim, cfg.prefix);
  const geo::RefPoints refs = geo::voxel_refpoints(grid, out.queries.indices, frame.camera);
  out.visible = attn::deformable_cross_attention(p, out.queries.features, refs, f.tensor, attn_config(cfg, "dca/", false));
  complete_scene(p, cfg, f, frame.camera, out);
  if (cfg.toggles.aux_loss) out.sem2d = decode_semantics_2d(p, f, m.classes, cfg.prefix);
  return out;
}

BranchOutputs run_teacher(ParamBinder& p, std::span<const FrameInput> frames, const BranchConfig& cfg) {
  cfg.validate();
  if (frames.size() != cfg.frames) {
    throw ConfigError("run_teacher: expected " + std::to_string(cfg.frames) + " posed frames, got " +
                      std::to_string(frames.size()));
  }
  const ModelDims& m = cfg.preset.dims;
  const geo::VoxelGridSpec grid = cfg.preset.feature_grid();
  BranchOutputs out;
  std::vector<Var> maps;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    FeatureMap2D f = extract_features(p, p.tape().constant(frames[i].image), cfg.prefix + "backbone/", m.base_channels,
                                      cfg.width, m.dim);
    f.frame = i;
    out.features.push_back(f);
    maps.push_back(f.tensor);
  }
  if (cfg.toggles.cvt) {
    maps = attn::cross_view_transform(p, maps, attn::SinusoidalPE{.dim = m.dim},
                                      {.prefix = cfg.prefix + "cvt/", .dim = m.dim, .zero_output = true});
    for (std::size_t i = 0; i < maps.size(); ++i) out.features[i].tensor = maps[i];
  }
  out.queries = generate_depth_queries(p, frames, grid, m.dim, cfg.prefix);
  std::vector<geo::RefPoints> refs;
  for (const FrameInput& f : frames) refs.push_back(geo::voxel_refpoints(grid, out.queries.indices, f.camera));
  out.visible = attn::temporal_aggregate(p, out.queries.features, refs, maps, attn_config(cfg, "dca/", false));
  complete_scene(p, cfg, out.features.back(), frames.back().camera, out);
  return out;
}

}  // namespace occ::pipe
