#include "oracles.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>

namespace occ::oracle {

Tensor random_tensor(const Shape& shape, Rng& rng, double lo, double hi) {
  Tensor t(shape);
  for (double& x : t.values()) x = rng.uniform(lo, hi);
  return t;
}

void randomize(ad::ParameterStore& store, Rng& rng, double bound) {
  for (auto& [path, value] : store.entries()) {
    const bool scale = path.size() >= 12 && path.compare(path.size() - 12, 12, "offset_scale") == 0;
    for (double& x : value.values()) x = scale ? rng.uniform(0.05, 0.3) : rng.uniform(-bound, bound);
  }
}

namespace {

// Index of the half-open cell [o + i*r, o + (i+1)*r) containing p, or -1.
long cell_scan(double p, double o, double r, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const double lo = o + static_cast<double>(i) * r, hi = o + static_cast<double>(i + 1) * r;
    if (p >= lo && p < hi) return static_cast<long>(i);
  }
  return -1;
}

long voxel_of(const geo::Vec3& p, const geo::VoxelGridSpec& s) {
  long idx[3];
  for (int a = 0; a < 3; ++a) {
    idx[a] = cell_scan(p[a], s.origin[a], s.resolution, s.dims[a]);
    if (idx[a] < 0) return -1;
  }
  return (idx[0] * static_cast<long>(s.dims[1]) + idx[1]) * static_cast<long>(s.dims[2]) + idx[2];
}

}  // namespace

std::vector<std::uint8_t> voxelize_occupancy(const geo::PointCloud& cloud, const geo::VoxelGridSpec& spec) {
  std::vector<std::uint8_t> occ(spec.voxel_count(), 0);
  for (const auto& p : cloud.points) {
    const long l = voxel_of(p, spec);
    if (l >= 0) occ[static_cast<std::size_t>(l)] = 1;
  }
  return occ;
}

std::vector<std::uint8_t> voxelize_labels(const geo::PointCloud& cloud, const geo::VoxelGridSpec& spec) {
  std::map<long, std::array<std::size_t, 256>> hist;
  for (std::size_t i = 0; i < cloud.points.size(); ++i) {
    const long l = voxel_of(cloud.points[i], spec);
    if (l < 0) continue;
    auto it = hist.try_emplace(l).first;
    it->second[cloud.labels[i]] += 1;
  }
  std::vector<std::uint8_t> labels(spec.voxel_count(), 0);
  for (const auto& [l, h] : hist) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < 256; ++c)
      if (h[c] > h[best]) best = c;
    labels[static_cast<std::size_t>(l)] = static_cast<std::uint8_t>(best);
  }
  return labels;
}

Pixel project(const geo::Vec3& p, const geo::CameraModel& cam) {
  const double ph[4] = {p[0], p[1], p[2], 1.0};
  const auto& e = cam.world_to_camera();
  double pc[3] = {0.0, 0.0, 0.0};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) pc[i] += e[i][j] * ph[j];
  const geo::Mat3 k = cam.intrinsic_matrix();
  double h[3] = {0.0, 0.0, 0.0};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) h[i] += k[i][j] * pc[j];
  Pixel px{0.0, 0.0, pc[2], false};
  if (!(pc[2] > 0.0)) return px;
  px.u = h[0] / h[2];
  px.v = h[1] / h[2];
  const double wm = static_cast<double>(cam.width() - 1), hm = static_cast<double>(cam.height() - 1);
  px.valid = px.u >= 0.0 && px.u <= wm && px.v >= 0.0 && px.v <= hm;
  return px;
}

namespace {

struct Tap {
  std::size_t i0, i1;
  double f;
};

Tap tap(double p, std::size_t n) {
  const double x = p * static_cast<double>(n - 1);
  std::size_t i0 = static_cast<std::size_t>(std::floor(x));
  if (n == 1) return {0, 0, 0.0};
  if (i0 > n - 2) i0 = n - 2;
  return {i0, i0 + 1, x - static_cast<double>(i0)};
}

bool inside(double p) { return p >= 0.0 && p <= 1.0; }

}  // namespace

double bilinear(const Tensor& fmap, std::size_t c, double u, double v) {
  if (!inside(u) || !inside(v)) return 0.0;
  const std::size_t h = fmap.shape()[1], w = fmap.shape()[2];
  const Tap tx = tap(u, w), ty = tap(v, h);
  auto at = [&](std::size_t y, std::size_t x) { return fmap[(c * h + y) * w + x]; };
  return (1 - tx.f) * (1 - ty.f) * at(ty.i0, tx.i0) + tx.f * (1 - ty.f) * at(ty.i0, tx.i1) +
         (1 - tx.f) * ty.f * at(ty.i1, tx.i0) + tx.f * ty.f * at(ty.i1, tx.i1);
}

double trilinear(const Tensor& vol, std::size_t c, double x, double y, double z) {
  if (!inside(x) || !inside(y) || !inside(z)) return 0.0;
  const auto& s = vol.shape();
  const Tap t[3] = {tap(x, s[0]), tap(y, s[1]), tap(z, s[2])};
  double acc = 0.0;
  for (int corner = 0; corner < 8; ++corner) {
    double w = 1.0;
    std::size_t idx[3];
    for (int a = 0; a < 3; ++a) {
      const bool hi = (corner >> a) & 1;
      idx[a] = hi ? t[a].i1 : t[a].i0;
      w *= hi ? t[a].f : 1 - t[a].f;
    }
    acc += w * vol[((idx[0] * s[1] + idx[1]) * s[2] + idx[2]) * s[3] + c];
  }
  return acc;
}

double pe2d(std::size_t c, std::size_t dim, std::size_t y, std::size_t x, double base) {
  const std::size_t freqs = dim / 4, f = c / 4;
  if (f >= freqs) return 0.0;
  const double omega = std::pow(base, -static_cast<double>(f) / static_cast<double>(freqs));
  const double pos = static_cast<double>((c % 4) < 2 ? y : x) * omega;
  return (c % 2 == 0) ? std::sin(pos) : std::cos(pos);
}

double pe3d(std::size_t c, std::size_t dim, std::size_t x, std::size_t y, std::size_t z, double base) {
  const std::size_t freqs = dim / 6, f = c / 6;
  if (f >= freqs) return 0.0;
  const double omega = std::pow(base, -static_cast<double>(f) / static_cast<double>(freqs));
  const std::size_t pos[3] = {x, y, z};
  const double a = static_cast<double>(pos[(c % 6) / 2]) * omega;
  return (c % 2 == 0) ? std::sin(a) : std::cos(a);
}

namespace {

struct AttnParams {
  const Tensor &off_w, &off_b, &off_s, &att_w, &att_b, &val_w, &out_w, &out_b;
};

AttnParams attn_params(const ad::ParameterStore& s, const std::string& p) {
  return {s.at(p + "offset.w"), s.at(p + "offset.b"), s.at(p + "offset_scale"), s.at(p + "attn.w"),
          s.at(p + "attn.b"),   s.at(p + "value.w"),  s.at(p + "out.w"),        s.at(p + "out.b")};
}

// One query of multi-head deformable attention. `sample(c, loc)` returns raw
// channel c of the sampled map at loc[0..D).
template <class Sample>
std::vector<double> deform_row(const AttnParams& w, const attn::DeformAttnConfig& cfg, const double* q,
                               const double* ref, std::size_t dims, Sample&& sample) {
  const std::size_t d = cfg.dim, H = cfg.heads, K = cfg.points, dh = d / H;
  const std::size_t no = H * K * dims, na = H * K;
  std::vector<double> off(no), logit(na), acc(d, 0.0);
  for (std::size_t j = 0; j < no; ++j) {
    double s = w.off_b[j];
    for (std::size_t c = 0; c < d; ++c) s += q[c] * w.off_w[c * no + j];
    off[j] = s;
  }
  for (std::size_t j = 0; j < na; ++j) {
    double s = w.att_b[j];
    for (std::size_t c = 0; c < d; ++c) s += q[c] * w.att_w[c * na + j];
    logit[j] = s;
  }
  std::vector<double> raw(d);
  for (std::size_t h = 0; h < H; ++h) {
    double mx = logit[h * K];
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, logit[h * K + k]);
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(logit[h * K + k] - mx);
    for (std::size_t k = 0; k < K; ++k) {
      const double a = std::exp(logit[h * K + k] - mx) / z;
      double loc[3];
      for (std::size_t e = 0; e < dims; ++e) loc[e] = ref[e] + off[(h * K + k) * dims + e] * w.off_s[h];
      for (std::size_t c = 0; c < d; ++c) raw[c] = sample(c, loc);
      for (std::size_t co = h * dh; co < (h + 1) * dh; ++co) {
        double v = 0.0;
        for (std::size_t c = 0; c < d; ++c) v += raw[c] * w.val_w[c * d + co];
        acc[co] += a * v;
      }
    }
  }
  std::vector<double> out(d);
  for (std::size_t o = 0; o < d; ++o) {
    double s = w.out_b[o];
    for (std::size_t c = 0; c < d; ++c) s += acc[c] * w.out_w[c * d + o];
    out[o] = s;
  }
  return out;
}

}  // namespace

Tensor dca(const ad::ParameterStore& store, const attn::DeformAttnConfig& cfg, const Tensor& queries,
           const geo::RefPoints& refs, const Tensor& fmap) {
  const AttnParams w = attn_params(store, cfg.prefix);
  const std::size_t n = queries.shape()[0], d = cfg.dim;
  Tensor out({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    if (!refs.valid[i]) continue;
    const auto row = deform_row(w, cfg, queries.data() + i * d, refs.coords.data() + 2 * i, 2,
                                [&](std::size_t c, const double* loc) { return bilinear(fmap, c, loc[0], loc[1]); });
    std::copy(row.begin(), row.end(), out.data() + i * d);
  }
  return out;
}

Tensor dsa(const ad::ParameterStore& store, const attn::DeformAttnConfig& cfg, const Tensor& volume, bool residual,
           bool positional) {
  const AttnParams w = attn_params(store, cfg.prefix);
  const auto& s = volume.shape();
  const std::size_t d = cfg.dim;
  Tensor in = volume;
  if (positional) {
    for (std::size_t x = 0; x < s[0]; ++x)
      for (std::size_t y = 0; y < s[1]; ++y)
        for (std::size_t z = 0; z < s[2]; ++z)
          for (std::size_t c = 0; c < d; ++c) in[((x * s[1] + y) * s[2] + z) * d + c] += pe3d(c, d, x, y, z, 10000.0);
  }
  auto norm = [](std::size_t i, std::size_t n) { return n > 1 ? static_cast<double>(i) / static_cast<double>(n - 1) : 0.0; };
  Tensor out(s);
  for (std::size_t x = 0; x < s[0]; ++x)
    for (std::size_t y = 0; y < s[1]; ++y)
      for (std::size_t z = 0; z < s[2]; ++z) {
        const std::size_t i = (x * s[1] + y) * s[2] + z;
        const double ref[3] = {norm(x, s[0]), norm(y, s[1]), norm(z, s[2])};
        const auto row = deform_row(w, cfg, in.data() + i * d, ref, 3, [&](std::size_t c, const double* loc) {
          return trilinear(in, c, loc[0], loc[1], loc[2]);
        });
        for (std::size_t c = 0; c < d; ++c) out[i * d + c] = row[c] + (residual ? volume[i * d + c] : 0.0);
      }
  return out;
}

Tensor icca(const ad::ParameterStore& store, const attn::DeformAttnConfig& cfg, const Tensor& volume,
            const Tensor& fmap, const geo::VoxelGridSpec& grid, const geo::CameraModel& cam) {
  const AttnParams w = attn_params(store, cfg.prefix);
  const std::size_t d = cfg.dim;
  const double wm = static_cast<double>(cam.width() - 1), hm = static_cast<double>(cam.height() - 1);
  Tensor out = volume;
  for (std::size_t x = 0; x < grid.dims[0]; ++x)
    for (std::size_t y = 0; y < grid.dims[1]; ++y)
      for (std::size_t z = 0; z < grid.dims[2]; ++z) {
        const geo::Vec3 centroid{grid.origin[0] + (x + 0.5) * grid.resolution,
                                 grid.origin[1] + (y + 0.5) * grid.resolution,
                                 grid.origin[2] + (z + 0.5) * grid.resolution};
        const Pixel px = project(centroid, cam);
        if (!px.valid) continue;
        const double ref[2] = {px.u / wm, px.v / hm};
        const std::size_t i = (x * grid.dims[1] + y) * grid.dims[2] + z;
        const auto row = deform_row(w, cfg, volume.data() + i * d, ref, 2,
                                    [&](std::size_t c, const double* loc) { return bilinear(fmap, c, loc[0], loc[1]); });
        for (std::size_t c = 0; c < d; ++c) out[i * d + c] += row[c];
      }
  return out;
}

namespace {

using Tokens = std::vector<std::vector<double>>;  // [positions][d]

// Attention reads a + pe and b + pe; the residual adds to a.
Tokens dense_attend(const ad::ParameterStore& s, const attn::CrossViewConfig& cfg, const Tokens& a, const Tokens& b,
                    const Tokens& pe) {
  const std::size_t d = cfg.dim;
  const Tensor &wq = s.at(cfg.prefix + "q.w"), &wk = s.at(cfg.prefix + "k.w"), &wv = s.at(cfg.prefix + "v.w");
  const Tensor &wo = s.at(cfg.prefix + "out.w"), &bo = s.at(cfg.prefix + "out.b");
  auto proj = [d](const Tokens& t, const Tensor& w) {
    Tokens r(t.size(), std::vector<double>(d, 0.0));
    for (std::size_t p = 0; p < t.size(); ++p)
      for (std::size_t o = 0; o < d; ++o)
        for (std::size_t c = 0; c < d; ++c) r[p][o] += t[p][c] * w[c * d + o];
    return r;
  };
  auto encoded = [&pe](Tokens t) {
    for (std::size_t p = 0; p < t.size(); ++p)
      for (std::size_t c = 0; c < t[p].size(); ++c) t[p][c] += pe[p][c];
    return t;
  };
  const Tokens ae = encoded(a), be = encoded(b);
  const Tokens q = proj(ae, wq), k = proj(be, wk), v = proj(be, wv);
  Tokens out(a.size(), std::vector<double>(d, 0.0));
  for (std::size_t p = 0; p < a.size(); ++p) {
    std::vector<double> score(b.size());
    double mx = -INFINITY;
    for (std::size_t r = 0; r < b.size(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += q[p][c] * k[r][c];
      score[r] = dot / std::sqrt(static_cast<double>(d));
      mx = std::max(mx, score[r]);
    }
    double z = 0.0;
    for (double& sc : score) z += (sc = std::exp(sc - mx));
    std::vector<double> mixed(d, 0.0);
    for (std::size_t r = 0; r < b.size(); ++r)
      for (std::size_t c = 0; c < d; ++c) mixed[c] += score[r] / z * v[r][c];
    for (std::size_t o = 0; o < d; ++o) {
      double acc = bo[o];
      for (std::size_t c = 0; c < d; ++c) acc += mixed[c] * wo[c * d + o];
      out[p][o] = a[p][o] + acc;
    }
  }
  return out;
}

}  // namespace

std::vector<Tensor> cvt(const ad::ParameterStore& store, const attn::CrossViewConfig& cfg,
                        const std::vector<Tensor>& features, double pe_base) {
  const std::size_t d = cfg.dim, h = features[0].shape()[1], w = features[0].shape()[2];
  Tokens pe(h * w, std::vector<double>(d));
  for (std::size_t c = 0; c < d; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) pe[y * w + x][c] = pe2d(c, d, y, x, pe_base);
  std::vector<Tokens> toks;
  for (const Tensor& f : features) {
    Tokens t(h * w, std::vector<double>(d));
    for (std::size_t c = 0; c < d; ++c)
      for (std::size_t p = 0; p < h * w; ++p) t[p][c] = f[c * h * w + p];
    toks.push_back(std::move(t));
  }
  for (std::size_t i = 1; i < toks.size(); ++i) {
    const Tokens prev = toks[i - 1], cur = toks[i];
    toks[i] = dense_attend(store, cfg, cur, prev, pe);
    toks[i - 1] = dense_attend(store, cfg, prev, cur, pe);
  }
  std::vector<Tensor> out;
  for (const Tokens& t : toks) {
    Tensor m({d, h, w});
    for (std::size_t c = 0; c < d; ++c)
      for (std::size_t p = 0; p < h * w; ++p) m[c * h * w + p] = t[p][c];
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace occ::oracle
