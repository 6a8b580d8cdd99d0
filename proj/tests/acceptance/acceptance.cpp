// Acceptance checks 1-9. Prints one PASS/FAIL line per criterion; exit status
// is the number of failures. Pass criterion numbers to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "occforge/checkpoint.hpp"
#include "occforge/errors.hpp"
#include "occforge/gradsuite.hpp"
#include "occforge/grid_io.hpp"
#include "occforge/ops.hpp"
#include "occforge/train.hpp"
#include "oracles.hpp"

using namespace occ;
using namespace occ::ad;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

// ---- 1: gradients ------------------------------------------------------------

Outcome gradients() {
  const auto t0 = Clock::now();
  GradCheckOptions opt;  // step 1e-5, relative tolerance 1e-4
  const auto cases = verify::gradient_suite(Preset::Micro, 1, opt);
  const double secs = seconds_since(t0);
  double worst = 0.0;
  std::string failed;
  for (const auto& c : cases) {
    worst = std::max(worst, c.report.max_error());
    if (!c.report.passed()) failed += " " + c.name;
  }
  const bool pass = failed.empty() && secs < 120.0 && cases.size() >= 40;
  return {pass, std::to_string(cases.size()) + " checks, max error " + fmt("%.2e", worst) + ", " + fmt("%.1fs", secs) +
                    (failed.empty() ? "" : "; failed:" + failed)};
}

// ---- 2: attention oracles ----------------------------------------------------

void materialize(ParameterStore& store, Rng& rng, const std::function<void(ParamBinder&)>& f) {
  {
    Tape t;
    ParamBinder b(t, store, false);
    f(b);
  }
  oracle::randomize(store, rng);
}

Outcome attention_oracles() {
  Rng rng(2024);
  const double tol = 1e-10;
  double worst[4] = {0, 0, 0, 0};
  int count[4] = {0, 0, 0, 0};
  for (int trial = 0; trial < 25; ++trial) {
    attn::DeformAttnConfig cfg;
    cfg.prefix = "dca/";
    cfg.heads = static_cast<std::size_t>(rng.integer(1, 2));
    cfg.dim = cfg.heads * static_cast<std::size_t>(rng.integer(1, 4));
    cfg.points = static_cast<std::size_t>(rng.integer(1, 4));
    const std::size_t n = static_cast<std::size_t>(rng.integer(1, 8)), h = static_cast<std::size_t>(rng.integer(2, 8)),
                      w = static_cast<std::size_t>(rng.integer(2, 8));
    const Tensor q = oracle::random_tensor({n, cfg.dim}, rng), fmap = oracle::random_tensor({cfg.dim, h, w}, rng);
    geo::RefPoints refs;
    for (std::size_t i = 0; i < n; ++i) {
      refs.coords.push_back(rng.uniform());
      refs.coords.push_back(rng.uniform());
      refs.valid.push_back(rng.bernoulli(0.8) ? 1 : 0);
    }
    ParameterStore store(static_cast<std::uint64_t>(trial));
    const auto run = [&](ParamBinder& b) {
      return attn::deformable_cross_attention(b, b.tape().constant(q), refs, b.tape().constant(fmap), cfg).value();
    };
    materialize(store, rng, [&](ParamBinder& b) { run(b); });
    Tape t;
    ParamBinder b(t, store, false);
    worst[0] = std::max(worst[0], max_abs_diff(run(b), oracle::dca(store, cfg, q, refs, fmap)));
    ++count[0];
  }
  for (int trial = 0; trial < 24; ++trial) {
    attn::DeformAttnConfig cfg;
    cfg.prefix = "dsa/";
    cfg.heads = static_cast<std::size_t>(rng.integer(1, 2));
    cfg.dim = cfg.heads * static_cast<std::size_t>(rng.integer(2, 4));
    cfg.points = static_cast<std::size_t>(rng.integer(1, 3));
    const Tensor vol = oracle::random_tensor({static_cast<std::size_t>(rng.integer(1, 4)), static_cast<std::size_t>(rng.integer(2, 4)),
                                              static_cast<std::size_t>(rng.integer(1, 3)), cfg.dim},
                                             rng);
    const attn::SelfAttnOptions opt{.residual = trial % 3 != 0, .positional = trial % 2 == 0};
    ParameterStore store(static_cast<std::uint64_t>(trial));
    const auto run = [&](ParamBinder& b) {
      return attn::deformable_self_attention(b, b.tape().constant(vol), cfg, opt).value();
    };
    materialize(store, rng, [&](ParamBinder& b) { run(b); });
    Tape t;
    ParamBinder b(t, store, false);
    worst[1] = std::max(worst[1], max_abs_diff(run(b), oracle::dsa(store, cfg, vol, opt.residual, opt.positional)));
    ++count[1];
  }
  const geo::VoxelGridSpec grid = geo::micro_grid();
  for (int trial = 0; trial < 20; ++trial) {
    attn::DeformAttnConfig cfg;
    cfg.prefix = "icca/";
    cfg.dim = 4;
    cfg.heads = 2;
    cfg.points = 2;
    const Tensor vol = oracle::random_tensor({8, 8, 4, 4}, rng), fmap = oracle::random_tensor({4, 4, 4}, rng);
    const geo::CameraModel cam =
        geo::CameraModel({8.0, 8.0, 7.5, 7.5}, geo::forward_looking_extrinsics({-0.4, 0.0, 0.4}, rng.uniform(-0.4, 0.4)), 16, 16)
            .rescaled(4, 4);
    ParameterStore store(static_cast<std::uint64_t>(trial));
    const auto run = [&](ParamBinder& b) {
      return attn::image_conditioned_cross_attention(b, b.tape().constant(vol), b.tape().constant(fmap), grid, cam, cfg)
          .value();
    };
    materialize(store, rng, [&](ParamBinder& b) { run(b); });
    Tape t;
    ParamBinder b(t, store, false);
    worst[2] = std::max(worst[2], max_abs_diff(run(b), oracle::icca(store, cfg, vol, fmap, grid, cam)));
    ++count[2];
  }
  for (int trial = 0; trial < 20; ++trial) {
    const attn::CrossViewConfig cfg{.prefix = "cvt/", .dim = 4, .zero_output = true};
    std::vector<Tensor> feats;
    const std::size_t n = static_cast<std::size_t>(rng.integer(2, 3));
    for (std::size_t i = 0; i < n; ++i) feats.push_back(oracle::random_tensor({4, 4, 4}, rng));
    ParameterStore store(static_cast<std::uint64_t>(trial));
    const auto run = [&](ParamBinder& b) {
      std::vector<Var> vars;
      for (const Tensor& f : feats) vars.push_back(b.tape().constant(f));
      std::vector<Tensor> out;
      for (Var v : attn::cross_view_transform(b, vars, attn::SinusoidalPE{.dim = 4}, cfg)) out.push_back(v.value());
      return out;
    };
    materialize(store, rng, [&](ParamBinder& b) { run(b); });
    Tape t;
    ParamBinder b(t, store, false);
    const auto got = run(b);
    const auto want = oracle::cvt(store, cfg, feats);
    for (std::size_t i = 0; i < n; ++i) worst[3] = std::max(worst[3], max_abs_diff(got[i], want[i]));
    ++count[3];
  }
  const char* names[4] = {"DCA", "DSA", "ICCA", "CVT"};
  bool pass = true;
  std::string detail;
  for (int i = 0; i < 4; ++i) {
    pass = pass && worst[i] <= tol && count[i] >= 20;
    detail += std::string(i ? "; " : "") + names[i] + " " + std::to_string(count[i]) + " instances max " + fmt("%.1e", worst[i]);
  }
  return {pass, detail};
}

// ---- 3: geometry -------------------------------------------------------------

Outcome geometry() {
  Rng rng(77);
  const geo::VoxelGridSpec spec = geo::micro_grid();
  int vox_ok = 0;
  for (int k = 0; k < 100; ++k) {
    geo::PointCloud c;
    for (int i = 0; i < 500; ++i) {
      geo::Vec3 p;
      for (int a = 0; a < 3; ++a) {
        const double ext = spec.resolution * static_cast<double>(spec.dims[a]);
        p[a] = rng.uniform(spec.origin[a] - 0.1 * ext, spec.origin[a] + 1.1 * ext);
      }
      c.points.push_back(p);
      if (k % 2 == 0) c.labels.push_back(static_cast<std::uint8_t>(rng.integer(0, 4)));
    }
    const geo::Voxelization v = geo::voxelize(c, spec);
    bool ok = v.occupied == oracle::voxelize_occupancy(c, spec);
    if (c.labeled()) ok = ok && v.labels && v.labels->labels == oracle::voxelize_labels(c, spec);
    vox_ok += ok;
  }
  double round_trip = 0.0;
  for (int k = 0; k < 200; ++k) {
    const geo::Vec3 pos{rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(1.0, 2.0)};
    const geo::CameraModel cam({rng.uniform(20.0, 40.0), rng.uniform(20.0, 40.0), rng.uniform(20.0, 30.0), rng.uniform(10.0, 20.0)},
                               geo::forward_looking_extrinsics(pos, rng.uniform(-0.3, 0.3)), 32, 48);
    Tensor depth({32, 48}, 0.0);
    const std::size_t u = static_cast<std::size_t>(rng.integer(0, 47)), vv = static_cast<std::size_t>(rng.integer(0, 31));
    const double z = rng.uniform(0.5, 60.0);
    depth[vv * 48 + u] = z;
    const geo::PointCloud c = geo::unproject_depth(depth, cam);
    const geo::Projection p = geo::project_point(c.points.at(0), cam);
    round_trip = std::max({round_trip, std::abs(p.u - static_cast<double>(u)), std::abs(p.v - static_cast<double>(vv)),
                           std::abs(p.depth - z)});
  }
  // Rendered depth, unprojected and located in the grid, must sit on an occupied voxel.
  std::size_t total = 0, exact = 0;
  double worst_gap = 0.0;
  for (Preset preset : {Preset::Micro, Preset::Toy})
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
      const scene::SyntheticScene s = scene::generate_scene(seed, preset);
      const auto& g = s.labels;
      for (std::size_t f = 0; f < s.frames(); ++f)
        for (const geo::Vec3& pt : geo::unproject_depth(s.depths[f], s.cameras[f]).points) {
          const auto idx = g.spec.locate(pt);
          if (!idx) continue;
          ++total;
          if (g.occupied(*idx)) {
            ++exact;
            continue;
          }
          double best = std::numeric_limits<double>::infinity();
          for (std::size_t l = 0; l < g.spec.voxel_count(); ++l) {
            const geo::VoxelIndex i = g.spec.unlinear(l);
            if (!g.occupied(i)) continue;
            const std::size_t ix[3] = {i.x, i.y, i.z};
            double d = 0.0;
            for (int a = 0; a < 3; ++a) {
              const double lo = g.spec.origin[a] + static_cast<double>(ix[a]) * g.spec.resolution;
              d = std::max(d, std::max({lo - pt[a], pt[a] - lo - g.spec.resolution, 0.0}));
            }
            best = std::min(best, d);
          }
          worst_gap = std::max(worst_gap, best / g.spec.resolution);
        }
    }
  const bool pass = vox_ok == 100 && round_trip <= 1e-9 && worst_gap <= 0.5 && total > 0;
  return {pass, "voxelize " + std::to_string(vox_ok) + "/100 exact; round trip " + fmt("%.1e", round_trip) +
                    "; re-voxelized " + std::to_string(exact) + "/" + std::to_string(total) +
                    " on occupied voxels, worst gap " + fmt("%.2e", worst_gap) + " voxel"};
}

// ---- 4: loss identities ------------------------------------------------------

Outcome loss_identities() {
  Rng rng(4);
  Tape t;
  const auto vol = [&](const Tensor& v, pipe::Branch br) {
    return pipe::VoxelFeatureVolume{t.constant(v), pipe::Stage::Conditioned, br};
  };
  double kl_self = 0.0;
  for (int k = 0; k < 20; ++k) {
    const Tensor v = oracle::random_tensor({3, 2, 2, 6}, rng, -5.0, 5.0);
    kl_self = std::max(kl_self, std::abs(loss::distill_loss(vol(v, pipe::Branch::Teacher), vol(v, pipe::Branch::Student)).item()));
  }
  double ce = 0.0;
  for (std::size_t c : {2u, 5u, 8u, 20u}) {
    std::vector<std::uint8_t> labels(12);
    for (auto& l : labels) l = static_cast<std::uint8_t>(rng.integer(0, static_cast<std::int64_t>(c) - 1));
    const Var logits = t.constant(Tensor({12, c}, rng.uniform(-3.0, 3.0)));
    ce = std::max(ce, std::abs(cross_entropy(logits, labels, 1).item() - std::log(static_cast<double>(c))));
  }
  bool total_exact = true;
  for (int k = 0; k < 20; ++k) {
    loss::LossWeights w{rng.uniform(0, 5), rng.uniform(0, 5), rng.uniform(0, 5), rng.uniform(0, 5), rng.uniform(0, 5)};
    const double v[5] = {rng.uniform(0, 3), rng.uniform(0, 3), rng.uniform(0, 3), rng.uniform(0, 3), rng.uniform(0, 3)};
    loss::LossTerms terms{t.constant(Tensor({}, v[0])), t.constant(Tensor({}, v[1])), t.constant(Tensor({}, v[2])),
                          t.constant(Tensor({}, v[3])), t.constant(Tensor({}, v[4]))};
    const double want = w.sem * v[0] + w.distill * v[1] + w.ssc * v[2] + w.scal_sem * v[3] + w.scal_geo * v[4];
    total_exact = total_exact && loss::total_loss(t, terms, w).total.item() == want;
  }
  const double two_point =
      loss::distill_loss(vol(Tensor({1, 1, 1, 2}, std::vector<double>{0.0, 0.0}), pipe::Branch::Teacher),
                         vol(Tensor({1, 1, 1, 2}, std::vector<double>{0.0, std::log(3.0)}), pipe::Branch::Student))
          .item();
  const bool pass = kl_self == 0.0 && ce <= 1e-9 && total_exact && std::abs(two_point - 0.14384) <= 1e-5;
  return {pass, "KL(v,v) " + fmt("%.1e", kl_self) + "; |CE - ln C| " + fmt("%.1e", ce) + "; total " +
                    (total_exact ? "exact" : "inexact") + "; two-point KL " + fmt("%.6f", two_point)};
}

// ---- 5: overfit --------------------------------------------------------------

double labeled_accuracy(const eval::ConfusionMatrix& cm) {
  std::uint64_t correct = 0;
  for (std::size_t c = 0; c < cm.classes; ++c) correct += cm.at(c, c);
  return static_cast<double>(correct) / static_cast<double>(cm.total());
}

Outcome overfit() {
  const auto t0 = Clock::now();
  const std::vector<scene::SyntheticScene> one{scene::generate_scene(7, Preset::Toy)};
  train::TrainConfig cfg;
  cfg.preset = Preset::Toy;
  cfg.lr = 2e-2;
  cfg.seed = 0;
  ParameterStore store(cfg.seed);
  // The distillation target comes from a teacher fitted to the same scene first.
  train::TrainConfig tcfg = cfg;
  tcfg.mode = train::Mode::Teacher;
  tcfg.epochs = 200;
  train::train_model(store, tcfg, one);

  cfg.toggles = pipe::Toggles::parse("all");
  const std::vector<Tensor> target = train::teacher_targets(store, cfg, one);
  Adam opt({.lr = cfg.lr});
  Rng noise(0);
  double acc = 0.0;
  std::size_t steps = 0;
  while (steps < 500) {
    Tape tape;
    ParamBinder b(tape, store, true);
    const auto l = train::student_step_loss(b, &target[0], one[0], cfg, noise);
    tape.backward(l.total);
    opt.step(store, b.gradients());
    ++steps;
    if (steps % 25 == 0) {
      acc = labeled_accuracy(train::evaluate(store, cfg, one));
      if (acc >= 0.95) break;
    }
  }
  const double secs = seconds_since(t0);
  // Free voxels count as labeled; mIoU shows how the occupied classes fare.
  const double miou = eval::compute_miou(train::evaluate(store, cfg, one)).miou;
  return {acc >= 0.95 && steps <= 500 && secs < 600.0,
          "accuracy " + fmt("%.4f", acc) + " (mIoU " + fmt("%.4f", miou) + ") after " + std::to_string(steps) +
              " student steps (teacher 200), " + fmt("%.0fs", secs)};
}

// ---- 6: directional ablation -------------------------------------------------

constexpr std::size_t kAblationTrainScenes = 20;
constexpr std::size_t kAblationEpochs = 15;
constexpr std::size_t kAblationTeacherEpochs = 20;
constexpr double kAblationLr = 1e-2;
constexpr double kAblationDepthNoise = 0.4;  // student sees noisy depth, teacher does not

Outcome ablation() {
  const auto t0 = Clock::now();
  std::vector<scene::SyntheticScene> train_scenes, val;
  for (std::size_t i = 0; i < kAblationTrainScenes; ++i) train_scenes.push_back(scene::generate_scene(1000 + i, Preset::Toy));
  for (std::size_t i = 0; i < 10; ++i) val.push_back(scene::generate_scene(5000 + i, Preset::Toy));
  train::AblationConfig a;
  a.base.preset = Preset::Toy;
  a.base.epochs = kAblationEpochs;
  a.base.teacher_epochs = kAblationTeacherEpochs;
  a.base.lr = kAblationLr;
  a.base.depth_noise = kAblationDepthNoise;
  a.seeds = {0, 1, 2};
  const auto rows = train::run_ablation(a, train_scenes, val, [](const std::string& s) {
    std::printf("    %s\n", s.c_str());
    std::fflush(stdout);
  });
  std::printf("%s", train::ablation_markdown(rows).c_str());
  const auto& base = rows[0];
  const auto& aux = rows[1];
  const auto& icca = rows[2];
  const auto& both = rows[3];
  const auto& all = rows[4];
  // lhs <= rhs in the mean, with at most one seed where lhs > rhs.
  std::string detail;
  bool pass = true;
  const auto compare = [&](const train::AblationRow& lhs, const train::AblationRow& rhs) {
    int inversions = 0;
    for (std::size_t s = 0; s < lhs.miou.size(); ++s) inversions += lhs.miou[s] > rhs.miou[s];
    const bool ok = lhs.mean <= rhs.mean && inversions <= 1;
    pass = pass && ok;
    detail += (detail.empty() ? "" : "; ") + lhs.name + " <= " + rhs.name + (ok ? " ok" : " violated") + " (" +
              fmt("%.2f", 100 * lhs.mean) + " vs " + fmt("%.2f", 100 * rhs.mean) + ", " + std::to_string(inversions) +
              (inversions == 1 ? " inversion)" : " inversions)");
  };
  compare(base, aux);
  compare(base, icca);
  compare(aux, all);
  compare(icca, all);
  compare(both, all);  // distillation on vs off with everything else equal
  detail += "; " + fmt("%.0fs", seconds_since(t0));
  return {pass, detail};
}

// ---- 7: determinism ----------------------------------------------------------

Outcome determinism() {
  const std::vector<scene::SyntheticScene> scenes{scene::generate_scene(11, Preset::Toy), scene::generate_scene(12, Preset::Toy)};
  train::TrainConfig cfg;
  cfg.preset = Preset::Toy;
  cfg.mode = train::Mode::Distill;
  cfg.toggles = pipe::Toggles::parse("aux,icca");
  cfg.epochs = 2;
  cfg.seed = 9;
  cfg.depth_noise = 0.1;
  struct Run {
    std::string checkpoint, curve;
    double miou = 0.0;
  };
  const auto run = [&] {
    ParameterStore store(cfg.seed);
    std::ostringstream curve;
    train::train_model(store, cfg, scenes, [&](std::string_view phase, std::size_t step, const loss::LossBreakdown& b) {
      curve << phase << ' ' << step;
      for (double v : b.values()) curve << ' ' << fmt("%.17g", v);
      curve << '\n';
    });
    std::ostringstream ck;
    write_checkpoint(ck, store);
    return Run{ck.str(), curve.str(), eval::compute_miou(train::evaluate(store, cfg, scenes)).miou};
  };
  const Run a = run(), b = run();
  const bool same_miou = std::memcmp(&a.miou, &b.miou, sizeof(double)) == 0;
  const bool pass = a.checkpoint == b.checkpoint && a.curve == b.curve && same_miou && !a.curve.empty();
  return {pass, std::string("checkpoints ") + (a.checkpoint == b.checkpoint ? "identical" : "differ") + " (" +
                    std::to_string(a.checkpoint.size()) + " bytes); loss curves " + (a.curve == b.curve ? "identical" : "differ") +
                    "; mIoU " + (same_miou ? "identical" : "differs") + " (" + fmt("%.6f", a.miou) + ")"};
}

// ---- 8: identity at initialization -------------------------------------------

Outcome identity_at_init() {
  const PresetSpec spec = preset_spec(Preset::Toy);
  std::size_t checks = 0, ok = 0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const scene::SyntheticScene s = scene::generate_scene(seed, Preset::Toy);
    ParameterStore store(seed);
    Tape t;
    ParamBinder b(t, store, false);
    const auto st = pipe::run_student(b, scene::frame_input(s, s.frames() - 1),
                                      pipe::BranchConfig::student(spec, pipe::Toggles::parse("aux,icca")));
    ok += bitwise_equal(st.refined.tensor.value(), st.initial.tensor.value());
    ok += bitwise_equal(st.conditioned.tensor.value(), st.refined.tensor.value());
    std::vector<pipe::FrameInput> frames;
    for (std::size_t f = s.frames() - spec.teacher_frames; f < s.frames(); ++f) frames.push_back(scene::frame_input(s, f));
    pipe::BranchConfig on = pipe::BranchConfig::teacher(spec), off = on;
    off.toggles.cvt = false;
    const auto a = pipe::run_teacher(b, frames, on), c = pipe::run_teacher(b, frames, off);
    ok += bitwise_equal(a.conditioned.tensor.value(), c.conditioned.tensor.value());
    ok += bitwise_equal(a.voxels.logits.value(), c.voxels.logits.value());
    checks += 4;
  }
  return {ok == checks, std::to_string(ok) + "/" + std::to_string(checks) +
                            " bitwise identities (DSA and ICCA pass-through, teacher CVT on == off)"};
}

// ---- 9: formats --------------------------------------------------------------

template <typename Read>
std::string error_kind(const std::string& bytes, Read read) {
  try {
    std::istringstream in(bytes);
    read(in);
  } catch (const FormatError& e) {
    switch (e.kind()) {
      case FormatErrorKind::BadMagic:
        return "magic";
      case FormatErrorKind::BadVersion:
        return "version";
      case FormatErrorKind::Truncated:
        return "truncated";
      case FormatErrorKind::Corrupt:
        return "corrupt";
      case FormatErrorKind::Io:
        return "io";
    }
  } catch (...) {
    return "untyped";
  }
  return "none";
}

template <typename Write, typename Read>
bool round_trip_and_errors(const std::string& bytes, Write write, Read read, std::string& detail, const char* name) {
  std::istringstream in(bytes);
  std::ostringstream again;
  write(again, read(in));
  bool ok = again.str() == bytes;
  std::string bad = bytes;
  bad[0] ^= 0x20;
  ok = ok && error_kind(bad, read) == "magic";
  bad = bytes;
  bad[4] = 99;
  ok = ok && error_kind(bad, read) == "version";
  ok = ok && error_kind(bytes.substr(0, 2), read) == "truncated";
  ok = ok && error_kind(bytes.substr(0, bytes.size() - 3), read) == "truncated";
  detail += std::string(detail.back() == ':' ? " " : ", ") + name + (ok ? " ok" : " FAILED");
  return ok;
}

Outcome formats() {
  std::string detail;
  bool pass = true;
  for (std::uint64_t seed : {1u, 2u}) {
    const scene::SyntheticScene s = scene::generate_scene(seed, seed == 1 ? Preset::Micro : Preset::Toy);
    detail += std::string(detail.empty() ? "" : "; ") + (seed == 1 ? "micro:" : "toy:");
    std::ostringstream out;
    scene::write_scene(out, s);
    pass = round_trip_and_errors(out.str(), scene::write_scene, scene::read_scene, detail, "scene") && pass;
    std::istringstream in(out.str());
    pass = pass && scene::read_scene(in) == s;

    std::ostringstream g;
    geo::write_grid(g, s.labels);
    pass = round_trip_and_errors(g.str(), geo::write_grid, geo::read_grid, detail, "grid") && pass;

    ParameterStore store(seed);
    {
      Tape t;
      ParamBinder b(t, store, false);
      train::TrainConfig cfg;
      cfg.preset = seed == 1 ? Preset::Micro : Preset::Toy;
      cfg.toggles = pipe::Toggles::parse("aux,icca");
      Rng noise(0);
      train::student_step_loss(b, nullptr, s, cfg, noise);
    }
    std::ostringstream ck;
    write_checkpoint(ck, store);
    pass = round_trip_and_errors(ck.str(), write_checkpoint, read_checkpoint, detail, "checkpoint") && pass;
  }
  return {pass, detail};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradient suite", gradients},
      {"attention oracles", attention_oracles},
      {"geometry oracles", geometry},
      {"loss identities", loss_identities},
      {"overfit", overfit},
      {"directional ablation", ablation},
      {"determinism", determinism},
      {"identity at init", identity_at_init},
      {"format round trips", formats},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("criterion %d %s: %s: %s\n", id, o.pass ? "PASS" : "FAIL", criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  return failures;
}
