#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "occforge/checkpoint.hpp"
#include "occforge/errors.hpp"
#include "occforge/metrics.hpp"
#include "occforge/train.hpp"

using namespace occ;
using namespace occ::eval;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("occforge_test_eval_" + name);
}

// Per-class IoU straight from the label lists.
double miou_oracle(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt, std::size_t classes) {
  double sum = 0.0;
  int present = 0;
  for (std::size_t k = 1; k < classes; ++k) {
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (gt[i] == 255) continue;
      const bool g = gt[i] == k, p = pred[i] == k;
      inter += g && p;
      uni += g || p;
    }
    if (uni == 0) continue;
    sum += static_cast<double>(inter) / static_cast<double>(uni);
    ++present;
  }
  return present ? sum / present : 0.0;
}

std::string read_all(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string checkpoint_bytes(const ad::ParameterStore& store) {
  std::ostringstream out;
  ad::write_checkpoint(out, store);
  return out.str();
}

train::TrainConfig micro_config() {
  train::TrainConfig cfg;
  cfg.preset = Preset::Micro;
  cfg.lr = 1e-2;
  cfg.epochs = 2;
  cfg.seed = 5;
  cfg.depth_noise = 0.05;
  return cfg;
}

std::vector<scene::SyntheticScene> micro_scenes(std::size_t n, std::uint64_t first) {
  std::vector<scene::SyntheticScene> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(scene::generate_scene(first + i, Preset::Micro));
  return out;
}

}  // namespace

TEST_CASE("mIoU on a hand example") {
  const std::vector<std::uint8_t> gt{1, 1, 2, 255}, pred{1, 2, 2, 2};
  const MiouResult r = compute_miou(pred, gt, 3);
  CHECK(r.miou == doctest::Approx(0.5).epsilon(1e-15));
  CHECK_FALSE(r.iou[0].has_value());
  CHECK(*r.iou[1] == 0.5);
  CHECK(*r.iou[2] == 0.5);
  CHECK(r.occupancy_iou == 1.0);
}

TEST_CASE("mIoU extremes") {
  const std::vector<std::uint8_t> gt{0, 1, 2, 3, 3, 0, 255};
  CHECK(compute_miou(gt, gt, 4).miou == 1.0);
  const std::vector<std::uint8_t> free(gt.size(), 0);
  CHECK(compute_miou(free, gt, 4).miou == 0.0);
  CHECK(compute_miou(free, gt, 4).occupancy_iou == 0.0);
  // Nothing semantic anywhere.
  const std::vector<std::uint8_t> empty{0, 0, 255};
  CHECK(compute_miou(empty, empty, 4).miou == 0.0);
}

TEST_CASE("mIoU matches the oracle and is permutation invariant") {
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = static_cast<std::size_t>(rng.integer(1, 200)), classes = 5;
    std::vector<std::uint8_t> gt(n), pred(n);
    for (std::size_t i = 0; i < n; ++i) {
      gt[i] = rng.bernoulli(0.1) ? 255 : static_cast<std::uint8_t>(rng.integer(0, 4));
      pred[i] = static_cast<std::uint8_t>(rng.integer(0, 4));
    }
    const MiouResult r = compute_miou(pred, gt, classes);
    CHECK(r.miou == doctest::Approx(miou_oracle(pred, gt, classes)).epsilon(1e-12));

    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = n; i > 1; --i)
      std::swap(perm[i - 1], perm[static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(i) - 1))]);
    std::vector<std::uint8_t> gp(n), pp(n);
    for (std::size_t i = 0; i < n; ++i) {
      gp[i] = gt[perm[i]];
      pp[i] = pred[perm[i]];
    }
    CHECK(compute_miou(pp, gp, classes).miou == doctest::Approx(r.miou).epsilon(1e-15));

    ConfusionMatrix cm(classes);
    cm.add(pred, gt);
    CHECK(cm.total() + cm.ignored == n);
    ConfusionMatrix halves(classes), second(classes);
    halves.add(std::span(pred).first(n / 2), std::span(gt).first(n / 2));
    second.add(std::span(pred).subspan(n / 2), std::span(gt).subspan(n / 2));
    halves.merge(second);
    CHECK(halves.counts == cm.counts);
    CHECK(halves.ignored == cm.ignored);
  }
}

TEST_CASE("confusion rejects bad input") {
  ConfusionMatrix cm(3);
  const std::vector<std::uint8_t> a{0, 1}, b{0};
  CHECK_THROWS_AS(cm.add(a, b), ShapeError);
  const std::vector<std::uint8_t> out{7, 1};
  CHECK_THROWS_AS(cm.add(out, a), Error);
  CHECK_THROWS_AS(cm.merge(ConfusionMatrix(4)), ShapeError);
}

TEST_CASE("PLY export counts") {
  const auto header_count = [](const std::string& text, const std::string& key) {
    const auto at = text.find(key);
    REQUIRE(at != std::string::npos);
    return std::stoul(text.substr(at + key.size()));
  };
  const auto path = temp_path("grid.ply");
  Rng rng(4);
  for (int trial = 0; trial < 6; ++trial) {
    geo::LabelGrid grid(geo::micro_grid(), 0);
    std::size_t occupied = 0;
    if (trial == 1) {
      grid.at({3, 2, 1}) = 5;
      occupied = 1;
    } else if (trial > 1) {
      for (auto& l : grid.labels) {
        const double u = rng.uniform();
        l = u < 0.3 ? static_cast<std::uint8_t>(rng.integer(1, 19)) : (u < 0.4 ? 255 : 0);
        occupied += l != 0 && l != 255;
      }
    }
    export_ply(grid, path);
    const std::string text = read_all(path);
    CHECK(text.rfind("ply\nformat ascii 1.0\n", 0) == 0);
    CHECK(header_count(text, "element vertex ") == 8 * occupied);
    CHECK(header_count(text, "element face ") == 12 * occupied);
    const std::string body = text.substr(text.find("end_header\n") + 11);
    CHECK(static_cast<std::size_t>(std::count(body.begin(), body.end(), '\n')) == 20 * occupied);
    if (trial == 1) {
      // Voxel (3,2,1) spans [2.4,3.2] x [-1.6,-0.8] x [-0.4,0.4].
      std::istringstream in(body);
      double x, y, z;
      in >> x >> y >> z;
      CHECK(x == doctest::Approx(2.4));
      CHECK(y == doctest::Approx(-1.6));
      CHECK(z == doctest::Approx(-0.4));
    }
  }
  std::filesystem::remove(path);
  CHECK_THROWS_AS(export_ply(geo::LabelGrid(geo::micro_grid(), 0), "/nonexistent/dir/x.ply"), FormatError);
}

TEST_CASE("modes and config validation") {
  CHECK(train::parse_mode("student") == train::Mode::Student);
  CHECK(train::parse_mode("teacher") == train::Mode::Teacher);
  CHECK(train::parse_mode("distill") == train::Mode::Distill);
  CHECK(std::string(train::to_string(train::Mode::Distill)) == "distill");
  CHECK_THROWS_AS(train::parse_mode("both"), ConfigError);
  train::TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.lr = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.lr = 1e-3;
  cfg.epochs = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.epochs = 1;
  cfg.weights.ssc = -1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("ablation statistics and tables") {
  auto rows = train::ablation_rows();
  REQUIRE(rows.size() == 5);
  CHECK(rows.front().toggles.str() == "none");
  CHECK(rows.back().toggles.str() == "aux,icca,distill");
  rows[0].miou = {0.1, 0.2, 0.3};
  train::summarize(rows[0]);
  CHECK(rows[0].mean == doctest::Approx(0.2).epsilon(1e-15));
  CHECK(rows[0].sd == doctest::Approx(0.1).epsilon(1e-12));
  rows[1].miou = {0.4};
  train::summarize(rows[1]);
  CHECK(rows[1].sd == 0.0);
  const std::string csv = train::ablation_csv(rows);
  CHECK(csv.rfind("row,toggles,seed_index,miou\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
  const std::string md = train::ablation_markdown(rows);
  CHECK(md.find("| baseline | none | 20.00 ± 10.00 |") != std::string::npos);
}

TEST_CASE("training is deterministic and lowers the loss") {
  const auto scenes = micro_scenes(2, 40);
  train::TrainConfig cfg = micro_config();
  cfg.toggles = pipe::Toggles::parse("aux,icca");

  const auto run = [&](std::vector<double>& curve) {
    ad::ParameterStore store(cfg.seed);
    train::train_model(store, cfg, scenes, [&](std::string_view, std::size_t, const loss::LossBreakdown& b) {
      curve.push_back(b.total.item());
    });
    return store;
  };
  std::vector<double> c1, c2;
  const auto s1 = run(c1), s2 = run(c2);
  REQUIRE(c1.size() == 4);
  CHECK(c1 == c2);
  CHECK(checkpoint_bytes(s1) == checkpoint_bytes(s2));

  cfg.epochs = 25;
  std::vector<double> longer;
  run(longer);
  CHECK(longer.back() < 0.5 * longer.front());

  cfg.seed = 6;
  std::vector<double> other;
  run(other);
  CHECK(other != longer);
}

TEST_CASE("distillation needs a teacher") {
  const auto scenes = micro_scenes(1, 50);
  train::TrainConfig cfg = micro_config();
  cfg.toggles = pipe::Toggles::parse("distill");
  ad::ParameterStore store(cfg.seed);
  CHECK_THROWS_AS(train::train_model(store, cfg, scenes), ConfigError);

  cfg.mode = train::Mode::Distill;
  cfg.toggles = pipe::Toggles::parse("aux,icca");
  cfg.epochs = 1;
  std::vector<std::string> phases;
  train::train_model(store, cfg, scenes,
                     [&](std::string_view phase, std::size_t, const loss::LossBreakdown& b) {
                       phases.emplace_back(phase);
                       CHECK(std::isfinite(b.total.item()));
                       if (phase == "student") CHECK(b.distill.item() >= 0.0);
                     });
  CHECK(phases == std::vector<std::string>{"teacher", "student"});
  CHECK(store.contains("teacher/query_embed"));
  CHECK(store.contains("student/query_embed"));
  CHECK(train::teacher_targets(store, cfg, scenes).size() == 1);
}

TEST_CASE("step losses follow the toggles") {
  const auto scenes = micro_scenes(1, 60);
  train::TrainConfig cfg = micro_config();
  ad::ParameterStore store(cfg.seed);
  Rng noise(1);
  {
    ad::Tape tape;
    ad::ParamBinder b(tape, store, true);
    const auto l = train::student_step_loss(b, nullptr, scenes[0], cfg, noise);
    CHECK(l.sem.item() == 0.0);
    CHECK(l.distill.item() == 0.0);
    CHECK(l.ssc.item() > 0.0);
    const double expect = cfg.weights.ssc * l.ssc.item() + cfg.weights.scal_sem * l.scal_sem.item() +
                          cfg.weights.scal_geo * l.scal_geo.item();
    CHECK(l.total.item() == expect);
  }
  {
    cfg.toggles = pipe::Toggles::parse("aux");
    ad::Tape tape;
    ad::ParamBinder b(tape, store, true);
    CHECK(train::student_step_loss(b, nullptr, scenes[0], cfg, noise).sem.item() > 0.0);
  }
  {
    cfg.toggles = pipe::Toggles::parse("distill");
    ad::Tape tape;
    ad::ParamBinder b(tape, store, true);
    CHECK_THROWS_AS(train::student_step_loss(b, nullptr, scenes[0], cfg, noise), ConfigError);
  }
  {
    train::TrainConfig toy = cfg;
    toy.preset = Preset::Toy;
    ad::Tape tape;
    ad::ParamBinder b(tape, store, true);
    CHECK_THROWS_AS(train::teacher_step_loss(b, scenes[0], toy), ConfigError);
  }
}

TEST_CASE("ablation is reproducible") {
  const auto train_scenes = micro_scenes(2, 70), val = micro_scenes(2, 80);
  train::AblationConfig cfg;
  cfg.base = micro_config();
  cfg.base.epochs = 1;
  cfg.seeds = {3};
  std::vector<std::string> log;
  const auto a = train::run_ablation(cfg, train_scenes, val, [&](const std::string& s) { log.push_back(s); });
  const auto b = train::run_ablation(cfg, train_scenes, val);
  CHECK(log.size() == 5);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].miou == b[i].miou);
    CHECK(a[i].miou.size() == 1);
    CHECK(a[i].miou[0] >= 0.0);
    CHECK(a[i].miou[0] <= 1.0);
  }
  cfg.seeds.clear();
  CHECK_THROWS_AS(train::run_ablation(cfg, train_scenes, val), ConfigError);
}
