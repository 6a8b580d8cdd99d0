#include "occforge/gradsuite.hpp"

#include <algorithm>
#include <functional>
#include <map>

#include "occforge/ops.hpp"
#include "occforge/train.hpp"

namespace occ::verify {

namespace {

using namespace occ::ad;

Tensor random_tensor(const Shape& shape, Rng& rng, double lo, double hi) {
  Tensor t(shape);
  for (double& x : t.values()) x = rng.uniform(lo, hi);
  return t;
}

// Weighted sum with fixed random weights so every output entry gets its own gradient.
Var probe(ParamBinder& p, Var out, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(out, p.tape().constant(random_tensor(out.shape(), rng, -1.0, 1.0))));
}

void randomize(ParameterStore& store, Rng& rng) {
  for (auto& [path, value] : store.entries()) {
    if (path.find("corrector") != std::string::npos) continue;  // keeps the query set stable
    const bool offset_scale = path.ends_with("offset_scale");
    for (double& x : value.values()) x = offset_scale ? rng.uniform(0.05, 0.3) : rng.uniform(-0.3, 0.3);
  }
}

struct OpCase {
  std::string name;
  std::function<Var(ParamBinder&)> fn;
  std::map<std::string, std::pair<Shape, std::pair<double, double>>> inputs;  // preset input ranges
};

std::vector<OpCase> op_cases(std::uint64_t seed) {
  const Init u = Init::uniform(1.0);
  const auto pr = [seed](ParamBinder& p, Var v) { return probe(p, v, seed); };
  static const std::vector<std::size_t> idx{3, 0, 3, 1}, uniq{4, 0, 2};
  static const std::vector<std::uint8_t> keep{1, 0, 1, 1, 0}, labels{0, 2, 255, 1, 2, 0};
  std::vector<OpCase> c;
  const auto add_case = [&](std::string name, std::function<Var(ParamBinder&)> fn) {
    c.push_back({std::move(name), std::move(fn), {}});
  };
  add_case("add", [=](ParamBinder& p) { return pr(p, add(p("a", {2, 3}, u), p("b", {2, 3}, u))); });
  add_case("sub", [=](ParamBinder& p) { return pr(p, sub(p("a", {2, 3}, u), p("b", {2, 3}, u))); });
  add_case("mul", [=](ParamBinder& p) { return pr(p, mul(p("a", {2, 3}, u), p("b", {2, 3}, u))); });
  add_case("scale", [=](ParamBinder& p) { return pr(p, scale(p("a", {4}, u), -2.5)); });
  add_case("silu", [=](ParamBinder& p) { return pr(p, silu(scale(p("a", {6}, u), 3.0))); });
  add_case("sigmoid", [=](ParamBinder& p) { return pr(p, sigmoid(scale(p("a", {6}, u), 3.0))); });
  add_case("log", [=](ParamBinder& p) { return pr(p, log(sigmoid(p("a", {5}, u)))); });
  add_case("sum,mean", [=](ParamBinder& p) { return mul(sum(p("a", {3, 2}, u)), mean(p("b", {4}, u))); });
  add_case("reshape", [=](ParamBinder& p) { return pr(p, reshape(p("a", {2, 6}, u), {3, 4})); });
  add_case("transpose", [=](ParamBinder& p) { return pr(p, transpose(p("a", {2, 5}, u))); });
  add_case("matmul", [=](ParamBinder& p) { return pr(p, matmul(p("a", {3, 4}, u), p("b", {4, 2}, u))); });
  add_case("linear", [=](ParamBinder& p) { return pr(p, linear(p("x", {5, 3}, u), p("w", {3, 4}, u), p("b", {4}, u))); });
  add_case("mul_cols", [=](ParamBinder& p) { return pr(p, mul_cols(p("x", {3, 4}, u), p("v", {4}, u))); });
  add_case("repeat_each", [=](ParamBinder& p) { return pr(p, repeat_each(p("v", {3}, u), 4)); });
  add_case("broadcast_rows", [=](ParamBinder& p) { return pr(p, broadcast_rows(p("v", {3}, u), 4)); });
  for (std::size_t axis = 0; axis < 3; ++axis) {
    const std::string a = std::to_string(axis);
    add_case("softmax/" + a, [=](ParamBinder& p) { return pr(p, softmax(scale(p("a", {2, 3, 4}, u), 2.0), axis)); });
    add_case("log_softmax/" + a,
             [=](ParamBinder& p) { return pr(p, log_softmax(scale(p("a", {2, 3, 4}, u), 2.0), axis)); });
  }
  add_case("gather_rows", [=](ParamBinder& p) { return pr(p, gather_rows(p("x", {5, 3}, u), idx)); });
  add_case("scatter_rows",
           [=](ParamBinder& p) { return pr(p, scatter_rows(p("x", {5, 3}, u), uniq, p("r", {3, 3}, u))); });
  add_case("scatter_add_rows",
           [=](ParamBinder& p) { return pr(p, scatter_add_rows(p("x", {5, 3}, u), idx, p("r", {4, 3}, u))); });
  add_case("mask_rows", [=](ParamBinder& p) { return pr(p, mask_rows(p("x", {5, 3}, u), keep)); });
  for (std::size_t stride : {1u, 2u})
    for (std::size_t pad : {0u, 1u})
      add_case("conv2d/s" + std::to_string(stride) + "p" + std::to_string(pad), [=](ParamBinder& p) {
        return pr(p, conv2d(p("x", {2, 5, 6}, u), p("w", {3, 2, 3, 3}, u), p("b", {3}, u), stride, pad));
      });
  c.push_back({"bilinear_sample",
               [=](ParamBinder& p) { return pr(p, bilinear_sample(p("f", {3, 4, 5}, u), p("pts", {6, 2}, u))); },
               {{"pts", {{6, 2}, {0.05, 0.95}}}}});
  c.push_back({"deform_sample_2d",
               [=](ParamBinder& p) {
                 return pr(p, deform_sample_2d(p("v", {4, 5, 6}, u), p("loc", {4, 12}, u), p("w", {4, 6}, u), 2, 3));
               },
               {{"loc", {{4, 12}, {0.05, 0.95}}}}});
  c.push_back({"deform_sample_3d",
               [=](ParamBinder& p) {
                 return pr(p, deform_sample_3d(p("v", {3, 4, 2, 4}, u), p("loc", {4, 12}, u), p("w", {4, 4}, u), 2, 2));
               },
               {{"loc", {{4, 12}, {0.05, 0.95}}}}});
  add_case("upsample_nearest3d", [=](ParamBinder& p) { return pr(p, upsample_nearest3d(p("v", {2, 1, 2, 3}, u), 2)); });
  for (std::size_t axis : {0u, 1u})
    add_case("cross_entropy/" + std::to_string(axis), [=](ParamBinder& p) {
      const Shape s = axis == 0 ? Shape{3, 6} : Shape{6, 3};
      return cross_entropy(scale(p("l", s, u), 2.0), labels, axis);
    });
  add_case("scal_loss/semantic", [=](ParamBinder& p) {
    return scal_loss(softmax(scale(p("l", {6, 3}, u), 2.0), 1), labels, ScalKind::Semantic);
  });
  add_case("scal_loss/geometric", [=](ParamBinder& p) {
    return scal_loss(softmax(scale(p("l", {6, 3}, u), 2.0), 1), labels, ScalKind::Geometric);
  });
  add_case("kl_softmax", [=](ParamBinder& p) {
    Rng rng(seed + 1);
    return kl_softmax(p.tape().constant(random_tensor({4, 3}, rng, -1.0, 1.0)), p("s", {4, 3}, u));
  });
  add_case("weighted_sum", [=](ParamBinder& p) {
    const std::vector<Var> terms{sum(p("a", {2}, u)), mean(p("b", {3}, u))};
    const std::vector<double> k{1.5, 0.25};
    return weighted_sum(terms, k);
  });
  return c;
}

}  // namespace

std::vector<SuiteCase> gradient_suite(Preset preset, std::uint64_t seed, const GradCheckOptions& options) {
  std::vector<SuiteCase> out;
  Rng rng(seed);
  for (const OpCase& c : op_cases(seed)) {
    ParameterStore store(seed);
    for (const auto& [path, spec] : c.inputs)
      store.set(path, random_tensor(spec.first, rng, spec.second.first, spec.second.second));
    out.push_back({c.name, grad_check(c.fn, store, options)});
  }

  // End to end on one synthetic scene.
  const scene::SyntheticScene s = scene::generate_scene(seed, preset);
  train::TrainConfig cfg;
  cfg.preset = preset;
  cfg.toggles = pipe::Toggles::parse("all");
  ParameterStore store(seed);
  {
    Tape tape;
    ParamBinder b(tape, store, false);
    Rng noise(0);
    train::teacher_step_loss(b, s, cfg);
    train::TrainConfig no_distill = cfg;
    no_distill.toggles.distill = false;
    train::student_step_loss(b, nullptr, s, no_distill, noise);
  }
  randomize(store, rng);
  const std::vector<scene::SyntheticScene> one{s};
  const std::vector<Tensor> target = train::teacher_targets(store, cfg, one);
  const ScalarFn student = [&](ParamBinder& b) {
    Rng noise(0);
    return train::student_step_loss(b, &target[0], s, cfg, noise).total;
  };
  const ScalarFn teacher = [&](ParamBinder& b) { return train::teacher_step_loss(b, s, cfg).total; };
  GradCheckOptions e2e = options;
  if (e2e.max_elements == 0) e2e.max_elements = 6;
  out.push_back({"student end-to-end", grad_check(student, store, e2e)});
  out.push_back({"teacher end-to-end", grad_check(teacher, store, e2e)});
  return out;
}

bool suite_passed(const std::vector<SuiteCase>& cases) {
  return std::all_of(cases.begin(), cases.end(), [](const SuiteCase& c) { return c.report.passed(); });
}

}  // namespace occ::verify
