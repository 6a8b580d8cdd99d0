#include "occforge/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "occforge/errors.hpp"

namespace occ::ad {

bool GradCheckReport::passed() const {
  return std::all_of(entries.begin(), entries.end(), [](const GradCheckEntry& e) { return e.passed; });
}

double GradCheckReport::max_error() const {
  double m = 0.0;
  for (const auto& e : entries) m = std::max(m, e.max_error);
  return m;
}

double gradient_error(double analytic, double numeric, double abs_floor) {
  const double diff = std::abs(analytic - numeric);
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  return scale >= abs_floor ? diff / scale : diff;
}

namespace {

double evaluate(const ScalarFn& f, ParameterStore& store) {
  Tape tape;
  ParamBinder binder(tape, store, false);
  return f(binder).item();
}

}  // namespace

GradCheckReport grad_check(const ScalarFn& f, ParameterStore& store, const GradCheckOptions& options) {
  if (!(options.step > 0.0)) throw ConfigError("grad_check: step must be positive");

  std::map<std::string, Tensor> analytic;
  {
    Tape tape;
    ParamBinder binder(tape, store, true);
    Var out = f(binder);
    backward(out);
    analytic = binder.gradients();
  }

  GradCheckReport report;
  for (const auto& [path, grad] : analytic) {
    GradCheckEntry entry;
    entry.path = path;
    Tensor& param = store.at(path);
    const std::size_t n = param.numel();
    const std::size_t stride =
        options.max_elements == 0 || n <= options.max_elements ? 1 : (n + options.max_elements - 1) / options.max_elements;
    for (std::size_t i = 0; i < n; i += stride) {
      const double saved = param[i];
      param[i] = saved + options.step;
      const double up = evaluate(f, store);
      param[i] = saved - options.step;
      const double down = evaluate(f, store);
      param[i] = saved;
      const double numeric = (up - down) / (2.0 * options.step);
      entry.max_error = std::max(entry.max_error, gradient_error(grad[i], numeric, options.abs_floor));
      ++entry.checked;
    }
    entry.passed = entry.max_error < options.tol;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace occ::ad
