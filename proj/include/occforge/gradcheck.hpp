#pragma once

#include <functional>
#include <string>
#include <vector>

#include "occforge/params.hpp"

namespace occ::ad {

struct GradCheckEntry {
  std::string path;
  double max_error = 0.0;
  std::size_t checked = 0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;

  bool passed() const;
  double max_error() const;
};

struct GradCheckOptions {
  double step = 1e-5;
  double tol = 1e-4;
  /// Below this magnitude the error is absolute rather than relative.
  double abs_floor = 1e-3;
  /// Upper bound on elements probed per parameter (0 = all), chosen by a fixed stride.
  std::size_t max_elements = 0;
};

/// The scalar function under test. It is evaluated repeatedly on fresh tapes
/// and must be deterministic in the store contents.
using ScalarFn = std::function<Var(ParamBinder&)>;

/// Error per element: |a - n| / max(|a|, |n|) when max(|a|, |n|) >= abs_floor,
/// otherwise |a - n|.
double gradient_error(double analytic, double numeric, double abs_floor);

/// Compares tape gradients against central finite differences for every
/// parameter the function reads. The store is restored before returning.
GradCheckReport grad_check(const ScalarFn& f, ParameterStore& store, const GradCheckOptions& options = {});

}  // namespace occ::ad
