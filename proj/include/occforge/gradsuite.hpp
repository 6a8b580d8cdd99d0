#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "occforge/gradcheck.hpp"
#include "occforge/presets.hpp"

namespace occ::verify {

struct SuiteCase {
  std::string name;
  ad::GradCheckReport report;
};

/// Central-difference checks of every differentiable op on small random inputs,
/// then the end-to-end student loss (all toggles) and teacher loss on one
/// synthetic scene of `preset` with randomized parameters.
std::vector<SuiteCase> gradient_suite(Preset preset, std::uint64_t seed, const ad::GradCheckOptions& options = {});

bool suite_passed(const std::vector<SuiteCase>& cases);

}  // namespace occ::verify
