#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "occforge/params.hpp"

namespace occ::ad {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Moment buffers are created per parameter path on
/// first update; parameters without a gradient entry are left untouched.
class Adam {
 public:
  explicit Adam(AdamOptions options);

  void step(ParameterStore& store, const std::map<std::string, Tensor>& grads);

  std::uint64_t steps() const { return step_; }
  const AdamOptions& options() const { return options_; }
  void set_lr(double lr) { options_.lr = lr; }

  struct Moments {
    Tensor m, v;
  };
  const std::map<std::string, Moments>& state() const { return state_; }

 private:
  AdamOptions options_;
  std::uint64_t step_ = 0;
  std::map<std::string, Moments> state_;
};

}  // namespace occ::ad
