#include "occforge/optim.hpp"

#include <cmath>

#include "occforge/errors.hpp"

namespace occ::ad {

Adam::Adam(AdamOptions options) : options_(options) {
  if (!(options_.lr > 0.0)) throw ConfigError("Adam: learning rate must be positive");
  if (!(options_.beta1 >= 0.0 && options_.beta1 < 1.0 && options_.beta2 >= 0.0 && options_.beta2 < 1.0)) {
    throw ConfigError("Adam: betas must lie in [0, 1)");
  }
  if (!(options_.eps > 0.0)) throw ConfigError("Adam: eps must be positive");
}

void Adam::step(ParameterStore& store, const std::map<std::string, Tensor>& grads) {
  ++step_;
  const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(step_));
  for (const auto& [path, g] : grads) {
    Tensor& p = store.at(path);
    if (g.shape() != p.shape()) throw ShapeError("Adam: gradient shape mismatch for '" + path + "'");
    auto it = state_.find(path);
    if (it == state_.end()) it = state_.emplace(path, Moments{Tensor(p.shape()), Tensor(p.shape())}).first;
    Moments& mo = it->second;
    if (mo.m.shape() != p.shape()) throw ShapeError("Adam: moment shape mismatch for '" + path + "'");
    for (std::size_t i = 0; i < p.numel(); ++i) {
      mo.m[i] = options_.beta1 * mo.m[i] + (1.0 - options_.beta1) * g[i];
      mo.v[i] = options_.beta2 * mo.v[i] + (1.0 - options_.beta2) * g[i] * g[i];
      const double mhat = mo.m[i] / bc1;
      const double vhat = mo.v[i] / bc2;
      p[i] -= options_.lr * mhat / (std::sqrt(vhat) + options_.eps);
    }
  }
}

}  // namespace occ::ad
