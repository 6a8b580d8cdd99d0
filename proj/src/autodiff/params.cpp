#include "occforge/params.hpp"

#include <cmath>

#include "occforge/errors.hpp"
#include "occforge/rng.hpp"

namespace occ::ad {

Tensor initial_value(const std::string& path, const Shape& shape, const Init& init, std::uint64_t seed) {
  Tensor t(shape, 0.0);
  switch (init.kind) {
    case InitKind::Zeros:
      break;
    case InitKind::Constant:
      t.fill(init.value);
      break;
    case InitKind::KaimingUniform:
    case InitKind::Uniform: {
      const double bound = init.kind == InitKind::Uniform
                               ? init.value
                               : std::sqrt(3.0 / static_cast<double>(std::max<std::size_t>(init.fan_in, 1)));
      Rng rng(stable_hash(path) ^ splitmix64(seed));
      for (double& v : t.values()) v = rng.uniform(-bound, bound);
      break;
    }
  }
  return t;
}

Tensor& ParameterStore::get_or_create(const std::string& path, const Shape& shape, const Init& init) {
  auto it = params_.find(path);
  if (it == params_.end()) {
    it = params_.emplace(path, initial_value(path, shape, init, seed_)).first;
  } else if (it->second.shape() != shape) {
    throw ShapeError("parameter '" + path + "' has shape " + shape_str(it->second.shape()) + ", requested " +
                     shape_str(shape));
  }
  return it->second;
}

Tensor& ParameterStore::at(const std::string& path) {
  auto it = params_.find(path);
  if (it == params_.end()) throw Error("unknown parameter '" + path + "'");
  return it->second;
}

const Tensor& ParameterStore::at(const std::string& path) const {
  auto it = params_.find(path);
  if (it == params_.end()) throw Error("unknown parameter '" + path + "'");
  return it->second;
}

void ParameterStore::set(const std::string& path, Tensor value) { params_[path] = std::move(value); }

std::size_t ParameterStore::element_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params_) n += t.numel();
  return n;
}

Var ParamBinder::operator()(const std::string& path, const Shape& shape, const Init& init) {
  if (auto it = bound_.find(path); it != bound_.end()) {
    if (it->second.shape() != shape) throw ShapeError("parameter '" + path + "' bound with a different shape");
    return it->second;
  }
  const Tensor& value = store_->get_or_create(path, shape, init);
  Var v = tape_->leaf(value, trainable_);
  bound_.emplace(path, v);
  return v;
}

const Tensor& ParamBinder::raw(const std::string& path, const Shape& shape, const Init& init) {
  return store_->get_or_create(path, shape, init);
}

std::map<std::string, Tensor> ParamBinder::gradients() const {
  std::map<std::string, Tensor> out;
  for (const auto& [path, v] : bound_) out.emplace(path, v.grad());
  return out;
}

}  // namespace occ::ad
