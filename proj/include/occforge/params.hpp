#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "occforge/tape.hpp"
#include "occforge/tensor.hpp"

namespace occ::ad {

enum class InitKind {
  KaimingUniform,  // U(-b, b), b = sqrt(3 / fan_in)
  Zeros,
  Constant,
  Uniform,  // U(-value, value)
};

struct Init {
  InitKind kind = InitKind::Zeros;
  double value = 0.0;
  std::size_t fan_in = 1;

  static Init kaiming(std::size_t fan_in) { return {InitKind::KaimingUniform, 0.0, fan_in}; }
  static Init zeros() { return {InitKind::Zeros, 0.0, 1}; }
  static Init constant(double v) { return {InitKind::Constant, v, 1}; }
  static Init uniform(double bound) { return {InitKind::Uniform, bound, 1}; }
};

/// Deterministic initial value: a pure function of (path, shape, init, seed).
Tensor initial_value(const std::string& path, const Shape& shape, const Init& init, std::uint64_t seed);

/// Named parameters keyed by slash-separated path. Iteration order is lexicographic.
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t seed = 0) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }

  /// Returns the stored tensor, creating it from `init` on first use.
  /// Throws ShapeError when an existing entry has a different shape.
  Tensor& get_or_create(const std::string& path, const Shape& shape, const Init& init);

  bool contains(const std::string& path) const { return params_.count(path) != 0; }
  Tensor& at(const std::string& path);
  const Tensor& at(const std::string& path) const;
  void set(const std::string& path, Tensor value);

  std::map<std::string, Tensor>& entries() { return params_; }
  const std::map<std::string, Tensor>& entries() const { return params_; }
  std::size_t size() const { return params_.size(); }
  std::size_t element_count() const;

  friend bool operator==(const ParameterStore& a, const ParameterStore& b) { return a.params_ == b.params_; }

 private:
  std::uint64_t seed_;
  std::map<std::string, Tensor> params_;
};

/// Binds store entries to tape leaves for one forward pass.
/// A frozen binder registers constants, so no gradient reaches the store.
class ParamBinder {
 public:
  ParamBinder(Tape& tape, ParameterStore& store, bool trainable = true)
      : tape_(&tape), store_(&store), trainable_(trainable) {}

  Var operator()(const std::string& path, const Shape& shape, const Init& init);

  /// Read-only access to a parameter used outside the differentiable graph.
  const Tensor& raw(const std::string& path, const Shape& shape, const Init& init);

  Tape& tape() { return *tape_; }
  ParameterStore& store() { return *store_; }
  bool trainable() const { return trainable_; }

  /// Gradients of every bound parameter after backward().
  std::map<std::string, Tensor> gradients() const;

 private:
  Tape* tape_;
  ParameterStore* store_;
  bool trainable_;
  std::map<std::string, Var> bound_;
};

}  // namespace occ::ad
