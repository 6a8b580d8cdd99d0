#include "occforge/losses.hpp"

#include <cmath>
#include <cstdio>

#include "occforge/errors.hpp"

namespace occ::loss {

void LossWeights::validate() const {
  const char* names[] = {"lambda1", "lambda2", "lambda3", "lambda4", "lambda5"};
  const auto w = as_array();
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (!std::isfinite(w[i]) || w[i] < 0.0) {
      throw ConfigError(std::string(names[i]) + " must be a nonnegative number, got " + std::to_string(w[i]));
    }
  }
}

std::array<double, 6> LossBreakdown::values() const {
  return {sem.item(), distill.item(), ssc.item(), scal_sem.item(), scal_geo.item(), total.item()};
}

Var semantic_aux_loss(const pipe::SemanticMap2D& pred, std::span<const std::uint8_t> sparse_gt) {
  const Shape& s = pred.logits.shape();
  if (s.size() != 3 || sparse_gt.size() != s[1] * s[2]) {
    throw ShapeError("semantic_aux_loss: " + std::to_string(sparse_gt.size()) + " labels for logits " + shape_str(s));
  }
  return ad::cross_entropy(pred.logits, sparse_gt, 0);
}

Var ssc_loss(const pipe::SemanticVoxelMap& pred, std::span<const std::uint8_t> gt) {
  const Shape& s = pred.logits.shape();
  if (s.size() != 4 || gt.size() != s[0] * s[1] * s[2]) {
    throw ShapeError("ssc_loss: " + std::to_string(gt.size()) + " labels for logits " + shape_str(s));
  }
  return ad::cross_entropy(pred.logits, gt, 3);
}

ScalTerms scal_losses(const pipe::SemanticVoxelMap& pred, std::span<const std::uint8_t> gt) {
  const Shape& s = pred.logits.shape();
  if (s.size() != 4 || gt.size() != s[0] * s[1] * s[2]) {
    throw ShapeError("scal_losses: " + std::to_string(gt.size()) + " labels for logits " + shape_str(s));
  }
  Var probs = ad::softmax(ad::reshape(pred.logits, {gt.size(), s[3]}), 1);
  return {ad::scal_loss(probs, gt, ad::ScalKind::Semantic), ad::scal_loss(probs, gt, ad::ScalKind::Geometric)};
}

Var distill_loss(const pipe::VoxelFeatureVolume& teacher, const pipe::VoxelFeatureVolume& student) {
  const Shape& s = student.tensor.shape();
  if (teacher.tensor.shape() != s) {
    throw ShapeError("distill_loss: teacher " + shape_str(teacher.tensor.shape()) + " vs student " + shape_str(s));
  }
  if (s.empty()) throw ShapeError("distill_loss: rank-0 volume");
  ad::Tape& tape = *student.tensor.tape;
  Var t = teacher.tensor.tape == &tape ? teacher.tensor : tape.constant(teacher.tensor.value());
  const std::size_t d = s.back(), n = student.tensor.value().numel() / d;
  return ad::kl_softmax(ad::reshape(t, {n, d}), ad::reshape(student.tensor, {n, d}));
}

LossBreakdown total_loss(ad::Tape& tape, const LossTerms& terms, const LossWeights& weights) {
  weights.validate();
  auto term = [&](Var v) {
    if (v.tape == nullptr) return tape.constant(Tensor::scalar(0.0));
    if (v.tape != &tape) throw Error("total_loss: term recorded on another tape");
    return v;
  };
  LossBreakdown b{term(terms.sem), term(terms.distill), term(terms.ssc), term(terms.scal_sem), term(terms.scal_geo), {}};
  const Var parts[] = {b.sem, b.distill, b.ssc, b.scal_sem, b.scal_geo};
  const auto w = weights.as_array();
  b.total = ad::weighted_sum(parts, w);
  return b;
}

LossCurveWriter::LossCurveWriter(const std::string& path) : out_(path) {
  if (!out_) throw FormatError(FormatErrorKind::Io, "cannot open loss curve " + path);
  out_ << "step,sem,distill,ssc,scal_sem,scal_geo,total\n";
}

void LossCurveWriter::append(std::size_t step, const LossBreakdown& b) {
  char buf[32];
  out_ << step;
  for (double v : b.values()) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    out_ << ',' << buf;
  }
  out_ << '\n';
  out_.flush();
}

}  // namespace occ::loss
