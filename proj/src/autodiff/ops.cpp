#include "occforge/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <unordered_set>

#include "occforge/errors.hpp"

namespace occ::ad {
namespace {

Tape& tape_of(Var a) {
  if (a.tape == nullptr) throw Error("op applied to an unbound variable");
  return *a.tape;
}

Tape& tape_of(Var a, Var b) {
  Tape& t = tape_of(a);
  if (b.tape != &t) throw Error("op operands live on different tapes");
  return t;
}

void require_rank(const char* op, Var v, std::size_t rank) {
  if (v.shape().size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(v.shape()));
  }
}

void require_same_shape(const char* op, Var a, Var b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void accumulate(Tape& t, std::size_t id, const Tensor& g) {
  if (!t.requires_grad(id)) return;
  Tensor& dst = t.grad_buffer(id);
  for (std::size_t i = 0; i < g.numel(); ++i) dst[i] += g[i];
}

struct AxisView {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisView axis_view(const Shape& s, std::size_t axis) {
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
  v.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

// Interpolation taps along one axis of extent n for a normalized coordinate.
struct AxisTap {
  std::size_t i0 = 0, i1 = 0;
  double frac = 0.0;
  double scale = 0.0;  // d(coordinate)/d(normalized)
};

AxisTap axis_tap(double normalized, std::size_t n) {
  AxisTap t;
  if (n <= 1) return t;
  const double c = normalized * static_cast<double>(n - 1);
  std::size_t i0 = static_cast<std::size_t>(std::floor(c));
  if (i0 > n - 2) i0 = n - 2;
  t.i0 = i0;
  t.i1 = i0 + 1;
  t.frac = c - static_cast<double>(i0);
  t.scale = static_cast<double>(n - 1);
  return t;
}

bool in_unit(double v) { return v >= 0.0 && v <= 1.0; }

}  // namespace

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape("add", a, b);
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  return t.record("add", std::move(out), {a.id, b.id}, [](Tape& t, std::size_t o) {
    const Tensor& g = t.grad(o);
    for (std::size_t in : t.inputs(o)) accumulate(t, in, g);
  });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape("sub", a, b);
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
  return t.record("sub", std::move(out), {a.id, b.id}, [](Tape& t, std::size_t o) {
    const Tensor& g = t.grad(o);
    accumulate(t, t.inputs(o)[0], g);
    const std::size_t b = t.inputs(o)[1];
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape("mul", a, b);
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  return t.record("mul", std::move(out), {a.id, b.id}, [](Tape& t, std::size_t o) {
    const Tensor& g = t.grad(o);
    const std::size_t a = t.inputs(o)[0], b = t.inputs(o)[1];
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double factor) {
  Tape& t = tape_of(a);
  Tensor out = a.value();
  for (double& v : out.values()) v *= factor;
  return t.record("scale", std::move(out), {a.id}, [factor](Tape& t, std::size_t o) {
    const Tensor& g = t.grad(o);
    Tensor& ga = t.grad_buffer(t.inputs(o)[0]);
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * factor;
  });
}

Var silu(Var a) {
  Tape& t = tape_of(a);
  Tensor out = a.value();
  for (double& v : out.values()) v = v / (1.0 + std::exp(-v));
  return t.record("silu", std::move(out), {a.id}, [](Tape& t, std::size_t o) {
    const Tensor& g = t.grad(o);
    const std::size_t in = t.inputs(o)[0];
    const Tensor& x = t.value(in);
    Tensor& ga = t.grad_buffer(in);
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-x[i]));
      ga[i] += g[i] * s * (1.0 + x[i] * (1.0 - s));
    }
  });
}

Var sigmoid(Var a) {
  Tape& t = tape_of(a);
  Tensor out = a.value();
  for (double& v : out.values()) v = 1.0 / (1.0 + std::exp(-v));
  return t.record("sigmoid", std::move(out), {a.id}, [](Tape& t, std::size_t o) {
    const Tensor& g = t.grad(o);
    const Tensor& y = t.value(o);
    Tensor& ga = t.grad_buffer(t.inputs(o)[0]);
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

Var log(Var a) {
  Tape& t = tape_of(a);
  Tensor out = a.value();
  for (double& v : out.values()) v = std::log(v);
  return t.record("log", std::move(out), {a.id}, [](Tape& t, std::size_t o) {
    const Tensor& g = t.grad(o);
    const std::size_t in = t.inputs(o)[0];
    const Tensor& x = t.value(in);
    Tensor& ga = t.grad_buffer(in);
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] / x[i];
  });
}

Var sum(Var a) {
  Tape& t = tape_of(a);
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return t.record("sum", Tensor::scalar(s), {a.id}, [](Tape& t, std::size_t o) {
    const double g = t.grad(o)[0];
    Tensor& ga = t.grad_buffer(t.inputs(o)[0]);
    for (double& v : ga.values()) v += g;
  });
}

Var mean(Var a) {
  const std::size_t n = a.value().numel();
  if (n == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var reshape(Var a, Shape shape) {
  Tape& t = tape_of(a);
  Tensor out = a.value().reshaped(std::move(shape));
  return t.record("reshape", std::move(out), {a.id}, [](Tape& t, std::size_t o) {
    const Tensor& g = t.grad(o);
    Tensor& ga = t.grad_buffer(t.inputs(o)[0]);
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
  });
}

Var transpose(Var a) {
  Tape& t = tape_of(a);
  require_rank("transpose", a, 2);
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  const Tensor& x = a.value();
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  return t.record("transpose", std::move(out), {a.id}, [m, n](Tape& t, std::size_t o) {
    const Tensor& g = t.grad(o);
    Tensor& ga = t.grad_buffer(t.inputs(o)[0]);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
  });
}

namespace {

// out[M,N] += a[M,K] * b[K,N]
void gemm_acc(const double* a, const double* b, double* out, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
}

// Backward of out = a*b: ga[M,K] += g[M,N] * b^T ; gb[K,N] += a^T * g
void gemm_backward(Tape& t, std::size_t a_id, std::size_t b_id, const Tensor& g, std::size_t m, std::size_t k,
                   std::size_t n) {
  const Tensor& a = t.value(a_id);
  const Tensor& b = t.value(b_id);
  if (t.requires_grad(a_id)) {
    Tensor& ga = t.grad_buffer(a_id);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * b[p * n + j];
        ga[i * k + p] += s;
      }
  }
  if (t.requires_grad(b_id)) {
    Tensor& gb = t.grad_buffer(b_id);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const double av = a[i * k + p];
        if (av == 0.0) continue;
        for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * g[i * n + j];
      }
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor out({m, n});
  gemm_acc(a.value().data(), b.value().data(), out.data(), m, k, n);
  return t.record("matmul", std::move(out), {a.id, b.id}, [m, k, n](Tape& t, std::size_t o) {
    gemm_backward(t, t.inputs(o)[0], t.inputs(o)[1], t.grad(o), m, k, n);
  });
}

Var linear(Var x, Var w, Var bias) {
  Tape& t = tape_of(x, w);
  require_rank("linear", x, 2);
  require_rank("linear", w, 2);
  const std::size_t m = x.shape()[0], k = x.shape()[1], n = w.shape()[1];
  if (w.shape()[0] != k) throw ShapeError("linear: " + shape_str(x.shape()) + " x " + shape_str(w.shape()));
  const bool has_bias = bias.tape != nullptr;
  Tensor out({m, n});
  if (has_bias) {
    if (bias.tape != &t) throw Error("linear: bias on a different tape");
    if (bias.shape() != Shape{n}) throw ShapeError("linear: bias shape " + shape_str(bias.shape()));
    const Tensor& b = bias.value();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] = b[j];
  }
  gemm_acc(x.value().data(), w.value().data(), out.data(), m, k, n);
  std::vector<std::size_t> inputs{x.id, w.id};
  if (has_bias) inputs.push_back(bias.id);
  return t.record("linear", std::move(out), std::move(inputs), [m, k, n](Tape& t, std::size_t o) {
    const Tensor& g = t.grad(o);
    const auto& ins = t.inputs(o);
    gemm_backward(t, ins[0], ins[1], g, m, k, n);
    if (ins.size() == 3 && t.requires_grad(ins[2])) {
      Tensor& gb = t.grad_buffer(ins[2]);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
    }
  });
}

Var mul_cols(Var x, Var v) {
  Tape& t = tape_of(x, v);
  require_rank("mul_cols", x, 2);
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  if (v.shape() != Shape{n}) throw ShapeError("mul_cols: " + shape_str(x.shape()) + " by " + shape_str(v.shape()));
  Tensor out = x.value();
  const Tensor& vv = v.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] *= vv[j];
  return t.record("mul_cols", std::move(out), {x.id, v.id}, [m, n](Tape& t, std::size_t o) {
    const Tensor& g = t.grad(o);
    const std::size_t xi = t.inputs(o)[0], vi = t.inputs(o)[1];
    const Tensor& xv = t.value(xi);
    const Tensor& vv = t.value(vi);
    if (t.requires_grad(xi)) {
      Tensor& gx = t.grad_buffer(xi);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[i * n + j] * vv[j];
    }
    if (t.requires_grad(vi)) {
      Tensor& gv = t.grad_buffer(vi);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gv[j] += g[i * n + j] * xv[i * n + j];
    }
  });
}

Var repeat_each(Var v, std::size_t times) {
  Tape& t = tape_of(v);
  require_rank("repeat_each", v, 1);
  const std::size_t n = v.shape()[0];
  Tensor out({n * times});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t r = 0; r < times; ++r) out[i * times + r] = v.value()[i];
  return t.record("repeat_each", std::move(out), {v.id}, [n, times](Tape& t, std::size_t o) {
    const Tensor& g = t.grad(o);
    Tensor& gv = t.grad_buffer(t.inputs(o)[0]);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t r = 0; r < times; ++r) gv[i] += g[i * times + r];
  });
}

Var softmax(Var a, std::size_t axis) {
  Tape& t = tape_of(a);
  if (axis >= a.shape().size()) throw ShapeError("softmax: axis out of range for " + shape_str(a.shape()));
  const AxisView av = axis_view(a.shape(), axis);
  Tensor out = a.value();
  for (std::size_t o = 0; o < av.outer; ++o)
    for (std::size_t i = 0; i < av.inner; ++i) {
      double* base = out.data() + o * av.extent * av.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < av.extent; ++c) mx = std::max(mx, base[c * av.inner]);
      double z = 0.0;
      for (std::size_t c = 0; c < av.extent; ++c) {
        base[c * av.inner] = std::exp(base[c * av.inner] - mx);
        z += base[c * av.inner];
      }
      for (std::size_t c = 0; c < av.extent; ++c) base[c * av.inner] /= z;
    }
  return t.record("softmax", std::move(out), {a.id}, [av](Tape& t, std::size_t o) {
    const Tensor& g = t.grad(o);
    const Tensor& y = t.value(o);
    Tensor& ga = t.grad_buffer(t.inputs(o)[0]);
    for (std::size_t p = 0; p < av.outer; ++p)
      for (std::size_t i = 0; i < av.inner; ++i) {
        const std::size_t base = p * av.extent * av.inner + i;
        double dot = 0.0;
        for (std::size_t c = 0; c < av.extent; ++c) dot += g[base + c * av.inner] * y[base + c * av.inner];
        for (std::size_t c = 0; c < av.extent; ++c) {
          const std::size_t k = base + c * av.inner;
          ga[k] += y[k] * (g[k] - dot);
        }
      }
  });
}

Var log_softmax(Var a, std::size_t axis) {
  Tape& t = tape_of(a);
  if (axis >= a.shape().size()) throw ShapeError("log_softmax: axis out of range for " + shape_str(a.shape()));
  const AxisView av = axis_view(a.shape(), axis);
  Tensor out = a.value();
  for (std::size_t o = 0; o < av.outer; ++o)
    for (std::size_t i = 0; i < av.inner; ++i) {
      double* base = out.data() + o * av.extent * av.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < av.extent; ++c) mx = std::max(mx, base[c * av.inner]);
      double z = 0.0;
      for (std::size_t c = 0; c < av.extent; ++c) z += std::exp(base[c * av.inner] - mx);
      const double lse = mx + std::log(z);
      for (std::size_t c = 0; c < av.extent; ++c) base[c * av.inner] -= lse;
    }
  return t.record("log_softmax", std::move(out), {a.id}, [av](Tape& t, std::size_t o) {
    const Tensor& g = t.grad(o);
    const Tensor& y = t.value(o);
    Tensor& ga = t.grad_buffer(t.inputs(o)[0]);
    for (std::size_t p = 0; p < av.outer; ++p)
      for (std::size_t i = 0; i < av.inner; ++i) {
        const std::size_t base = p * av.extent * av.inner + i;
        double gs = 0.0;
        for (std::size_t c = 0; c < av.extent; ++c) gs += g[base + c * av.inner];
        for (std::size_t c = 0; c < av.extent; ++c) {
          const std::size_t k = base + c * av.inner;
          ga[k] += g[k] - std::exp(y[k]) * gs;
        }
      }
  });
}

Var broadcast_rows(Var v, std::size_t n) {
  Tape& t = tape_of(v);
  require_rank("broadcast_rows", v, 1);
  const std::size_t d = v.shape()[0];
  Tensor out({n, d});
  for (std::size_t i = 0; i < n; ++i) std::copy_n(v.value().data(), d, out.data() + i * d);
  return t.record("broadcast_rows", std::move(out), {v.id}, [n, d](Tape& t, std::size_t o) {
    const Tensor& g = t.grad(o);
    Tensor& gv = t.grad_buffer(t.inputs(o)[0]);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) gv[j] += g[i * d + j];
  });
}

Var gather_rows(Var x, std::span<const std::size_t> index) {
  Tape& t = tape_of(x);
  require_rank("gather_rows", x, 2);
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  std::vector<std::size_t> idx(index.begin(), index.end());
  Tensor out({idx.size(), d});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= n) throw ShapeError("gather_rows: index " + std::to_string(idx[r]) + " >= " + std::to_string(n));
    std::copy_n(x.value().data() + idx[r] * d, d, out.data() + r * d);
  }
  return t.record("gather_rows", std::move(out), {x.id}, [idx = std::move(idx), d](Tape& t, std::size_t o) {
    const Tensor& g = t.grad(o);
    Tensor& gx = t.grad_buffer(t.inputs(o)[0]);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < d; ++j) gx[idx[r] * d + j] += g[r * d + j];
  });
}

namespace {

void check_scatter(const char* op, Var base, std::span<const std::size_t> index, Var rows, bool unique) {
  require_rank(op, base, 2);
  require_rank(op, rows, 2);
  const std::size_t n = base.shape()[0], d = base.shape()[1];
  if (rows.shape()[1] != d || rows.shape()[0] != index.size()) {
    throw ShapeError(std::string(op) + ": rows " + shape_str(rows.shape()) + " vs base " + shape_str(base.shape()) +
                     " with " + std::to_string(index.size()) + " indices");
  }
  std::unordered_set<std::size_t> seen;
  for (std::size_t i : index) {
    if (i >= n) throw ShapeError(std::string(op) + ": index " + std::to_string(i) + " >= " + std::to_string(n));
    if (unique && !seen.insert(i).second) throw Error(std::string(op) + ": duplicate index " + std::to_string(i));
  }
}

}  // namespace

Var scatter_rows(Var base, std::span<const std::size_t> index, Var rows) {
  Tape& t = tape_of(base, rows);
  check_scatter("scatter_rows", base, index, rows, true);
  const std::size_t d = base.shape()[1];
  std::vector<std::size_t> idx(index.begin(), index.end());
  Tensor out = base.value();
  for (std::size_t r = 0; r < idx.size(); ++r) std::copy_n(rows.value().data() + r * d, d, out.data() + idx[r] * d);
  return t.record("scatter_rows", std::move(out), {base.id, rows.id}, [idx = std::move(idx), d](Tape& t, std::size_t o) {
    const Tensor& g = t.grad(o);
    const std::size_t bi = t.inputs(o)[0], ri = t.inputs(o)[1];
    if (t.requires_grad(bi)) {
      Tensor masked = g;
      for (std::size_t i : idx) std::fill_n(masked.data() + i * d, d, 0.0);
      accumulate(t, bi, masked);
    }
    if (t.requires_grad(ri)) {
      Tensor& gr = t.grad_buffer(ri);
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t j = 0; j < d; ++j) gr[r * d + j] += g[idx[r] * d + j];
    }
  });
}

Var scatter_add_rows(Var base, std::span<const std::size_t> index, Var rows) {
  Tape& t = tape_of(base, rows);
  check_scatter("scatter_add_rows", base, index, rows, false);
  const std::size_t d = base.shape()[1];
  std::vector<std::size_t> idx(index.begin(), index.end());
  Tensor out = base.value();
  for (std::size_t r = 0; r < idx.size(); ++r)
    for (std::size_t j = 0; j < d; ++j) out[idx[r] * d + j] += rows.value()[r * d + j];
  return t.record("scatter_add_rows", std::move(out), {base.id, rows.id},
                  [idx = std::move(idx), d](Tape& t, std::size_t o) {
                    const Tensor& g = t.grad(o);
                    accumulate(t, t.inputs(o)[0], g);
                    const std::size_t ri = t.inputs(o)[1];
                    if (t.requires_grad(ri)) {
                      Tensor& gr = t.grad_buffer(ri);
                      for (std::size_t r = 0; r < idx.size(); ++r)
                        for (std::size_t j = 0; j < d; ++j) gr[r * d + j] += g[idx[r] * d + j];
                    }
                  });
}

Var mask_rows(Var x, std::span<const std::uint8_t> keep) {
  Tape& t = tape_of(x);
  require_rank("mask_rows", x, 2);
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  if (keep.size() != n) throw ShapeError("mask_rows: mask length " + std::to_string(keep.size()) + " vs rows " + std::to_string(n));
  std::vector<std::uint8_t> mask(keep.begin(), keep.end());
  Tensor out = x.value();
  for (std::size_t i = 0; i < n; ++i)
    if (!mask[i]) std::fill_n(out.data() + i * d, d, 0.0);
  return t.record("mask_rows", std::move(out), {x.id}, [mask = std::move(mask), d](Tape& t, std::size_t o) {
    const Tensor& g = t.grad(o);
    Tensor& gx = t.grad_buffer(t.inputs(o)[0]);
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask[i])
        for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += g[i * d + j];
  });
}

Var conv2d(Var x, Var w, Var bias, std::size_t stride, std::size_t pad) {
  Tape& t = tape_of(x, w);
  require_rank("conv2d", x, 3);
  require_rank("conv2d", w, 4);
  const std::size_t c_in = x.shape()[0], h = x.shape()[1], wd = x.shape()[2];
  const std::size_t c_out = w.shape()[0], k = w.shape()[2];
  if (w.shape()[1] != c_in || w.shape()[3] != k) throw ShapeError("conv2d: weight " + shape_str(w.shape()) + " for input " + shape_str(x.shape()));
  if (stride == 0 || h + 2 * pad < k || wd + 2 * pad < k) throw ShapeError("conv2d: invalid geometry for " + shape_str(x.shape()));
  const bool has_bias = bias.tape != nullptr;
  if (has_bias && bias.shape() != Shape{c_out}) throw ShapeError("conv2d: bias " + shape_str(bias.shape()));
  const std::size_t ho = (h + 2 * pad - k) / stride + 1, wo = (wd + 2 * pad - k) / stride + 1;

  Tensor out({c_out, ho, wo});
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  for (std::size_t o = 0; o < c_out; ++o) {
    double* op = out.data() + o * ho * wo;
    if (has_bias) std::fill_n(op, ho * wo, bias.value()[o]);
    for (std::size_t c = 0; c < c_in; ++c)
      for (std::size_t ky = 0; ky < k; ++ky)
        for (std::size_t kx = 0; kx < k; ++kx) {
          const double wk = wv[((o * c_in + c) * k + ky) * k + kx];
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            const double* row = xv.data() + (c * h + static_cast<std::size_t>(iy)) * wd;
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
              if (ix < 0 || ix >= static_cast<long>(wd)) continue;
              op[oy * wo + ox] += wk * row[ix];
            }
          }
        }
  }
  std::vector<std::size_t> inputs{x.id, w.id};
  if (has_bias) inputs.push_back(bias.id);
  return t.record("conv2d", std::move(out), std::move(inputs),
                  [=](Tape& t, std::size_t o_id) {
                    const Tensor& g = t.grad(o_id);
                    const auto& ins = t.inputs(o_id);
                    const Tensor& xv = t.value(ins[0]);
                    const Tensor& wv = t.value(ins[1]);
                    const bool gx_on = t.requires_grad(ins[0]), gw_on = t.requires_grad(ins[1]);
                    Tensor* gx = gx_on ? &t.grad_buffer(ins[0]) : nullptr;
                    Tensor* gw = gw_on ? &t.grad_buffer(ins[1]) : nullptr;
                    for (std::size_t o = 0; o < c_out; ++o) {
                      const double* gp = g.data() + o * ho * wo;
                      for (std::size_t c = 0; c < c_in; ++c)
                        for (std::size_t ky = 0; ky < k; ++ky)
                          for (std::size_t kx = 0; kx < k; ++kx) {
                            const std::size_t wi = ((o * c_in + c) * k + ky) * k + kx;
                            const double wk = wv[wi];
                            double acc = 0.0;
                            for (std::size_t oy = 0; oy < ho; ++oy) {
                              const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                              if (iy < 0 || iy >= static_cast<long>(h)) continue;
                              const std::size_t row = (c * h + static_cast<std::size_t>(iy)) * wd;
                              for (std::size_t ox = 0; ox < wo; ++ox) {
                                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                                if (ix < 0 || ix >= static_cast<long>(wd)) continue;
                                const double gv = gp[oy * wo + ox];
                                acc += gv * xv[row + static_cast<std::size_t>(ix)];
                                if (gx) (*gx)[row + static_cast<std::size_t>(ix)] += gv * wk;
                              }
                            }
                            if (gw) (*gw)[wi] += acc;
                          }
                    }
                    if (ins.size() == 3 && t.requires_grad(ins[2])) {
                      Tensor& gb = t.grad_buffer(ins[2]);
                      for (std::size_t o = 0; o < c_out; ++o)
                        for (std::size_t i = 0; i < ho * wo; ++i) gb[o] += g[o * ho * wo + i];
                    }
                  });
}

namespace {

struct Bilinear {
  bool valid = false;
  AxisTap x, y;
  // Corner offsets within one channel plane and their weights.
  std::size_t idx[4]{};
  double w[4]{};
};

Bilinear bilinear_taps(double u, double v, std::size_t h, std::size_t w) {
  Bilinear b;
  if (!in_unit(u) || !in_unit(v)) return b;
  b.valid = true;
  b.x = axis_tap(u, w);
  b.y = axis_tap(v, h);
  const double fx = b.x.frac, fy = b.y.frac;
  b.idx[0] = b.y.i0 * w + b.x.i0;
  b.idx[1] = b.y.i0 * w + b.x.i1;
  b.idx[2] = b.y.i1 * w + b.x.i0;
  b.idx[3] = b.y.i1 * w + b.x.i1;
  b.w[0] = (1.0 - fy) * (1.0 - fx);
  b.w[1] = (1.0 - fy) * fx;
  b.w[2] = fy * (1.0 - fx);
  b.w[3] = fy * fx;
  return b;
}

// Value at a channel plane, evaluated in the (1-fy)*row0 + fy*row1 form so that
// grid nodes reproduce stored values exactly.
double bilinear_eval(const Bilinear& b, const double* plane) {
  const double fx = b.x.frac, fy = b.y.frac;
  const double top = (1.0 - fx) * plane[b.idx[0]] + fx * plane[b.idx[1]];
  const double bot = (1.0 - fx) * plane[b.idx[2]] + fx * plane[b.idx[3]];
  return (1.0 - fy) * top + fy * bot;
}

// d(value)/d(u), d(value)/d(v) in normalized units.
std::pair<double, double> bilinear_dcoord(const Bilinear& b, const double* plane) {
  const double fx = b.x.frac, fy = b.y.frac;
  const double p00 = plane[b.idx[0]], p01 = plane[b.idx[1]], p10 = plane[b.idx[2]], p11 = plane[b.idx[3]];
  const double dx = (1.0 - fy) * (p01 - p00) + fy * (p11 - p10);
  const double dy = (1.0 - fx) * (p10 - p00) + fx * (p11 - p01);
  return {dx * b.x.scale, dy * b.y.scale};
}

}  // namespace

Var bilinear_sample(Var fmap, Var points) {
  Tape& t = tape_of(fmap, points);
  require_rank("bilinear_sample", fmap, 3);
  require_rank("bilinear_sample", points, 2);
  if (points.shape()[1] != 2) throw ShapeError("bilinear_sample: points must be [P,2], got " + shape_str(points.shape()));
  const std::size_t c = fmap.shape()[0], h = fmap.shape()[1], w = fmap.shape()[2], p = points.shape()[0];
  const Tensor& fv = fmap.value();
  const Tensor& pv = points.value();
  Tensor out({p, c});
  for (std::size_t i = 0; i < p; ++i) {
    const Bilinear b = bilinear_taps(pv[2 * i], pv[2 * i + 1], h, w);
    if (!b.valid) continue;
    for (std::size_t ch = 0; ch < c; ++ch) out[i * c + ch] = bilinear_eval(b, fv.data() + ch * h * w);
  }
  return t.record("bilinear_sample", std::move(out), {fmap.id, points.id}, [c, h, w, p](Tape& t, std::size_t o) {
    const Tensor& g = t.grad(o);
    const std::size_t fi = t.inputs(o)[0], pi = t.inputs(o)[1];
    const Tensor& fv = t.value(fi);
    const Tensor& pv = t.value(pi);
    Tensor* gf = t.requires_grad(fi) ? &t.grad_buffer(fi) : nullptr;
    Tensor* gp = t.requires_grad(pi) ? &t.grad_buffer(pi) : nullptr;
    for (std::size_t i = 0; i < p; ++i) {
      const Bilinear b = bilinear_taps(pv[2 * i], pv[2 * i + 1], h, w);
      if (!b.valid) continue;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double gv = g[i * c + ch];
        if (gf)
          for (int k = 0; k < 4; ++k) (*gf)[ch * h * w + b.idx[k]] += gv * b.w[k];
        if (gp) {
          const auto [du, dv] = bilinear_dcoord(b, fv.data() + ch * h * w);
          (*gp)[2 * i] += gv * du;
          (*gp)[2 * i + 1] += gv * dv;
        }
      }
    }
  });
}

Var deform_sample_2d(Var value, Var locations, Var weights, std::size_t heads, std::size_t points) {
  Tape& t = tape_of(value, locations);
  if (weights.tape != &t) throw Error("deform_sample_2d: operands on different tapes");
  require_rank("deform_sample_2d", value, 3);
  const std::size_t c = value.shape()[0], h = value.shape()[1], w = value.shape()[2];
  if (heads == 0 || c % heads != 0) throw ShapeError("deform_sample_2d: channels not divisible by heads");
  const std::size_t dh = c / heads;
  const std::size_t n = locations.shape().empty() ? 0 : locations.shape()[0];
  if (locations.shape() != Shape{n, heads * points * 2} || weights.shape() != Shape{n, heads * points}) {
    throw ShapeError("deform_sample_2d: locations " + shape_str(locations.shape()) + ", weights " +
                     shape_str(weights.shape()));
  }
  const Tensor& vv = value.value();
  const Tensor& lv = locations.value();
  const Tensor& av = weights.value();
  Tensor out({n, c});
  for (std::size_t q = 0; q < n; ++q)
    for (std::size_t hh = 0; hh < heads; ++hh)
      for (std::size_t k = 0; k < points; ++k) {
        const std::size_t s = hh * points + k;
        const Bilinear b = bilinear_taps(lv[q * heads * points * 2 + 2 * s], lv[q * heads * points * 2 + 2 * s + 1], h, w);
        if (!b.valid) continue;
        const double a = av[q * heads * points + s];
        for (std::size_t cc = 0; cc < dh; ++cc) {
          const std::size_t ch = hh * dh + cc;
          out[q * c + ch] += a * bilinear_eval(b, vv.data() + ch * h * w);
        }
      }
  return t.record("deform_sample_2d", std::move(out), {value.id, locations.id, weights.id},
                  [=](Tape& t, std::size_t o) {
                    const Tensor& g = t.grad(o);
                    const auto& ins = t.inputs(o);
                    const Tensor& vv = t.value(ins[0]);
                    const Tensor& lv = t.value(ins[1]);
                    const Tensor& av = t.value(ins[2]);
                    Tensor* gv = t.requires_grad(ins[0]) ? &t.grad_buffer(ins[0]) : nullptr;
                    Tensor* gl = t.requires_grad(ins[1]) ? &t.grad_buffer(ins[1]) : nullptr;
                    Tensor* ga = t.requires_grad(ins[2]) ? &t.grad_buffer(ins[2]) : nullptr;
                    for (std::size_t q = 0; q < n; ++q)
                      for (std::size_t hh = 0; hh < heads; ++hh)
                        for (std::size_t k = 0; k < points; ++k) {
                          const std::size_t s = hh * points + k;
                          const std::size_t li = q * heads * points * 2 + 2 * s;
                          const Bilinear b = bilinear_taps(lv[li], lv[li + 1], h, w);
                          if (!b.valid) continue;
                          const double a = av[q * heads * points + s];
                          double da = 0.0, du = 0.0, dv = 0.0;
                          for (std::size_t cc = 0; cc < dh; ++cc) {
                            const std::size_t ch = hh * dh + cc;
                            const double gq = g[q * c + ch];
                            const double* plane = vv.data() + ch * h * w;
                            if (ga) da += gq * bilinear_eval(b, plane);
                            if (gl) {
                              const auto [pu, pv] = bilinear_dcoord(b, plane);
                              du += gq * pu;
                              dv += gq * pv;
                            }
                            if (gv)
                              for (int tap = 0; tap < 4; ++tap) (*gv)[ch * h * w + b.idx[tap]] += gq * a * b.w[tap];
                          }
                          if (ga) (*ga)[q * heads * points + s] += da;
                          if (gl) {
                            (*gl)[li] += a * du;
                            (*gl)[li + 1] += a * dv;
                          }
                        }
                  });
}

namespace {

struct Trilinear {
  bool valid = false;
  AxisTap ax[3];
  std::size_t idx[8]{};  // voxel offsets (without channel), corner bit order z,y,x
};

Trilinear trilinear_taps(const double* p, const std::size_t* dims) {
  Trilinear t;
  if (!in_unit(p[0]) || !in_unit(p[1]) || !in_unit(p[2])) return t;
  t.valid = true;
  for (int a = 0; a < 3; ++a) t.ax[a] = axis_tap(p[a], dims[a]);
  for (int corner = 0; corner < 8; ++corner) {
    const std::size_t xi = (corner & 4) ? t.ax[0].i1 : t.ax[0].i0;
    const std::size_t yi = (corner & 2) ? t.ax[1].i1 : t.ax[1].i0;
    const std::size_t zi = (corner & 1) ? t.ax[2].i1 : t.ax[2].i0;
    t.idx[corner] = (xi * dims[1] + yi) * dims[2] + zi;
  }
  return t;
}

// Nested lerp z, then y, then x so grid nodes are reproduced exactly.
double trilinear_eval(const Trilinear& t, const double* vol, std::size_t stride, std::size_t ch) {
  const double fx = t.ax[0].frac, fy = t.ax[1].frac, fz = t.ax[2].frac;
  double c[8];
  for (int k = 0; k < 8; ++k) c[k] = vol[t.idx[k] * stride + ch];
  const double c00 = (1 - fz) * c[0] + fz * c[1];
  const double c01 = (1 - fz) * c[2] + fz * c[3];
  const double c10 = (1 - fz) * c[4] + fz * c[5];
  const double c11 = (1 - fz) * c[6] + fz * c[7];
  const double c0 = (1 - fy) * c00 + fy * c01;
  const double c1 = (1 - fy) * c10 + fy * c11;
  return (1 - fx) * c0 + fx * c1;
}

void trilinear_weights(const Trilinear& t, double* w) {
  const double fx = t.ax[0].frac, fy = t.ax[1].frac, fz = t.ax[2].frac;
  for (int k = 0; k < 8; ++k) {
    w[k] = ((k & 4) ? fx : 1 - fx) * ((k & 2) ? fy : 1 - fy) * ((k & 1) ? fz : 1 - fz);
  }
}

// Gradient of the interpolated value w.r.t. the three normalized coordinates.
void trilinear_dcoord(const Trilinear& t, const double* vol, std::size_t stride, std::size_t ch, double* d) {
  const double f[3] = {t.ax[0].frac, t.ax[1].frac, t.ax[2].frac};
  double c[8];
  for (int k = 0; k < 8; ++k) c[k] = vol[t.idx[k] * stride + ch];
  for (int axis = 0; axis < 3; ++axis) {
    const int bit = 4 >> axis;
    double s = 0.0;
    for (int k = 0; k < 8; ++k) {
      double wgt = (k & bit) ? 1.0 : -1.0;
      for (int other = 0; other < 3; ++other) {
        if (other == axis) continue;
        const int ob = 4 >> other;
        wgt *= (k & ob) ? f[other] : 1 - f[other];
      }
      s += wgt * c[k];
    }
    d[axis] = s * t.ax[axis].scale;
  }
}

}  // namespace

Var deform_sample_3d(Var value, Var locations, Var weights, std::size_t heads, std::size_t points) {
  Tape& t = tape_of(value, locations);
  if (weights.tape != &t) throw Error("deform_sample_3d: operands on different tapes");
  require_rank("deform_sample_3d", value, 4);
  const std::size_t dims[3] = {value.shape()[0], value.shape()[1], value.shape()[2]};
  const std::size_t c = value.shape()[3];
  if (heads == 0 || c % heads != 0) throw ShapeError("deform_sample_3d: channels not divisible by heads");
  const std::size_t dh = c / heads;
  const std::size_t n = locations.shape().empty() ? 0 : locations.shape()[0];
  if (locations.shape() != Shape{n, heads * points * 3} || weights.shape() != Shape{n, heads * points}) {
    throw ShapeError("deform_sample_3d: locations " + shape_str(locations.shape()) + ", weights " +
                     shape_str(weights.shape()));
  }
  const Tensor& vv = value.value();
  const Tensor& lv = locations.value();
  const Tensor& av = weights.value();
  Tensor out({n, c});
  for (std::size_t q = 0; q < n; ++q)
    for (std::size_t hh = 0; hh < heads; ++hh)
      for (std::size_t k = 0; k < points; ++k) {
        const std::size_t s = hh * points + k;
        const Trilinear tri = trilinear_taps(lv.data() + (q * heads * points + s) * 3, dims);
        if (!tri.valid) continue;
        const double a = av[q * heads * points + s];
        for (std::size_t cc = 0; cc < dh; ++cc) {
          const std::size_t ch = hh * dh + cc;
          out[q * c + ch] += a * trilinear_eval(tri, vv.data(), c, ch);
        }
      }
  const std::size_t d0 = dims[0], d1 = dims[1], d2 = dims[2];
  return t.record("deform_sample_3d", std::move(out), {value.id, locations.id, weights.id},
                  [=](Tape& t, std::size_t o) {
                    const std::size_t dims[3] = {d0, d1, d2};
                    const Tensor& g = t.grad(o);
                    const auto& ins = t.inputs(o);
                    const Tensor& vv = t.value(ins[0]);
                    const Tensor& lv = t.value(ins[1]);
                    const Tensor& av = t.value(ins[2]);
                    Tensor* gv = t.requires_grad(ins[0]) ? &t.grad_buffer(ins[0]) : nullptr;
                    Tensor* gl = t.requires_grad(ins[1]) ? &t.grad_buffer(ins[1]) : nullptr;
                    Tensor* ga = t.requires_grad(ins[2]) ? &t.grad_buffer(ins[2]) : nullptr;
                    for (std::size_t q = 0; q < n; ++q)
                      for (std::size_t hh = 0; hh < heads; ++hh)
                        for (std::size_t k = 0; k < points; ++k) {
                          const std::size_t s = hh * points + k;
                          const std::size_t li = (q * heads * points + s) * 3;
                          const Trilinear tri = trilinear_taps(lv.data() + li, dims);
                          if (!tri.valid) continue;
                          const double a = av[q * heads * points + s];
                          double wts[8];
                          trilinear_weights(tri, wts);
                          double da = 0.0, dl[3] = {0, 0, 0};
                          for (std::size_t cc = 0; cc < dh; ++cc) {
                            const std::size_t ch = hh * dh + cc;
                            const double gq = g[q * c + ch];
                            if (gq == 0.0) continue;
                            if (ga) da += gq * trilinear_eval(tri, vv.data(), c, ch);
                            if (gl) {
                              double d[3];
                              trilinear_dcoord(tri, vv.data(), c, ch, d);
                              for (int ax = 0; ax < 3; ++ax) dl[ax] += gq * d[ax];
                            }
                            if (gv)
                              for (int corner = 0; corner < 8; ++corner)
                                (*gv)[tri.idx[corner] * c + ch] += gq * a * wts[corner];
                          }
                          if (ga) (*ga)[q * heads * points + s] += da;
                          if (gl)
                            for (int ax = 0; ax < 3; ++ax) (*gl)[li + ax] += a * dl[ax];
                        }
                  });
}

Var upsample_nearest3d(Var x, std::size_t factor) {
  Tape& t = tape_of(x);
  require_rank("upsample_nearest3d", x, 4);
  if (factor == 0) throw ShapeError("upsample_nearest3d: factor must be >= 1");
  const std::size_t sx = x.shape()[0], sy = x.shape()[1], sz = x.shape()[2], c = x.shape()[3];
  const std::size_t ox = sx * factor, oy = sy * factor, oz = sz * factor;
  Tensor out({ox, oy, oz, c});
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < ox; ++i)
    for (std::size_t j = 0; j < oy; ++j)
      for (std::size_t k = 0; k < oz; ++k) {
        const std::size_t src = ((i / factor) * sy + j / factor) * sz + k / factor;
        std::copy_n(xv.data() + src * c, c, out.data() + ((i * oy + j) * oz + k) * c);
      }
  return t.record("upsample_nearest3d", std::move(out), {x.id}, [=](Tape& t, std::size_t o) {
    const Tensor& g = t.grad(o);
    Tensor& gx = t.grad_buffer(t.inputs(o)[0]);
    for (std::size_t i = 0; i < ox; ++i)
      for (std::size_t j = 0; j < oy; ++j)
        for (std::size_t k = 0; k < oz; ++k) {
          const std::size_t src = ((i / factor) * sy + j / factor) * sz + k / factor;
          const std::size_t dst = ((i * oy + j) * oz + k) * c;
          for (std::size_t ch = 0; ch < c; ++ch) gx[src * c + ch] += g[dst + ch];
        }
  });
}

Var cross_entropy(Var logits, std::span<const std::uint8_t> labels, std::size_t class_axis, std::uint8_t ignore) {
  Tape& t = tape_of(logits);
  if (class_axis >= logits.shape().size()) throw ShapeError("cross_entropy: class axis out of range");
  const AxisView av = axis_view(logits.shape(), class_axis);
  if (labels.size() != av.outer * av.inner) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " + shape_str(logits.shape()));
  }
  std::vector<std::uint8_t> lab(labels.begin(), labels.end());
  const Tensor& z = logits.value();
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t o = 0; o < av.outer; ++o)
    for (std::size_t i = 0; i < av.inner; ++i) {
      const std::uint8_t l = lab[o * av.inner + i];
      if (l == ignore) continue;
      if (l >= av.extent) throw Error("cross_entropy: label " + std::to_string(l) + " >= class count " + std::to_string(av.extent));
      const std::size_t base = o * av.extent * av.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < av.extent; ++c) mx = std::max(mx, z[base + c * av.inner]);
      double s = 0.0;
      for (std::size_t c = 0; c < av.extent; ++c) s += std::exp(z[base + c * av.inner] - mx);
      total += mx + std::log(s) - z[base + l * av.inner];
      ++count;
    }
  const double loss = count ? total / static_cast<double>(count) : 0.0;
  return t.record("cross_entropy", Tensor::scalar(loss), {logits.id},
                  [av, lab = std::move(lab), count, ignore](Tape& t, std::size_t o) {
                    if (count == 0) return;
                    const double g = t.grad(o)[0] / static_cast<double>(count);
                    const std::size_t in = t.inputs(o)[0];
                    const Tensor& z = t.value(in);
                    Tensor& gz = t.grad_buffer(in);
                    for (std::size_t p = 0; p < av.outer; ++p)
                      for (std::size_t i = 0; i < av.inner; ++i) {
                        const std::uint8_t l = lab[p * av.inner + i];
                        if (l == ignore) continue;
                        const std::size_t base = p * av.extent * av.inner + i;
                        double mx = -std::numeric_limits<double>::infinity();
                        for (std::size_t c = 0; c < av.extent; ++c) mx = std::max(mx, z[base + c * av.inner]);
                        double s = 0.0;
                        for (std::size_t c = 0; c < av.extent; ++c) s += std::exp(z[base + c * av.inner] - mx);
                        for (std::size_t c = 0; c < av.extent; ++c) {
                          const double pc = std::exp(z[base + c * av.inner] - mx) / s;
                          gz[base + c * av.inner] += g * (pc - (c == l ? 1.0 : 0.0));
                        }
                      }
                  });
}

namespace {

constexpr double kScalEps = 1e-12;

// Affinity terms for one class column. `p(m)` is the predicted probability and
// `g(m)` the 0/1 target over labeled rows. Returns the loss and, when `dp` is
// non-null, writes dLoss/dp(m) scaled by `gscale`.
template <typename P, typename G, typename D>
double scal_class_term(std::size_t rows, P&& p, G&& g, D&& dp, bool want_grad, double gscale) {
  double pg = 0.0, ps = 0.0, gs = 0.0, nn = 0.0, ngs = 0.0;
  for (std::size_t m = 0; m < rows; ++m) {
    const double pm = p(m), gm = g(m);
    if (gm < 0) continue;
    pg += pm * gm;
    ps += pm;
    gs += gm;
    nn += (1.0 - pm) * (1.0 - gm);
    ngs += 1.0 - gm;
  }
  const double prec = pg / (ps + kScalEps);
  const double rec = pg / (gs + kScalEps);
  double loss = -std::log(prec + kScalEps) - std::log(rec + kScalEps);
  const bool with_spec = ngs > 0.0;
  double spec = 0.0;
  if (with_spec) {
    spec = nn / (ngs + kScalEps);
    loss += -std::log(spec + kScalEps);
  }
  if (want_grad) {
    const double d_prec = -1.0 / (prec + kScalEps);
    const double d_rec = -1.0 / (rec + kScalEps);
    const double d_spec = with_spec ? -1.0 / (spec + kScalEps) : 0.0;
    for (std::size_t m = 0; m < rows; ++m) {
      const double gm = g(m);
      if (gm < 0) continue;
      double d = d_prec * (gm - prec) / (ps + kScalEps) + d_rec * gm / (gs + kScalEps);
      if (with_spec) d += d_spec * (-(1.0 - gm)) / (ngs + kScalEps);
      dp(m, d * gscale);
    }
  }
  return loss;
}

// Returns the loss; accumulates the gradient w.r.t. probs into `grad` when non-null.
double scal_eval(const Tensor& probs, const std::vector<std::uint8_t>& lab, ScalKind kind, std::uint8_t ignore,
                 double upstream, Tensor* grad) {
  const std::size_t m = probs.shape()[0], c = probs.shape()[1];
  auto target = [&](std::size_t row, std::size_t cls) -> double {
    const std::uint8_t l = lab[row];
    if (l == ignore) return -1.0;
    if (kind == ScalKind::Semantic) return l == cls ? 1.0 : 0.0;
    return l != 0 ? 1.0 : 0.0;
  };
  std::vector<std::size_t> counted;
  if (kind == ScalKind::Semantic) {
    for (std::size_t cls = 0; cls < c; ++cls) {
      bool present = false;
      for (std::size_t r = 0; r < m && !present; ++r) present = target(r, cls) > 0.0;
      if (present) counted.push_back(cls);
    }
  } else {
    bool present = false;
    for (std::size_t r = 0; r < m && !present; ++r) present = target(r, 1) > 0.0;
    if (present) counted.push_back(1);
  }
  if (counted.empty()) return 0.0;
  const double norm = 1.0 / static_cast<double>(counted.size());
  double loss = 0.0;
  for (std::size_t cls : counted) {
    if (kind == ScalKind::Semantic) {
      loss += scal_class_term(
          m, [&](std::size_t r) { return probs[r * c + cls]; }, [&](std::size_t r) { return target(r, cls); },
          [&](std::size_t r, double d) { (*grad)[r * c + cls] += d; }, grad != nullptr, upstream * norm);
    } else {
      loss += scal_class_term(
          m, [&](std::size_t r) { return 1.0 - probs[r * c]; }, [&](std::size_t r) { return target(r, 1); },
          [&](std::size_t r, double d) { (*grad)[r * c] -= d; }, grad != nullptr, upstream * norm);
    }
  }
  return loss * norm;
}

}  // namespace

Var scal_loss(Var probs, std::span<const std::uint8_t> labels, ScalKind kind, std::uint8_t ignore) {
  Tape& t = tape_of(probs);
  require_rank("scal_loss", probs, 2);
  if (labels.size() != probs.shape()[0]) {
    throw ShapeError("scal_loss: " + std::to_string(labels.size()) + " labels for " + shape_str(probs.shape()));
  }
  std::vector<std::uint8_t> lab(labels.begin(), labels.end());
  for (std::uint8_t l : lab)
    if (l != ignore && l >= probs.shape()[1]) throw Error("scal_loss: label out of range");
  const double loss = scal_eval(probs.value(), lab, kind, ignore, 0.0, nullptr);
  return t.record("scal_loss", Tensor::scalar(loss), {probs.id},
                  [lab = std::move(lab), kind, ignore](Tape& t, std::size_t o) {
                    const std::size_t in = t.inputs(o)[0];
                    scal_eval(t.value(in), lab, kind, ignore, t.grad(o)[0], &t.grad_buffer(in));
                  });
}

Var kl_softmax(Var teacher_logits, Var student_logits) {
  Tape& t = tape_of(teacher_logits, student_logits);
  require_same_shape("kl_softmax", teacher_logits, student_logits);
  const Shape& s = student_logits.shape();
  if (s.empty()) throw ShapeError("kl_softmax: rank-0 input");
  const std::size_t c = s.back();
  const std::size_t rows = student_logits.value().numel() / c;
  auto log_softmax_row = [c](const double* z, double* out) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < c; ++i) mx = std::max(mx, z[i]);
    double sum = 0.0;
    for (std::size_t i = 0; i < c; ++i) sum += std::exp(z[i] - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t i = 0; i < c; ++i) out[i] = z[i] - lse;
  };
  const Tensor& tz = teacher_logits.value();
  const Tensor& sz = student_logits.value();
  std::vector<double> lt(c), ls(c);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    log_softmax_row(tz.data() + r * c, lt.data());
    log_softmax_row(sz.data() + r * c, ls.data());
    double kl = 0.0;
    for (std::size_t i = 0; i < c; ++i) kl += std::exp(lt[i]) * (lt[i] - ls[i]);
    total += kl;
  }
  // Only the student is an input of the recorded node: the teacher is detached.
  const std::size_t teacher_id = teacher_logits.id;
  return t.record("kl_softmax", Tensor::scalar(total / static_cast<double>(rows)), {student_logits.id},
                  [teacher_id, rows, c, log_softmax_row](Tape& t, std::size_t o) {
                    const double g = t.grad(o)[0] / static_cast<double>(rows);
                    const std::size_t in = t.inputs(o)[0];
                    const Tensor& tz = t.value(teacher_id);
                    const Tensor& sz = t.value(in);
                    Tensor& gs = t.grad_buffer(in);
                    std::vector<double> lt(c), ls(c);
                    for (std::size_t r = 0; r < rows; ++r) {
                      log_softmax_row(tz.data() + r * c, lt.data());
                      log_softmax_row(sz.data() + r * c, ls.data());
                      for (std::size_t i = 0; i < c; ++i) gs[r * c + i] += g * (std::exp(ls[i]) - std::exp(lt[i]));
                    }
                  });
}

Var weighted_sum(std::span<const Var> terms, std::span<const double> coeffs) {
  if (terms.empty() || terms.size() != coeffs.size()) throw ShapeError("weighted_sum: term/coefficient count mismatch");
  Tape& t = tape_of(terms[0]);
  std::vector<std::size_t> ids;
  double total = 0.0;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i].tape != &t) throw Error("weighted_sum: terms on different tapes");
    if (terms[i].value().numel() != 1) throw ShapeError("weighted_sum: term " + std::to_string(i) + " is not scalar");
    const double v = coeffs[i] * terms[i].item();
    total = i == 0 ? v : total + v;
    ids.push_back(terms[i].id);
  }
  std::vector<double> w(coeffs.begin(), coeffs.end());
  return t.record("weighted_sum", Tensor::scalar(total), std::move(ids), [w = std::move(w)](Tape& t, std::size_t o) {
    const double g = t.grad(o)[0];
    const auto& ins = t.inputs(o);
    for (std::size_t i = 0; i < ins.size(); ++i)
      if (t.requires_grad(ins[i])) t.grad_buffer(ins[i])[0] += g * w[i];
  });
}

}  // namespace occ::ad
