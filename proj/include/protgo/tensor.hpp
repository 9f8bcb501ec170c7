#pragma once

// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a shared handle: copies alias the same storage, clone() makes a
// detached deep copy. Operations take the Tape they record onto; an op records
// a backward rule only when the tape is recording and some input requires a
// gradient. Tape::backward replays the rules newest-first, so each recorded
// node is visited exactly once and gradients reaching a tensor along several
// paths are summed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "protgo/error.hpp"
#include "protgo/rng.hpp"

namespace protgo {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
      : s_(std::make_shared<Storage>()) {
    s_->shape = std::move(shape);
    s_->data.assign(shape_numel(s_->shape), fill);
    s_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false) : s_(std::make_shared<Storage>()) {
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("tensor of shape " + shape_str(shape) + " cannot hold " + std::to_string(data.size()) +
                       " values");
    }
    s_->shape = std::move(shape);
    s_->data = std::move(data);
    s_->requires_grad = requires_grad;
  }

  static Tensor scalar(double v, bool requires_grad = false) { return Tensor(Shape{}, std::vector<double>{v}, requires_grad); }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values, bool requires_grad = false) {
    return Tensor({rows, cols}, std::move(values), requires_grad);
  }

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t dim(std::size_t i) const { return s_->shape.at(i); }
  std::size_t numel() const { return s_->data.size(); }

  std::span<double> data() { return s_->data; }
  std::span<const double> data() const { return s_->data; }
  std::vector<double>& values() const { return s_->data; }

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool r) { s_->requires_grad = r; }

  bool has_grad() const { return !s_->grad.empty(); }

  // Gradient buffer, allocated (zeroed) on first access.
  std::span<double> grad() const {
    if (s_->grad.empty()) s_->grad.assign(s_->data.size(), 0.0);
    return s_->grad;
  }

  void zero_grad() {
    if (!s_->grad.empty()) std::fill(s_->grad.begin(), s_->grad.end(), 0.0);
  }

  void drop_grad() { s_->grad.clear(); }

  double item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return s_->data[0];
  }

  double& operator[](std::size_t i) { return s_->data[i]; }
  double operator[](std::size_t i) const { return s_->data[i]; }
  double& at(std::size_t r, std::size_t c) { return s_->data[r * s_->shape[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return s_->data[r * s_->shape[1] + c]; }

  Tensor clone() const {
    Tensor t(s_->shape, s_->data, s_->requires_grad);
    return t;
  }

  bool same_storage(const Tensor& o) const { return s_ == o.s_; }

 private:
  struct Storage {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> s_;
};

class Tape {
 public:
  bool recording() const { return recording_; }
  void set_recording(bool r) { recording_ = r; }

  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  void record(Tensor output, std::function<void()> backward_rule) {
    entries_.push_back({std::move(output), std::move(backward_rule)});
  }

  // Reverse accumulation from a scalar loss. Intermediate gradients are reset
  // first so a replay after zeroing leaf gradients reproduces the same values.
  void backward(const Tensor& loss) {
    if (loss.numel() != 1) throw ShapeError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
    if (entries_.empty()) throw Error("backward on an empty tape");
    for (auto& e : entries_) e.output.zero_grad();
    loss.grad()[0] = 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (it->output.has_grad()) it->rule();
    }
  }

 private:
  struct Entry {
    Tensor output;
    std::function<void()> rule;
  };
  std::vector<Entry> entries_;
  bool recording_ = true;
};

namespace detail {

inline bool tracks(const Tape& tape, std::initializer_list<const Tensor*> inputs) {
  if (!tape.recording()) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

// Splits a shape around `axis` into (outer, axis extent, inner) strides.
struct AxisView {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisView axis_view(const Shape& shape, int axis) {
  const int r = static_cast<int>(shape.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  AxisView v;
  for (int i = 0; i < axis; ++i) v.outer *= shape[static_cast<std::size_t>(i)];
  v.extent = shape[static_cast<std::size_t>(axis)];
  for (int i = axis + 1; i < r; ++i) v.inner *= shape[static_cast<std::size_t>(i)];
  return v;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra and elementwise ops.

inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const bool track = detail::tracks(tape, {&a, &b});
  Tensor out({m, n}, 0.0, track);
  {
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* pc = out.data().data();
    for (std::size_t i = 0; i < m; ++i) {
      double* crow = pc + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = pa[i * k + p];
        const double* brow = pb + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
  if (track) {
    tape.record(out, [a, b, out, m, k, n]() {
      const double* g = out.grad().data();
      if (a.requires_grad()) {
        double* ga = a.grad().data();
        const double* pb = b.data().data();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            const double* brow = pb + p * n;
            const double* grow = g + i * n;
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
            ga[i * k + p] += s;
          }
        }
      }
      if (b.requires_grad()) {
        double* gb = b.grad().data();
        const double* pa = a.data().data();
        for (std::size_t i = 0; i < m; ++i) {
          const double* grow = g + i * n;
          for (std::size_t p = 0; p < k; ++p) {
            const double av = pa[i * k + p];
            double* gbrow = gb + p * n;
            for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
          }
        }
      }
    });
  }
  return out;
}

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  const bool track = detail::tracks(tape, {&a, &b});
  Tensor out(a.shape(), 0.0, track);
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
  if (track) {
    tape.record(out, [a, b, out]() {
      const auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

// x[..., d] + bias[d]; the only broadcast the core supports.
inline Tensor add_bias(Tape& tape, const Tensor& x, const Tensor& bias) {
  if (bias.rank() != 1 || x.rank() == 0 || x.shape().back() != bias.dim(0)) {
    throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " does not match last axis of " +
                     shape_str(x.shape()));
  }
  const std::size_t d = bias.dim(0);
  const bool track = detail::tracks(tape, {&x, &bias});
  Tensor out(x.shape(), 0.0, track);
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] + bias[i % d];
  if (track) {
    tape.record(out, [x, bias, out, d]() {
      const auto g = out.grad();
      if (x.requires_grad()) {
        auto gx = x.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (bias.requires_grad()) {
        auto gb = bias.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i];
      }
    });
  }
  return out;
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  const bool track = detail::tracks(tape, {&a, &b});
  Tensor out(a.shape(), 0.0, track);
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
  if (track) {
    tape.record(out, [a, b, out]() {
      const auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
      }
    });
  }
  return out;
}

inline Tensor scale(Tape& tape, const Tensor& x, double s) {
  const bool track = detail::tracks(tape, {&x});
  Tensor out(x.shape(), 0.0, track);
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] * s;
  if (track) {
    tape.record(out, [x, out, s]() {
      const auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s;
    });
  }
  return out;
}

inline Tensor sum(Tape& tape, const Tensor& x) {
  const bool track = detail::tracks(tape, {&x});
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor out = Tensor::scalar(s, track);
  if (track) {
    tape.record(out, [x, out]() {
      const double g = out.grad()[0];
      for (double& v : x.grad()) v += g;
    });
  }
  return out;
}

inline Tensor transpose(Tape& tape, const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("transpose needs a matrix, got " + shape_str(x.shape()));
  const std::size_t r = x.dim(0), c = x.dim(1);
  const bool track = detail::tracks(tape, {&x});
  Tensor out({c, r}, 0.0, track);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  if (track) {
    tape.record(out, [x, out, r, c]() {
      const auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
    });
  }
  return out;
}

inline Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  const bool track = detail::tracks(tape, {&x});
  Tensor out(std::move(shape), x.values(), track);
  if (track) {
    tape.record(out, [x, out]() {
      const auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

// Concatenation along `axis`; all other extents must agree.
inline Tensor concat(Tape& tape, const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of no tensors");
  const Shape& first = parts.front().shape();
  const int r = static_cast<int>(first.size());
  const int ax = axis < 0 ? axis + r : axis;
  if (ax < 0 || ax >= r) throw ShapeError("concat: axis out of range");
  Shape out_shape = first;
  out_shape[static_cast<std::size_t>(ax)] = 0;
  bool track = false;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != first.size()) throw ShapeError("concat: rank mismatch");
    out_shape[static_cast<std::size_t>(ax)] += s[static_cast<std::size_t>(ax)];
    s[static_cast<std::size_t>(ax)] = first[static_cast<std::size_t>(ax)];
    if (s != first) {
      throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(parts.front().shape()));
    }
    track = track || p.requires_grad();
  }
  track = track && tape.recording();
  const auto ov = detail::axis_view(out_shape, ax);
  Tensor out(out_shape, 0.0, track);
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const auto pv = detail::axis_view(p.shape(), ax);
    for (std::size_t o = 0; o < pv.outer; ++o)
      for (std::size_t e = 0; e < pv.extent; ++e)
        for (std::size_t i = 0; i < pv.inner; ++i)
          out[(o * ov.extent + offset + e) * ov.inner + i] = p[(o * pv.extent + e) * pv.inner + i];
    offsets.push_back(offset);
    offset += pv.extent;
  }
  if (track) {
    tape.record(out, [parts, out, offsets, ov, ax]() {
      const auto g = out.grad();
      for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto& p = parts[k];
        if (!p.requires_grad()) continue;
        const auto pv = detail::axis_view(p.shape(), ax);
        auto gp = p.grad();
        for (std::size_t o = 0; o < pv.outer; ++o)
          for (std::size_t e = 0; e < pv.extent; ++e)
            for (std::size_t i = 0; i < pv.inner; ++i)
              gp[(o * pv.extent + e) * pv.inner + i] += g[(o * ov.extent + offsets[k] + e) * ov.inner + i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalisation.

inline Tensor softmax(Tape& tape, const Tensor& x, int axis = -1) {
  const auto v = detail::axis_view(x.shape(), axis);
  const bool track = detail::tracks(tape, {&x});
  Tensor out(x.shape(), 0.0, track);
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      const auto idx = [&](std::size_t e) { return (o * v.extent + e) * v.inner + i; };
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t e = 0; e < v.extent; ++e) mx = std::max(mx, x[idx(e)]);
      double z = 0.0;
      for (std::size_t e = 0; e < v.extent; ++e) {
        const double ex = std::exp(x[idx(e)] - mx);
        out[idx(e)] = ex;
        z += ex;
      }
      for (std::size_t e = 0; e < v.extent; ++e) out[idx(e)] /= z;
    }
  }
  if (track) {
    tape.record(out, [x, out, v]() {
      const auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t i = 0; i < v.inner; ++i) {
          const auto idx = [&](std::size_t e) { return (o * v.extent + e) * v.inner + i; };
          double dot = 0.0;
          for (std::size_t e = 0; e < v.extent; ++e) dot += g[idx(e)] * out[idx(e)];
          for (std::size_t e = 0; e < v.extent; ++e) gx[idx(e)] += out[idx(e)] * (g[idx(e)] - dot);
        }
      }
    });
  }
  return out;
}

inline Tensor log_softmax(Tape& tape, const Tensor& x, int axis = -1) {
  const auto v = detail::axis_view(x.shape(), axis);
  const bool track = detail::tracks(tape, {&x});
  Tensor out(x.shape(), 0.0, track);
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      const auto idx = [&](std::size_t e) { return (o * v.extent + e) * v.inner + i; };
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t e = 0; e < v.extent; ++e) mx = std::max(mx, x[idx(e)]);
      double z = 0.0;
      for (std::size_t e = 0; e < v.extent; ++e) z += std::exp(x[idx(e)] - mx);
      const double lse = mx + std::log(z);
      for (std::size_t e = 0; e < v.extent; ++e) out[idx(e)] = x[idx(e)] - lse;
    }
  }
  if (track) {
    tape.record(out, [x, out, v]() {
      const auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t i = 0; i < v.inner; ++i) {
          const auto idx = [&](std::size_t e) { return (o * v.extent + e) * v.inner + i; };
          double gs = 0.0;
          for (std::size_t e = 0; e < v.extent; ++e) gs += g[idx(e)];
          for (std::size_t e = 0; e < v.extent; ++e) gx[idx(e)] += g[idx(e)] - std::exp(out[idx(e)]) * gs;
        }
      }
    });
  }
  return out;
}

// Normalises each vector along the last axis with the population variance.
inline Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-12) {
  if (x.rank() == 0 || gamma.rank() != 1 || beta.rank() != 1 || gamma.dim(0) != x.shape().back() ||
      beta.dim(0) != x.shape().back()) {
    throw ShapeError("layer_norm: gamma " + shape_str(gamma.shape()) + " / beta " + shape_str(beta.shape()) +
                     " do not match " + shape_str(x.shape()));
  }
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.numel() / d;
  const bool track = detail::tracks(tape, {&x, &gamma, &beta});
  Tensor out(x.shape(), 0.0, track);
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* px = x.data().data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += px[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (px[j] - mean) * (px[j] - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (px[j] - mean) * is;
      out[r * d + j] = xhat[r * d + j] * gamma[j] + beta[j];
    }
  }
  if (track) {
    tape.record(out, [x, gamma, beta, out, xhat = std::move(xhat), inv_std = std::move(inv_std), d, rows]() {
      const auto g = out.grad();
      if (gamma.requires_grad()) {
        auto gg = gamma.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gg[i % d] += g[i] * xhat[i];
      }
      if (beta.requires_grad()) {
        auto gb = beta.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i];
      }
      if (x.requires_grad()) {
        auto gx = x.grad();
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double dy = g[r * d + j] * gamma[j];
            sum_dy += dy;
            sum_dy_xhat += dy * xhat[r * d + j];
          }
          for (std::size_t j = 0; j < d; ++j) {
            const double dy = g[r * d + j] * gamma[j];
            gx[r * d + j] += inv_std[r] * (dy - inv_d * sum_dy - xhat[r * d + j] * inv_d * sum_dy_xhat);
          }
        }
      }
    });
  }
  return out;
}

// Exact (erf) GELU.
inline Tensor gelu(Tape& tape, const Tensor& x) {
  const bool track = detail::tracks(tape, {&x});
  Tensor out(x.shape(), 0.0, track);
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * inv_sqrt2));
  if (track) {
    tape.record(out, [x, out]() {
      constexpr double inv_sqrt2pi = 0.39894228040143267794;
      const auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = x[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
        gx[i] += g[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

// Mean over rows of x[L x d] whose mask entry is non-zero.
inline Tensor mean_pool(Tape& tape, const Tensor& x, const Tensor& mask) {
  if (x.rank() != 2 || mask.rank() != 1 || mask.dim(0) != x.dim(0)) {
    throw ShapeError("mean_pool: mask " + shape_str(mask.shape()) + " does not match " + shape_str(x.shape()));
  }
  const std::size_t len = x.dim(0), d = x.dim(1);
  std::size_t kept = 0;
  for (std::size_t i = 0; i < len; ++i) kept += mask[i] != 0.0;
  if (kept == 0) throw Error("mean_pool: mask selects no positions");
  const double inv = 1.0 / static_cast<double>(kept);
  const bool track = detail::tracks(tape, {&x});
  Tensor out({d}, 0.0, track);
  for (std::size_t i = 0; i < len; ++i) {
    if (mask[i] == 0.0) continue;
    for (std::size_t j = 0; j < d; ++j) out[j] += x[i * d + j];
  }
  for (std::size_t j = 0; j < d; ++j) out[j] *= inv;
  if (track) {
    tape.record(out, [x, mask, out, len, d, inv]() {
      const auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < len; ++i) {
        if (mask[i] == 0.0) continue;
        for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += g[j] * inv;
      }
    });
  }
  return out;
}

inline Tensor embedding_lookup(Tape& tape, const Tensor& table, std::span<const std::int32_t> ids) {
  if (table.rank() != 2) throw ShapeError("embedding table must be a matrix");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  for (auto id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw ShapeError("embedding index " + std::to_string(id) + " out of range for table " +
                       shape_str(table.shape()));
    }
  }
  const bool track = detail::tracks(tape, {&table});
  Tensor out({ids.size(), d}, 0.0, track);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto row = static_cast<std::size_t>(ids[i]);
    std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(row * d), d,
                out.data().begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  if (track) {
    tape.record(out, [table, out, ids = std::vector<std::int32_t>(ids.begin(), ids.end()), d]() {
      const auto g = out.grad();
      auto gt = table.grad();
      for (std::size_t i = 0; i < ids.size(); ++i) {
        const auto row = static_cast<std::size_t>(ids[i]);
        for (std::size_t j = 0; j < d; ++j) gt[row * d + j] += g[i * d + j];
      }
    });
  }
  return out;
}

// Inverted dropout. rate == 0 or a null rng returns x unchanged.
inline Tensor dropout(Tape& tape, const Tensor& x, double rate, Rng* rng) {
  if (rate <= 0.0 || rng == nullptr) return x;
  if (rate >= 1.0) throw Error("dropout rate must be below 1");
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.numel());
  for (double& m : mask) m = rng->uniform() < rate ? 0.0 : keep_scale;
  const bool track = detail::tracks(tape, {&x});
  Tensor out(x.shape(), 0.0, track);
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] * mask[i];
  if (track) {
    tape.record(out, [x, out, mask = std::move(mask)]() {
      const auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
    });
  }
  return out;
}

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// log(1 + exp(z)) without overflow.
inline double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

}  // namespace protgo
