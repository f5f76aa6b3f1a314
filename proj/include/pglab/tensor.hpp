#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace pglab {

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class AutodiffError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Floor applied before taking the log of a probability; masked softmax and
// the pointer mixture produce exact zeros that must survive log().
inline constexpr double kLogFloor = 1e-12;

namespace detail {

struct TensorData {
  std::vector<int> shape;
  std::vector<double> values;
  std::vector<double> grad;  // allocated lazily, same length as values
  bool requires_grad = false;

  bool has_grad() const { return !grad.empty(); }
  std::vector<double>& grad_ref() {
    if (grad.empty()) grad.assign(values.size(), 0.0);
    return grad;
  }
};

inline std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_count(const std::vector<int>& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

}  // namespace detail

// Dense 64-bit float tensor with shared storage. Rank is 1 or 2; scalars are
// shape [1]. Copying a Tensor aliases the same storage.
class Tensor {
 public:
  Tensor() = default;

  Tensor(std::vector<int> shape, std::vector<double> values, bool requires_grad = false) {
    if (detail::shape_count(shape) != values.size()) {
      throw ShapeError("tensor: shape " + detail::shape_str(shape) + " does not match " +
                       std::to_string(values.size()) + " values");
    }
    d_ = std::make_shared<detail::TensorData>();
    d_->shape = std::move(shape);
    d_->values = std::move(values);
    d_->requires_grad = requires_grad;
  }

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    std::size_t n = detail::shape_count(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(std::vector<int> shape, double v, bool requires_grad = false) {
    std::size_t n = detail::shape_count(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v), requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor({1}, {v}, requires_grad);
  }

  bool defined() const { return d_ != nullptr; }
  const std::vector<int>& shape() const { return d_->shape; }
  int dim(int i) const { return d_->shape[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(d_->shape.size()); }
  std::size_t size() const { return d_->values.size(); }

  const std::vector<double>& values() const { return d_->values; }
  std::vector<double>& values() { return d_->values; }
  double value(std::size_t i = 0) const { return d_->values[i]; }
  double& value(std::size_t i = 0) { return d_->values[i]; }
  double at(int r, int c) const {
    return d_->values[static_cast<std::size_t>(r) * static_cast<std::size_t>(d_->shape[1]) +
                      static_cast<std::size_t>(c)];
  }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool b) { d_->requires_grad = b; }

  bool has_grad() const { return d_->has_grad(); }
  std::vector<double>& grad() { return d_->grad_ref(); }
  const std::vector<double>& grad() const { return d_->grad; }
  void zero_grad() {
    if (d_->has_grad()) std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
  }

  detail::TensorData* data_ptr() const { return d_.get(); }
  const std::shared_ptr<detail::TensorData>& storage() const { return d_; }

 private:
  std::shared_ptr<detail::TensorData> d_;
};

// Define-by-run tape. While a Graph is alive it is the recording target for
// every primitive executed on its thread; destruction pops it. Adjoints are
// replayed in the exact reverse of execution order.
class Graph {
 public:
  Graph() { stack().push_back(this); }
  ~Graph() { stack().pop_back(); }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  static Graph* current() {
    auto& s = stack();
    return s.empty() ? nullptr : s.back();
  }

  void record(std::function<void()> fn) { tape_.push_back(std::move(fn)); }

  std::size_t node_count() const { return tape_.size(); }

  // Seeds d(loss)/d(loss) = 1 and replays all recorded adjoints.
  void backward(const Tensor& loss) {
    if (loss.size() != 1) {
      throw AutodiffError("backward: loss must be scalar, got shape " +
                          detail::shape_str(loss.shape()));
    }
    loss.data_ptr()->grad_ref()[0] += 1.0;
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
  }

 private:
  static std::vector<Graph*>& stack() {
    thread_local std::vector<Graph*> s;
    return s;
  }
  std::vector<std::function<void()>> tape_;
};

namespace detail {

using Data = std::shared_ptr<TensorData>;

inline bool recording(const Tensor& a) {
  return Graph::current() != nullptr && a.requires_grad();
}
inline bool recording(const Tensor& a, const Tensor& b) {
  return Graph::current() != nullptr && (a.requires_grad() || b.requires_grad());
}

inline void mark_and_record(Tensor& out, std::function<void()> fn) {
  out.set_requires_grad(true);
  Graph::current()->record(std::move(fn));
}

[[noreturn]] inline void shape_fail(const char* op, const Tensor& a, const Tensor& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                   shape_str(b.shape()));
}

[[noreturn]] inline void shape_fail(const char* op, const Tensor& a) {
  throw ShapeError(std::string(op) + ": unsupported shape " + shape_str(a.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitives. Each records its adjoint on the current Graph when one is
// installed and any input requires gradients.
// ---------------------------------------------------------------------------

// [m,k] x [k,n] -> [m,n]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) detail::shape_fail("matmul", a, b);
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int p = 0; p < k; ++p) {
      const double av = a.values()[i * k + p];
      if (av == 0.0) continue;
      for (int j = 0; j < n; ++j) out[i * n + j] += av * b.values()[p * n + j];
    }
  Tensor y({m, n}, std::move(out));
  if (detail::recording(a, b)) {
    auto ad = a.storage(), bd = b.storage(), yd = y.storage();
    detail::mark_and_record(y, [ad, bd, yd, m, k, n] {
      if (!yd->has_grad()) return;
      const auto& g = yd->grad;
      if (ad->requires_grad) {
        auto& ga = ad->grad_ref();
        for (int i = 0; i < m; ++i)
          for (int p = 0; p < k; ++p) {
            double acc = 0.0;
            for (int j = 0; j < n; ++j) acc += g[i * n + j] * bd->values[p * n + j];
            ga[i * k + p] += acc;
          }
      }
      if (bd->requires_grad) {
        auto& gb = bd->grad_ref();
        for (int i = 0; i < m; ++i)
          for (int p = 0; p < k; ++p) {
            const double av = ad->values[i * k + p];
            if (av == 0.0) continue;
            for (int j = 0; j < n; ++j) gb[p * n + j] += av * g[i * n + j];
          }
      }
    });
  }
  return y;
}

// [m,k] x [k] -> [m]
inline Tensor matvec(const Tensor& a, const Tensor& x) {
  if (a.rank() != 2 || x.rank() != 1 || a.dim(1) != x.dim(0)) detail::shape_fail("matvec", a, x);
  const int m = a.dim(0), k = a.dim(1);
  std::vector<double> out(static_cast<std::size_t>(m), 0.0);
  for (int i = 0; i < m; ++i) {
    double acc = 0.0;
    for (int p = 0; p < k; ++p) acc += a.values()[i * k + p] * x.values()[p];
    out[i] = acc;
  }
  Tensor y({m}, std::move(out));
  if (detail::recording(a, x)) {
    auto ad = a.storage(), xd = x.storage(), yd = y.storage();
    detail::mark_and_record(y, [ad, xd, yd, m, k] {
      if (!yd->has_grad()) return;
      const auto& g = yd->grad;
      if (ad->requires_grad) {
        auto& ga = ad->grad_ref();
        for (int i = 0; i < m; ++i) {
          const double gi = g[i];
          if (gi == 0.0) continue;
          for (int p = 0; p < k; ++p) ga[i * k + p] += gi * xd->values[p];
        }
      }
      if (xd->requires_grad) {
        auto& gx = xd->grad_ref();
        for (int i = 0; i < m; ++i) {
          const double gi = g[i];
          if (gi == 0.0) continue;
          for (int p = 0; p < k; ++p) gx[p] += gi * ad->values[i * k + p];
        }
      }
    });
  }
  return y;
}

// [m] x [m,n] -> [n]
inline Tensor vecmat(const Tensor& x, const Tensor& a) {
  if (x.rank() != 1 || a.rank() != 2 || x.dim(0) != a.dim(0)) detail::shape_fail("vecmat", x, a);
  const int m = a.dim(0), n = a.dim(1);
  std::vector<double> out(static_cast<std::size_t>(n), 0.0);
  for (int i = 0; i < m; ++i) {
    const double xi = x.values()[i];
    if (xi == 0.0) continue;
    for (int j = 0; j < n; ++j) out[j] += xi * a.values()[i * n + j];
  }
  Tensor y({n}, std::move(out));
  if (detail::recording(x, a)) {
    auto xd = x.storage(), ad = a.storage(), yd = y.storage();
    detail::mark_and_record(y, [xd, ad, yd, m, n] {
      if (!yd->has_grad()) return;
      const auto& g = yd->grad;
      if (xd->requires_grad) {
        auto& gx = xd->grad_ref();
        for (int i = 0; i < m; ++i) {
          double acc = 0.0;
          for (int j = 0; j < n; ++j) acc += g[j] * ad->values[i * n + j];
          gx[i] += acc;
        }
      }
      if (ad->requires_grad) {
        auto& ga = ad->grad_ref();
        for (int i = 0; i < m; ++i) {
          const double xi = xd->values[i];
          if (xi == 0.0) continue;
          for (int j = 0; j < n; ++j) ga[i * n + j] += xi * g[j];
        }
      }
    });
  }
  return y;
}

// [m] x [n] -> [m,n]
inline Tensor outer(const Tensor& x, const Tensor& ycol) {
  if (x.rank() != 1 || ycol.rank() != 1) detail::shape_fail("outer", x, ycol);
  const int m = x.dim(0), n = ycol.dim(0);
  std::vector<double> out(static_cast<std::size_t>(m) * n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[i * n + j] = x.values()[i] * ycol.values()[j];
  Tensor y({m, n}, std::move(out));
  if (detail::recording(x, ycol)) {
    auto xd = x.storage(), cd = ycol.storage(), yd = y.storage();
    detail::mark_and_record(y, [xd, cd, yd, m, n] {
      if (!yd->has_grad()) return;
      const auto& g = yd->grad;
      if (xd->requires_grad) {
        auto& gx = xd->grad_ref();
        for (int i = 0; i < m; ++i) {
          double acc = 0.0;
          for (int j = 0; j < n; ++j) acc += g[i * n + j] * cd->values[j];
          gx[i] += acc;
        }
      }
      if (cd->requires_grad) {
        auto& gc = cd->grad_ref();
        for (int i = 0; i < m; ++i) {
          const double xi = xd->values[i];
          if (xi == 0.0) continue;
          for (int j = 0; j < n; ++j) gc[j] += xi * g[i * n + j];
        }
      }
    });
  }
  return y;
}

// Elementwise add. b may also be a bias vector broadcast over the rows of a
// 2-D a (last-axis broadcast), or a scalar broadcast over all of a.
inline Tensor add(const Tensor& a, const Tensor& b) {
  enum class Mode { Same, Bias, Scalar } mode;
  if (a.shape() == b.shape()) {
    mode = Mode::Same;
  } else if (b.size() == 1) {
    mode = Mode::Scalar;
  } else if (a.rank() == 2 && b.rank() == 1 && a.dim(1) == b.dim(0)) {
    mode = Mode::Bias;
  } else {
    detail::shape_fail("add", a, b);
  }
  std::vector<double> out(a.size());
  const int cols = a.rank() == 2 ? a.dim(1) : static_cast<int>(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double bv = mode == Mode::Same ? b.values()[i]
                      : mode == Mode::Scalar ? b.values()[0]
                                             : b.values()[i % static_cast<std::size_t>(cols)];
    out[i] = a.values()[i] + bv;
  }
  Tensor y(a.shape(), std::move(out));
  if (detail::recording(a, b)) {
    auto ad = a.storage(), bd = b.storage(), yd = y.storage();
    detail::mark_and_record(y, [ad, bd, yd, mode, cols] {
      if (!yd->has_grad()) return;
      const auto& g = yd->grad;
      if (ad->requires_grad) {
        auto& ga = ad->grad_ref();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (bd->requires_grad) {
        auto& gb = bd->grad_ref();
        for (std::size_t i = 0; i < g.size(); ++i) {
          const std::size_t bi = mode == Mode::Same ? i
                                 : mode == Mode::Scalar ? 0
                                                        : i % static_cast<std::size_t>(cols);
          gb[bi] += g[i];
        }
      }
    });
  }
  return y;
}

// Elementwise multiply; either operand may be a scalar broadcast over the other.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (!(a.shape() == b.shape() || a.size() == 1 || b.size() == 1)) detail::shape_fail("mul", a, b);
  const Tensor& big = a.size() >= b.size() ? a : b;
  std::vector<double> out(big.size());
  for (std::size_t i = 0; i < big.size(); ++i) {
    const double av = a.size() == 1 ? a.values()[0] : a.values()[i];
    const double bv = b.size() == 1 ? b.values()[0] : b.values()[i];
    out[i] = av * bv;
  }
  Tensor y(big.shape(), std::move(out));
  if (detail::recording(a, b)) {
    auto ad = a.storage(), bd = b.storage(), yd = y.storage();
    detail::mark_and_record(y, [ad, bd, yd] {
      if (!yd->has_grad()) return;
      const auto& g = yd->grad;
      const bool a_scalar = ad->values.size() == 1 && g.size() > 1;
      const bool b_scalar = bd->values.size() == 1 && g.size() > 1;
      if (ad->requires_grad) {
        auto& ga = ad->grad_ref();
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double bv = b_scalar ? bd->values[0] : bd->values[i];
          ga[a_scalar ? 0 : i] += g[i] * bv;
        }
      }
      if (bd->requires_grad) {
        auto& gb = bd->grad_ref();
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double av = a_scalar ? ad->values[0] : ad->values[i];
          gb[b_scalar ? 0 : i] += g[i] * av;
        }
      }
    });
  }
  return y;
}

// Elementwise minimum. On ties the adjoint routes to the first argument.
inline Tensor minimum(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) detail::shape_fail("minimum", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = std::min(a.values()[i], b.values()[i]);
  Tensor y(a.shape(), std::move(out));
  if (detail::recording(a, b)) {
    auto ad = a.storage(), bd = b.storage(), yd = y.storage();
    detail::mark_and_record(y, [ad, bd, yd] {
      if (!yd->has_grad()) return;
      const auto& g = yd->grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (ad->values[i] <= bd->values[i]) {
          if (ad->requires_grad) ad->grad_ref()[i] += g[i];
        } else {
          if (bd->requires_grad) bd->grad_ref()[i] += g[i];
        }
      }
    });
  }
  return y;
}

namespace detail {

template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& x, Fwd fwd, Bwd bwd_factor) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = fwd(x.values()[i]);
  Tensor y(x.shape(), std::move(out));
  if (recording(x)) {
    auto xd = x.storage(), yd = y.storage();
    mark_and_record(y, [xd, yd, bwd_factor] {
      if (!yd->has_grad()) return;
      auto& gx = xd->grad_ref();
      for (std::size_t i = 0; i < gx.size(); ++i)
        gx[i] += yd->grad[i] * bwd_factor(xd->values[i], yd->values[i]);
    });
  }
  return y;
}

}  // namespace detail

inline Tensor tanh(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
  for (double v : x.values()) {
    if (!(v > 0.0)) throw AutodiffError("log: non-positive value " + std::to_string(v));
  }
  return detail::unary_op(
      x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

// log(max(x, kLogFloor)); below the floor the derivative is zero.
inline Tensor log_clamped(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return std::log(std::max(v, kLogFloor)); },
      [](double v, double) { return v > kLogFloor ? 1.0 / v : 0.0; });
}

inline Tensor negate(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, negate(b)); }

// Multiply by a plain constant.
inline Tensor scale(const Tensor& x, double c) {
  return detail::unary_op(
      x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

// Full reduction to a scalar.
inline Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  Tensor y = Tensor::scalar(acc);
  if (detail::recording(x)) {
    auto xd = x.storage(), yd = y.storage();
    detail::mark_and_record(y, [xd, yd] {
      if (!yd->has_grad()) return;
      const double g = yd->grad[0];
      auto& gx = xd->grad_ref();
      for (double& v : gx) v += g;
    });
  }
  return y;
}

// [m,n] -> [n], summing over rows.
inline Tensor sum_rows(const Tensor& x) {
  if (x.rank() != 2) detail::shape_fail("sum_rows", x);
  const int m = x.dim(0), n = x.dim(1);
  std::vector<double> out(static_cast<std::size_t>(n), 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[j] += x.values()[i * n + j];
  Tensor y({n}, std::move(out));
  if (detail::recording(x)) {
    auto xd = x.storage(), yd = y.storage();
    detail::mark_and_record(y, [xd, yd, m, n] {
      if (!yd->has_grad()) return;
      auto& gx = xd->grad_ref();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) gx[i * n + j] += yd->grad[j];
    });
  }
  return y;
}

// Concatenation of 1-D tensors.
inline Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  std::vector<double> out;
  bool any_grad = false;
  for (const Tensor& p : parts) {
    if (p.rank() != 1) detail::shape_fail("concat", p);
    out.insert(out.end(), p.values().begin(), p.values().end());
    any_grad = any_grad || p.requires_grad();
  }
  const int total = static_cast<int>(out.size());
  Tensor y({total}, std::move(out));
  if (Graph::current() && any_grad) {
    std::vector<detail::Data> srcs;
    srcs.reserve(parts.size());
    for (const Tensor& p : parts) srcs.push_back(p.storage());
    auto yd = y.storage();
    detail::mark_and_record(y, [srcs, yd] {
      if (!yd->has_grad()) return;
      std::size_t off = 0;
      for (const auto& s : srcs) {
        if (s->requires_grad) {
          auto& gs = s->grad_ref();
          for (std::size_t i = 0; i < gs.size(); ++i) gs[i] += yd->grad[off + i];
        }
        off += s->values.size();
      }
    });
  }
  return y;
}

inline Tensor concat(const Tensor& a, const Tensor& b) { return concat(std::vector<Tensor>{a, b}); }

// Contiguous range [start, start+len) of a 1-D tensor.
inline Tensor slice(const Tensor& x, int start, int len) {
  if (x.rank() != 1 || start < 0 || len < 0 || start + len > x.dim(0)) {
    throw ShapeError("slice: range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") out of " + detail::shape_str(x.shape()));
  }
  std::vector<double> out(x.values().begin() + start, x.values().begin() + start + len);
  Tensor y({len}, std::move(out));
  if (detail::recording(x)) {
    auto xd = x.storage(), yd = y.storage();
    detail::mark_and_record(y, [xd, yd, start, len] {
      if (!yd->has_grad()) return;
      auto& gx = xd->grad_ref();
      for (int i = 0; i < len; ++i) gx[start + i] += yd->grad[i];
    });
  }
  return y;
}

// Scalar x[i] -> [1].
inline Tensor pick(const Tensor& x, int i) {
  if (x.rank() != 1 || i < 0 || i >= x.dim(0)) {
    throw ShapeError("pick: index " + std::to_string(i) + " out of " +
                     detail::shape_str(x.shape()));
  }
  Tensor y = Tensor::scalar(x.values()[static_cast<std::size_t>(i)]);
  if (detail::recording(x)) {
    auto xd = x.storage(), yd = y.storage();
    detail::mark_and_record(y, [xd, yd, i] {
      if (!yd->has_grad()) return;
      xd->grad_ref()[static_cast<std::size_t>(i)] += yd->grad[0];
    });
  }
  return y;
}

// Row i of a 2-D tensor (embedding lookup).
inline Tensor row(const Tensor& a, int i) {
  if (a.rank() != 2 || i < 0 || i >= a.dim(0)) {
    throw ShapeError("row: index " + std::to_string(i) + " out of " +
                     detail::shape_str(a.shape()));
  }
  const int n = a.dim(1);
  std::vector<double> out(a.values().begin() + static_cast<std::size_t>(i) * n,
                          a.values().begin() + static_cast<std::size_t>(i + 1) * n);
  Tensor y({n}, std::move(out));
  if (detail::recording(a)) {
    auto ad = a.storage(), yd = y.storage();
    detail::mark_and_record(y, [ad, yd, i, n] {
      if (!yd->has_grad()) return;
      auto& ga = ad->grad_ref();
      for (int j = 0; j < n; ++j) ga[static_cast<std::size_t>(i) * n + j] += yd->grad[j];
    });
  }
  return y;
}

// Softmax over a 1-D tensor; positions with mask[i] == 0 get exactly 0 and the
// per-row max of the unmasked entries is subtracted before exponentiation.
// An empty mask means all positions are visible.
inline Tensor masked_softmax(const Tensor& x, const std::vector<std::uint8_t>& mask = {}) {
  if (x.rank() != 1) detail::shape_fail("masked_softmax", x);
  const std::size_t n = x.size();
  if (!mask.empty() && mask.size() != n) {
    throw ShapeError("masked_softmax: mask size " + std::to_string(mask.size()) + " vs " +
                     detail::shape_str(x.shape()));
  }
  auto visible = [&mask](std::size_t i) { return mask.empty() || mask[i] != 0; };
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i)
    if (visible(i)) mx = std::max(mx, x.values()[i]);
  if (!std::isfinite(mx)) throw AutodiffError("masked_softmax: all positions masked");
  std::vector<double> out(n, 0.0);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!visible(i)) continue;
    out[i] = std::exp(x.values()[i] - mx);
    z += out[i];
  }
  for (std::size_t i = 0; i < n; ++i) out[i] /= z;
  Tensor y(x.shape(), std::move(out));
  if (detail::recording(x)) {
    auto xd = x.storage(), yd = y.storage();
    detail::mark_and_record(y, [xd, yd, mask] {
      if (!yd->has_grad()) return;
      const auto& g = yd->grad;
      const auto& yv = yd->values;
      double dot = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * yv[i];
      auto& gx = xd->grad_ref();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (!mask.empty() && mask[i] == 0) continue;
        gx[i] += yv[i] * (g[i] - dot);
      }
    });
  }
  return y;
}

// Accumulates probs[i] into out[index_map[i]]; mass on repeated indices sums.
inline Tensor scatter_add(const Tensor& probs, const std::vector<int>& index_map, int out_size) {
  if (probs.rank() != 1 || static_cast<std::size_t>(probs.dim(0)) != index_map.size()) {
    throw ShapeError("scatter_add: " + detail::shape_str(probs.shape()) + " vs " +
                     std::to_string(index_map.size()) + " indices");
  }
  std::vector<double> out(static_cast<std::size_t>(out_size), 0.0);
  for (std::size_t i = 0; i < index_map.size(); ++i) {
    const int k = index_map[i];
    if (k < 0 || k >= out_size) {
      throw ShapeError("scatter_add: index " + std::to_string(k) + " out of [0," +
                       std::to_string(out_size) + ")");
    }
    out[static_cast<std::size_t>(k)] += probs.values()[i];
  }
  Tensor y({out_size}, std::move(out));
  if (detail::recording(probs)) {
    auto pd = probs.storage(), yd = y.storage();
    detail::mark_and_record(y, [pd, yd, index_map] {
      if (!yd->has_grad()) return;
      auto& gp = pd->grad_ref();
      for (std::size_t i = 0; i < index_map.size(); ++i)
        gp[i] += yd->grad[static_cast<std::size_t>(index_map[i])];
    });
  }
  return y;
}

// Stacks T same-length vectors into [T, n].
inline Tensor stack(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw ShapeError("stack: no inputs");
  const int n = rows.front().dim(0);
  std::vector<double> out;
  out.reserve(rows.size() * static_cast<std::size_t>(n));
  bool any_grad = false;
  for (const Tensor& r : rows) {
    if (r.rank() != 1 || r.dim(0) != n) detail::shape_fail("stack", rows.front(), r);
    out.insert(out.end(), r.values().begin(), r.values().end());
    any_grad = any_grad || r.requires_grad();
  }
  Tensor y({static_cast<int>(rows.size()), n}, std::move(out));
  if (Graph::current() && any_grad) {
    std::vector<detail::Data> srcs;
    srcs.reserve(rows.size());
    for (const Tensor& r : rows) srcs.push_back(r.storage());
    auto yd = y.storage();
    detail::mark_and_record(y, [srcs, yd, n] {
      if (!yd->has_grad()) return;
      for (std::size_t t = 0; t < srcs.size(); ++t) {
        if (!srcs[t]->requires_grad) continue;
        auto& gs = srcs[t]->grad_ref();
        for (int j = 0; j < n; ++j) gs[j] += yd->grad[t * static_cast<std::size_t>(n) + j];
      }
    });
  }
  return y;
}

// Forward-identical copy that propagates zero adjoint to x.
inline Tensor stop_gradient(const Tensor& x) {
  return Tensor(x.shape(), x.values(), false);
}

}  // namespace pglab
