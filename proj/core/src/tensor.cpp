#include "tevit/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>
#include <utility>

namespace tevit {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ")";
  return os.str();
}

std::vector<std::int64_t> row_major_strides(const Shape& shape) {
  std::vector<std::int64_t> strides(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
    strides[static_cast<std::size_t>(i)] =
        strides[static_cast<std::size_t>(i) + 1] * shape[static_cast<std::size_t>(i) + 1];
  }
  return strides;
}

// ---- Tensor ----

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto s = std::make_shared<Storage>();
  s->data.assign(static_cast<std::size_t>(numel(shape)), 0.0);
  s->shape = std::move(shape);
  s->requires_grad = requires_grad;
  return Tensor(std::move(s));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.s_->data.begin(), t.s_->data.end(), value);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  if (numel(shape) != static_cast<std::int64_t>(data.size())) {
    throw ShapeError("from_data: shape " + shape_str(shape) + " does not match data length " +
                     std::to_string(data.size()));
  }
  auto s = std::make_shared<Storage>();
  s->shape = std::move(shape);
  s->data = std::move(data);
  s->requires_grad = requires_grad;
  return Tensor(std::move(s));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({}, {value}, requires_grad);
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("item() requires a single-element tensor, got shape " + shape_str(shape()));
  }
  return s_->data[0];
}

void Tensor::set_requires_grad(bool rg) {
  s_->requires_grad = rg;
  if (!rg) s_->grad.clear();
}

std::span<double> Tensor::grad() {
  if (!s_->requires_grad) {
    throw ContractError("grad() on a tensor without requires_grad");
  }
  if (s_->grad.empty()) s_->grad.assign(s_->data.size(), 0.0);
  return {s_->grad.data(), s_->grad.size()};
}

std::span<const double> Tensor::grad() const {
  if (s_->grad.empty()) {
    throw ContractError("grad accessed before backward populated it");
  }
  return {s_->grad.data(), s_->grad.size()};
}

void Tensor::zero_grad() {
  if (s_) std::fill(s_->grad.begin(), s_->grad.end(), 0.0);
}

Tensor Tensor::detached() const {
  auto s = std::make_shared<Storage>();
  s->shape = s_->shape;
  s->data = s_->data;
  s->requires_grad = false;
  return Tensor(std::move(s));
}

// ---- tape / flop scopes ----

namespace {
thread_local GradTape* g_tape = nullptr;
thread_local FlopCounter* g_flops = nullptr;
}  // namespace

GradTape* active_tape() { return g_tape; }

TapeScope::TapeScope(GradTape& tape) : prev_(g_tape) { g_tape = &tape; }
TapeScope::~TapeScope() { g_tape = prev_; }

void GradTape::record(const char* label, std::vector<const void*> input_ids,
                      const void* output_id, std::function<void()> backward_fn) {
  nodes_.push_back(Node{label, std::move(input_ids), output_id, std::move(backward_fn)});
}

void GradTape::clear() { nodes_.clear(); }

void GradTape::run_backward() {
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    it->backward();
  }
}

void backward(Tensor& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!g_tape) {
    throw ContractError("backward called with no active tape");
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward called on a loss that does not require grad");
  }
  loss.grad()[0] += 1.0;
  g_tape->run_backward();
}

FlopCounter* active_flop_counter() { return g_flops; }

FlopScope::FlopScope(FlopCounter& counter) : prev_(g_flops) { g_flops = &counter; }
FlopScope::~FlopScope() { g_flops = prev_; }

void FlopCounter::add(const char* label, std::int64_t n) {
  flops += n;
  breakdown[label] += n;
}

void count_flops(const char* label, std::int64_t n) {
  if (g_flops) g_flops->add(label, n);
}

namespace autodiff {
bool record(const char* label, const std::vector<Tensor>& inputs, Tensor& out,
            std::function<void()> backward_fn) {
  if (!g_tape) return false;
  bool any = false;
  std::vector<const void*> ids;
  ids.reserve(inputs.size());
  for (const auto& in : inputs) {
    any = any || in.requires_grad();
    ids.push_back(in.id());
  }
  if (!any) return false;
  out.set_requires_grad(true);
  out.grad();  // allocate now so closures can read it unconditionally
  g_tape->record(label, std::move(ids), out.id(), std::move(backward_fn));
  return true;
}
}  // namespace autodiff

// ---- helpers ----

namespace {

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": operand shapes differ, " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
}

// Elementwise binary op with per-element partials.
template <typename Fwd, typename Bwd>
Tensor ew_binary(const char* label, const Tensor& a, const Tensor& b, Fwd fwd, Bwd partials) {
  check_same_shape(label, a, b);
  Tensor out = Tensor::zeros(a.shape());
  auto av = a.values();
  auto bv = b.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = fwd(av[i], bv[i]);
  Tensor ac = a, bc = b, oc = out;
  autodiff::record(label, {a, b}, out, [ac, bc, oc, partials]() mutable {
    auto g = oc.grad();
    auto av2 = ac.values();
    auto bv2 = bc.values();
    const bool ga = ac.requires_grad();
    const bool gb = bc.requires_grad();
    std::span<double> agr = ga ? ac.grad() : std::span<double>();
    std::span<double> bgr = gb ? bc.grad() : std::span<double>();
    for (std::size_t i = 0; i < g.size(); ++i) {
      auto [da, db] = partials(av2[i], bv2[i]);
      if (ga) agr[i] += g[i] * da;
      if (gb) bgr[i] += g[i] * db;
    }
  });
  return out;
}

template <typename Fwd, typename Bwd>
Tensor ew_unary(const char* label, const Tensor& x, Fwd fwd, Bwd partial) {
  Tensor out = Tensor::zeros(x.shape());
  auto xv = x.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = fwd(xv[i]);
  Tensor xc = x, oc = out;
  autodiff::record(label, {x}, out, [xc, oc, partial]() mutable {
    auto g = oc.grad();
    auto xv2 = xc.values();
    auto ov2 = oc.values();
    auto gr = xc.grad();
    for (std::size_t i = 0; i < g.size(); ++i) gr[i] += g[i] * partial(xv2[i], ov2[i]);
  });
  return out;
}

}  // namespace

// ---- shape ops ----

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor out = Tensor::zeros(std::move(shape));
  auto xv = x.values();
  std::copy(xv.begin(), xv.end(), out.values().begin());
  Tensor xc = x, oc = out;
  autodiff::record("reshape", {x}, out, [xc, oc]() mutable {
    auto g = oc.grad();
    auto gr = xc.grad();
    for (std::size_t i = 0; i < g.size(); ++i) gr[i] += g[i];
  });
  return out;
}

namespace {
// out[multi-index permuted] = in[multi-index]; applies fn(in_linear, out_linear).
template <typename Fn>
void for_each_permuted(const Shape& in_shape, const std::vector<int>& perm, Fn fn) {
  const int r = static_cast<int>(in_shape.size());
  Shape out_shape(static_cast<std::size_t>(r));
  for (int d = 0; d < r; ++d) out_shape[static_cast<std::size_t>(d)] = in_shape[static_cast<std::size_t>(perm[static_cast<std::size_t>(d)])];
  auto out_strides = row_major_strides(out_shape);
  // stride in the output for a step along input axis a
  std::vector<std::int64_t> out_stride_for_in_axis(static_cast<std::size_t>(r), 0);
  for (int d = 0; d < r; ++d) {
    out_stride_for_in_axis[static_cast<std::size_t>(perm[static_cast<std::size_t>(d)])] = out_strides[static_cast<std::size_t>(d)];
  }
  std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
  const std::int64_t total = numel(in_shape);
  std::int64_t out_linear = 0;
  for (std::int64_t i = 0; i < total; ++i) {
    fn(i, out_linear);
    for (int d = r - 1; d >= 0; --d) {
      auto ud = static_cast<std::size_t>(d);
      if (++idx[ud] < in_shape[ud]) {
        out_linear += out_stride_for_in_axis[ud];
        break;
      }
      out_linear -= out_stride_for_in_axis[ud] * (in_shape[ud] - 1);
      idx[ud] = 0;
    }
  }
}
}  // namespace

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
  const int r = x.rank();
  if (static_cast<int>(perm.size()) != r) {
    throw ShapeError("permute: perm size " + std::to_string(perm.size()) + " vs rank " +
                     std::to_string(r));
  }
  std::vector<bool> seen(static_cast<std::size_t>(r), false);
  Shape out_shape(static_cast<std::size_t>(r));
  for (int d = 0; d < r; ++d) {
    int p = perm[static_cast<std::size_t>(d)];
    if (p < 0 || p >= r || seen[static_cast<std::size_t>(p)]) {
      throw ShapeError("permute: invalid permutation");
    }
    seen[static_cast<std::size_t>(p)] = true;
    out_shape[static_cast<std::size_t>(d)] = x.dim(p);
  }
  Tensor out = Tensor::zeros(out_shape);
  auto xv = x.values();
  auto ov = out.values();
  for_each_permuted(x.shape(), perm, [&](std::int64_t in_i, std::int64_t out_i) {
    ov[static_cast<std::size_t>(out_i)] = xv[static_cast<std::size_t>(in_i)];
  });
  Tensor xc = x, oc = out;
  std::vector<int> pc = perm;
  autodiff::record("permute", {x}, out, [xc, oc, pc]() mutable {
    auto g = oc.grad();
    auto gr = xc.grad();
    for_each_permuted(xc.shape(), pc, [&](std::int64_t in_i, std::int64_t out_i) {
      gr[static_cast<std::size_t>(in_i)] += g[static_cast<std::size_t>(out_i)];
    });
  });
  return out;
}

namespace {
struct AxisSplit {
  std::int64_t outer, span, inner;
};
AxisSplit split_axis(const Shape& s, int axis) {
  AxisSplit a{1, s[static_cast<std::size_t>(axis)], 1};
  for (int d = 0; d < axis; ++d) a.outer *= s[static_cast<std::size_t>(d)];
  for (int d = axis + 1; d < static_cast<int>(s.size()); ++d) a.inner *= s[static_cast<std::size_t>(d)];
  return a;
}
}  // namespace

Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t end) {
  if (axis < 0 || axis >= x.rank()) {
    throw ShapeError("slice: axis " + std::to_string(axis) + " out of range for " +
                     shape_str(x.shape()));
  }
  if (start < 0 || end > x.dim(axis) || start > end) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(end) +
                     ") invalid for axis length " + std::to_string(x.dim(axis)));
  }
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] = end - start;
  Tensor out = Tensor::zeros(out_shape);
  auto sp = split_axis(x.shape(), axis);
  auto xv = x.values();
  auto ov = out.values();
  const std::int64_t len = end - start;
  for (std::int64_t o = 0; o < sp.outer; ++o) {
    const double* src = xv.data() + (o * sp.span + start) * sp.inner;
    double* dst = ov.data() + o * len * sp.inner;
    std::memcpy(dst, src, static_cast<std::size_t>(len * sp.inner) * sizeof(double));
  }
  Tensor xc = x, oc = out;
  autodiff::record("slice", {x}, out, [xc, oc, axis, start, len, sp]() mutable {
    auto g = oc.grad();
    auto gr = xc.grad();
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      const double* src = g.data() + o * len * sp.inner;
      double* dst = gr.data() + (o * sp.span + start) * sp.inner;
      for (std::int64_t i = 0; i < len * sp.inner; ++i) dst[i] += src[i];
    }
  });
  return out;
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat: empty input list");
  const int r = xs[0].rank();
  if (axis < 0 || axis >= r) throw ShapeError("concat: axis out of range");
  Shape out_shape = xs[0].shape();
  std::int64_t total_span = 0;
  for (const auto& x : xs) {
    if (x.rank() != r) throw ShapeError("concat: rank mismatch");
    for (int d = 0; d < r; ++d) {
      if (d != axis && x.dim(d) != out_shape[static_cast<std::size_t>(d)]) {
        throw ShapeError("concat: shape mismatch " + shape_str(x.shape()) + " vs " +
                         shape_str(xs[0].shape()));
      }
    }
    total_span += x.dim(axis);
  }
  out_shape[static_cast<std::size_t>(axis)] = total_span;
  Tensor out = Tensor::zeros(out_shape);
  auto sp_out = split_axis(out_shape, axis);
  auto ov = out.values();
  std::int64_t offset = 0;
  for (const auto& x : xs) {
    auto sp = split_axis(x.shape(), axis);
    auto xv = x.values();
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      const double* src = xv.data() + o * sp.span * sp.inner;
      double* dst = ov.data() + (o * sp_out.span + offset) * sp_out.inner;
      std::memcpy(dst, src, static_cast<std::size_t>(sp.span * sp.inner) * sizeof(double));
    }
    offset += x.dim(axis);
  }
  std::vector<Tensor> inputs = xs;
  Tensor oc = out;
  autodiff::record("concat", xs, out, [inputs, oc, axis, sp_out]() mutable {
    auto g = oc.grad();
    std::int64_t off = 0;
    for (auto& x : inputs) {
      auto sp = split_axis(x.shape(), axis);
      if (x.requires_grad()) {
        auto gr = x.grad();
        for (std::int64_t o = 0; o < sp.outer; ++o) {
          const double* src = g.data() + (o * sp_out.span + off) * sp_out.inner;
          double* dst = gr.data() + o * sp.span * sp.inner;
          for (std::int64_t i = 0; i < sp.span * sp.inner; ++i) dst[i] += src[i];
        }
      }
      off += x.dim(axis);
    }
  });
  return out;
}

Tensor broadcast_front(const Tensor& x, std::int64_t n) {
  if (n < 1) throw ShapeError("broadcast_front: n must be >= 1");
  Shape out_shape;
  out_shape.push_back(n);
  for (auto d : x.shape()) out_shape.push_back(d);
  Tensor out = Tensor::zeros(out_shape);
  auto xv = x.values();
  auto ov = out.values();
  const std::int64_t m = x.numel();
  for (std::int64_t t = 0; t < n; ++t) {
    std::memcpy(ov.data() + t * m, xv.data(), static_cast<std::size_t>(m) * sizeof(double));
  }
  Tensor xc = x, oc = out;
  autodiff::record("broadcast_front", {x}, out, [xc, oc, n, m]() mutable {
    auto g = oc.grad();
    auto gr = xc.grad();
    for (std::int64_t t = 0; t < n; ++t) {
      const double* src = g.data() + t * m;
      for (std::int64_t i = 0; i < m; ++i) gr[static_cast<std::size_t>(i)] += src[i];
    }
  });
  return out;
}

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b) {
  return ew_binary("add", a, b, [](double x, double y) { return x + y; },
                   [](double, double) { return std::pair<double, double>(1.0, 1.0); });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return ew_binary("sub", a, b, [](double x, double y) { return x - y; },
                   [](double, double) { return std::pair<double, double>(1.0, -1.0); });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  count_flops("ew_mul", a.numel());
  return ew_binary("mul", a, b, [](double x, double y) { return x * y; },
                   [](double x, double y) { return std::pair<double, double>(y, x); });
}

Tensor divide(const Tensor& a, const Tensor& b) {
  count_flops("ew_div", a.numel());
  return ew_binary("div", a, b, [](double x, double y) { return x / y; },
                   [](double x, double y) {
                     return std::pair<double, double>(1.0 / y, -x / (y * y));
                   });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  return ew_binary("maximum", a, b, [](double x, double y) { return x >= y ? x : y; },
                   [](double x, double y) {
                     return x >= y ? std::pair<double, double>(1.0, 0.0)
                                   : std::pair<double, double>(0.0, 1.0);
                   });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  return ew_binary("minimum", a, b, [](double x, double y) { return x <= y ? x : y; },
                   [](double x, double y) {
                     return x <= y ? std::pair<double, double>(1.0, 0.0)
                                   : std::pair<double, double>(0.0, 1.0);
                   });
}

Tensor add_scalar(const Tensor& x, double c) {
  return ew_unary("add_scalar", x, [c](double v) { return v + c; },
                  [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& x, double c) {
  count_flops("ew_mul", x.numel());
  return ew_unary("mul_scalar", x, [c](double v) { return v * c; },
                  [c](double, double) { return c; });
}

Tensor neg(const Tensor& x) {
  return ew_unary("neg", x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Tensor abs(const Tensor& x) {
  return ew_unary("abs", x, [](double v) { return std::fabs(v); },
                  [](double v, double) { return v >= 0.0 ? 1.0 : -1.0; });
}

Tensor exp(const Tensor& x) {
  return ew_unary("exp", x, [](double v) { return std::exp(v); },
                  [](double, double o) { return o; });
}

Tensor log(const Tensor& x) {
  return ew_unary("log", x, [](double v) { return std::log(v); },
                  [](double v, double) { return 1.0 / v; });
}

Tensor pow_scalar(const Tensor& x, double p) {
  return ew_unary("pow_scalar", x, [p](double v) { return std::pow(v, p); },
                  [p](double v, double) { return p * std::pow(v, p - 1.0); });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return ew_unary("clamp", x,
                  [lo, hi](double v) { return v < lo ? lo : (v > hi ? hi : v); },
                  [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return ew_unary("sigmoid", x,
                  [](double v) {
                    return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                                    : std::exp(v) / (1.0 + std::exp(v));
                  },
                  [](double, double o) { return o * (1.0 - o); });
}

namespace {
constexpr double kInvSqrt2 = 0.7071067811865476;
constexpr double kInvSqrt2Pi = 0.3989422804014327;
}  // namespace

Tensor gelu(const Tensor& x) {
  return ew_unary("gelu", x,
                  [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
                  [](double v, double) {
                    double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
                    double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
                    return cdf + v * pdf;
                  });
}

Tensor add_rows(const Tensor& x, const Tensor& bias) {
  if (bias.rank() != 1 || x.rank() < 1 || x.dim(x.rank() - 1) != bias.dim(0)) {
    throw ShapeError("add_rows: bias " + shape_str(bias.shape()) + " does not match last dim of " +
                     shape_str(x.shape()));
  }
  const std::int64_t c = bias.dim(0);
  const std::int64_t rows = x.numel() / c;
  Tensor out = Tensor::zeros(x.shape());
  auto xv = x.values();
  auto bv = bias.values();
  auto ov = out.values();
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t j = 0; j < c; ++j) {
      ov[static_cast<std::size_t>(r * c + j)] = xv[static_cast<std::size_t>(r * c + j)] + bv[static_cast<std::size_t>(j)];
    }
  }
  Tensor xc = x, bc = bias, oc = out;
  autodiff::record("add_rows", {x, bias}, out, [xc, bc, oc, rows, c]() mutable {
    auto g = oc.grad();
    if (xc.requires_grad()) {
      auto gr = xc.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gr[i] += g[i];
    }
    if (bc.requires_grad()) {
      auto br = bc.grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        for (std::int64_t j = 0; j < c; ++j) {
          br[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(r * c + j)];
        }
      }
    }
  });
  return out;
}

// ---- reductions ----

Tensor sum_all(const Tensor& x) {
  auto xv = x.values();
  double s = 0.0;
  for (double v : xv) s += v;
  Tensor out = Tensor::scalar(s);
  Tensor xc = x, oc = out;
  autodiff::record("sum_all", {x}, out, [xc, oc]() mutable {
    double g = oc.grad()[0];
    auto gr = xc.grad();
    for (auto& v : gr) v += g;
  });
  return out;
}

Tensor mean_all(const Tensor& x) {
  const double inv = 1.0 / static_cast<double>(x.numel());
  auto xv = x.values();
  double s = 0.0;
  for (double v : xv) s += v;
  Tensor out = Tensor::scalar(s * inv);
  Tensor xc = x, oc = out;
  autodiff::record("mean_all", {x}, out, [xc, oc, inv]() mutable {
    double g = oc.grad()[0] * inv;
    auto gr = xc.grad();
    for (auto& v : gr) v += g;
  });
  return out;
}

// ---- matmul ----

namespace {
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

struct MatmulDims {
  std::int64_t batch_a, batch_b, batch, m, k, n;
};

MatmulDims matmul_dims(const Tensor& a, const Tensor& b) {
  const int ra = a.rank(), rb = b.rank();
  if (!((ra == 2 && rb == 2) || (ra == 3 && rb == 3))) {
    throw ShapeError("matmul: ranks must both be 2 or both be 3, got " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  }
  MatmulDims d{};
  d.batch_a = ra == 3 ? a.dim(0) : 1;
  d.batch_b = rb == 3 ? b.dim(0) : 1;
  if (d.batch_a != d.batch_b && d.batch_a != 1 && d.batch_b != 1) {
    throw ShapeError("matmul: batch dims disagree, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  d.batch = std::max(d.batch_a, d.batch_b);
  d.m = a.dim(ra - 2);
  d.k = a.dim(ra - 1);
  if (b.dim(rb - 2) != d.k) {
    throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  d.n = b.dim(rb - 1);
  return d;
}
}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const MatmulDims d = matmul_dims(a, b);
  Shape out_shape = (a.rank() == 3) ? Shape{d.batch, d.m, d.n} : Shape{d.m, d.n};
  Tensor out = Tensor::zeros(out_shape);
  auto av = a.values();
  auto bv = b.values();
  auto ov = out.values();
  for (std::int64_t t = 0; t < d.batch; ++t) {
    CMapMat A(av.data() + (d.batch_a == 1 ? 0 : t) * d.m * d.k, d.m, d.k);
    CMapMat B(bv.data() + (d.batch_b == 1 ? 0 : t) * d.k * d.n, d.k, d.n);
    MapMat C(ov.data() + t * d.m * d.n, d.m, d.n);
    C.noalias() = A * B;
  }
  count_flops("matmul", 2 * d.batch * d.m * d.n * d.k);
  Tensor ac = a, bc = b, oc = out;
  autodiff::record("matmul", {a, b}, out, [ac, bc, oc, d]() mutable {
    auto g = oc.grad();
    auto av2 = ac.values();
    auto bv2 = bc.values();
    const bool ga = ac.requires_grad();
    const bool gb = bc.requires_grad();
    std::span<double> agr = ga ? ac.grad() : std::span<double>();
    std::span<double> bgr = gb ? bc.grad() : std::span<double>();
    for (std::int64_t t = 0; t < d.batch; ++t) {
      CMapMat G(g.data() + t * d.m * d.n, d.m, d.n);
      if (ga) {
        CMapMat B(bv2.data() + (d.batch_b == 1 ? 0 : t) * d.k * d.n, d.k, d.n);
        MapMat dA(agr.data() + (d.batch_a == 1 ? 0 : t) * d.m * d.k, d.m, d.k);
        dA.noalias() += G * B.transpose();
      }
      if (gb) {
        CMapMat A(av2.data() + (d.batch_a == 1 ? 0 : t) * d.m * d.k, d.m, d.k);
        MapMat dB(bgr.data() + (d.batch_b == 1 ? 0 : t) * d.k * d.n, d.k, d.n);
        dB.noalias() += A.transpose() * G;
      }
    }
  });
  return out;
}

// ---- nn primitives ----

Tensor softmax(const Tensor& x, int axis) {
  if (axis < 0 || axis >= x.rank()) {
    throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " +
                     shape_str(x.shape()));
  }
  auto sp = split_axis(x.shape(), axis);
  Tensor out = Tensor::zeros(x.shape());
  auto xv = x.values();
  auto ov = out.values();
  for (std::int64_t o = 0; o < sp.outer; ++o) {
    for (std::int64_t in = 0; in < sp.inner; ++in) {
      const std::int64_t base = o * sp.span * sp.inner + in;
      double mx = -1e300;
      for (std::int64_t j = 0; j < sp.span; ++j) {
        mx = std::max(mx, xv[static_cast<std::size_t>(base + j * sp.inner)]);
      }
      double sum = 0.0;
      for (std::int64_t j = 0; j < sp.span; ++j) {
        double e = std::exp(xv[static_cast<std::size_t>(base + j * sp.inner)] - mx);
        ov[static_cast<std::size_t>(base + j * sp.inner)] = e;
        sum += e;
      }
      const double inv = 1.0 / sum;
      for (std::int64_t j = 0; j < sp.span; ++j) {
        ov[static_cast<std::size_t>(base + j * sp.inner)] *= inv;
      }
    }
  }
  count_flops("softmax", x.numel());
  Tensor xc = x, oc = out;
  autodiff::record("softmax", {x}, out, [xc, oc, sp]() mutable {
    auto g = oc.grad();
    auto yv = oc.values();
    auto gr = xc.grad();
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      for (std::int64_t in = 0; in < sp.inner; ++in) {
        const std::int64_t base = o * sp.span * sp.inner + in;
        double dot = 0.0;
        for (std::int64_t j = 0; j < sp.span; ++j) {
          auto i = static_cast<std::size_t>(base + j * sp.inner);
          dot += g[i] * yv[i];
        }
        for (std::int64_t j = 0; j < sp.span; ++j) {
          auto i = static_cast<std::size_t>(base + j * sp.inner);
          gr[i] += (g[i] - dot) * yv[i];
        }
      }
    }
  });
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double epsilon) {
  if (x.rank() < 1) throw ShapeError("layer_norm: rank-0 input");
  const std::int64_t c = x.dim(x.rank() - 1);
  if (gain.rank() != 1 || bias.rank() != 1 || gain.dim(0) != c || bias.dim(0) != c) {
    throw ShapeError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " +
                     shape_str(bias.shape()) + " do not match last dim of " +
                     shape_str(x.shape()));
  }
  const std::int64_t rows = x.numel() / c;
  Tensor out = Tensor::zeros(x.shape());
  auto xv = x.values();
  auto gv = gain.values();
  auto bv = bias.values();
  auto ov = out.values();
  // cache inverse stddev per row for the backward pass
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * c;
    double mean = 0.0;
    for (std::int64_t j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::int64_t j = 0; j < c; ++j) {
      double dv = row[j] - mean;
      var += dv * dv;
    }
    var /= static_cast<double>(c);
    const double istd = 1.0 / std::sqrt(var + epsilon);
    (*inv_std)[static_cast<std::size_t>(r)] = istd;
    double* orow = ov.data() + r * c;
    for (std::int64_t j = 0; j < c; ++j) {
      orow[j] = (row[j] - mean) * istd * gv[static_cast<std::size_t>(j)] + bv[static_cast<std::size_t>(j)];
    }
  }
  count_flops("layer_norm", 2 * x.numel());
  Tensor xc = x, gc = gain, bc = bias, oc = out;
  autodiff::record("layer_norm", {x, gain, bias}, out, [xc, gc, bc, oc, inv_std, rows, c]() mutable {
    auto g = oc.grad();
    auto xv2 = xc.values();
    auto gv2 = gc.values();
    auto bv2 = bc.values();
    const bool gx = xc.requires_grad();
    const bool gg = gc.requires_grad();
    const bool gb = bc.requires_grad();
    std::span<double> xgr = gx ? xc.grad() : std::span<double>();
    std::span<double> ggr = gg ? gc.grad() : std::span<double>();
    std::span<double> bgr = gb ? bc.grad() : std::span<double>();
    std::vector<double> xhat(static_cast<std::size_t>(c));
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* row = xv2.data() + r * c;
      const double* grow = g.data() + r * c;
      const double istd = (*inv_std)[static_cast<std::size_t>(r)];
      double mean = 0.0;
      for (std::int64_t j = 0; j < c; ++j) mean += row[j];
      mean /= static_cast<double>(c);
      for (std::int64_t j = 0; j < c; ++j) xhat[static_cast<std::size_t>(j)] = (row[j] - mean) * istd;
      if (gg || gb) {
        for (std::int64_t j = 0; j < c; ++j) {
          auto uj = static_cast<std::size_t>(j);
          if (gg) ggr[uj] += grow[j] * xhat[uj];
          if (gb) bgr[uj] += grow[j];
        }
      }
      if (gx) {
        double mean_gy = 0.0, mean_gy_xhat = 0.0;
        for (std::int64_t j = 0; j < c; ++j) {
          auto uj = static_cast<std::size_t>(j);
          double gy = grow[j] * gv2[uj];
          mean_gy += gy;
          mean_gy_xhat += gy * xhat[uj];
        }
        mean_gy /= static_cast<double>(c);
        mean_gy_xhat /= static_cast<double>(c);
        for (std::int64_t j = 0; j < c; ++j) {
          auto uj = static_cast<std::size_t>(j);
          double gy = grow[j] * gv2[uj];
          xgr[static_cast<std::size_t>(r * c + j)] +=
              (gy - mean_gy - xhat[uj] * mean_gy_xhat) * istd;
        }
      }
    }
    (void)bv2;
  });
  return out;
}

namespace {
struct LerpTap {
  std::int64_t lo, hi;
  double w_hi;  // weight of hi sample; lo gets (1 - w_hi)
};
LerpTap bilinear_tap(std::int64_t out_i, std::int64_t in_size, std::int64_t out_size) {
  const double scale = static_cast<double>(in_size) / static_cast<double>(out_size);
  double src = (static_cast<double>(out_i) + 0.5) * scale - 0.5;
  if (src < 0.0) src = 0.0;
  const double max_src = static_cast<double>(in_size - 1);
  if (src > max_src) src = max_src;
  LerpTap t{};
  t.lo = static_cast<std::int64_t>(src);
  t.hi = std::min(t.lo + 1, in_size - 1);
  t.w_hi = src - static_cast<double>(t.lo);
  return t;
}
}  // namespace

Tensor upsample_bilinear(const Tensor& x, std::int64_t out_h, std::int64_t out_w) {
  if (x.rank() < 2) throw ShapeError("upsample_bilinear: need trailing (H, W) dims");
  const std::int64_t h = x.dim(x.rank() - 2);
  const std::int64_t w = x.dim(x.rank() - 1);
  const std::int64_t lead = x.numel() / (h * w);
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(x.rank() - 2)] = out_h;
  out_shape[static_cast<std::size_t>(x.rank() - 1)] = out_w;
  Tensor out = Tensor::zeros(out_shape);
  std::vector<LerpTap> ty(static_cast<std::size_t>(out_h)), tx(static_cast<std::size_t>(out_w));
  for (std::int64_t i = 0; i < out_h; ++i) ty[static_cast<std::size_t>(i)] = bilinear_tap(i, h, out_h);
  for (std::int64_t i = 0; i < out_w; ++i) tx[static_cast<std::size_t>(i)] = bilinear_tap(i, w, out_w);
  auto xv = x.values();
  auto ov = out.values();
  for (std::int64_t l = 0; l < lead; ++l) {
    const double* src = xv.data() + l * h * w;
    double* dst = ov.data() + l * out_h * out_w;
    for (std::int64_t y = 0; y < out_h; ++y) {
      const auto& a = ty[static_cast<std::size_t>(y)];
      for (std::int64_t xo = 0; xo < out_w; ++xo) {
        const auto& b = tx[static_cast<std::size_t>(xo)];
        double v00 = src[a.lo * w + b.lo];
        double v01 = src[a.lo * w + b.hi];
        double v10 = src[a.hi * w + b.lo];
        double v11 = src[a.hi * w + b.hi];
        double top = v00 + (v01 - v00) * b.w_hi;
        double bot = v10 + (v11 - v10) * b.w_hi;
        dst[y * out_w + xo] = top + (bot - top) * a.w_hi;
      }
    }
  }
  count_flops("upsample_bilinear", 4 * out.numel());
  Tensor xc = x, oc = out;
  auto typ = std::make_shared<std::vector<LerpTap>>(std::move(ty));
  auto txp = std::make_shared<std::vector<LerpTap>>(std::move(tx));
  autodiff::record("upsample_bilinear", {x}, out, [xc, oc, typ, txp, lead, h, w, out_h, out_w]() mutable {
    auto g = oc.grad();
    auto gr = xc.grad();
    for (std::int64_t l = 0; l < lead; ++l) {
      const double* src = g.data() + l * out_h * out_w;
      double* dst = gr.data() + l * h * w;
      for (std::int64_t y = 0; y < out_h; ++y) {
        const auto& a = (*typ)[static_cast<std::size_t>(y)];
        for (std::int64_t xo = 0; xo < out_w; ++xo) {
          const auto& b = (*txp)[static_cast<std::size_t>(xo)];
          const double gv = src[y * out_w + xo];
          dst[a.lo * w + b.lo] += gv * (1.0 - a.w_hi) * (1.0 - b.w_hi);
          dst[a.lo * w + b.hi] += gv * (1.0 - a.w_hi) * b.w_hi;
          dst[a.hi * w + b.lo] += gv * a.w_hi * (1.0 - b.w_hi);
          dst[a.hi * w + b.hi] += gv * a.w_hi * b.w_hi;
        }
      }
    }
  });
  return out;
}

// ---- init ----

Tensor xavier_uniform(Shape shape, std::int64_t fan_in, std::int64_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(-limit, limit);
  return t;
}

Tensor normal_init(Shape shape, double stddev, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.values()) v = rng.normal(0.0, stddev);
  return t;
}

Tensor uniform_init(Shape shape, double lo, double hi, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

bool all_finite(const Tensor& x) {
  for (double v : x.values()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace tevit
