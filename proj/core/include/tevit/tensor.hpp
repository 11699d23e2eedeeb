#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "tevit/common.hpp"
#include "tevit/rng.hpp"

namespace tevit {

// Dense 64-bit float tensor, row-major, value-semantic handle over shared
// storage. Gradients live next to the data and are populated by backward().
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return s_ != nullptr; }
  const Shape& shape() const { return s_->shape; }
  int rank() const { return static_cast<int>(s_->shape.size()); }
  std::int64_t dim(int axis) const { return s_->shape[static_cast<std::size_t>(axis)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(s_->data.size()); }

  std::span<double> values() { return {s_->data.data(), s_->data.size()}; }
  std::span<const double> values() const { return {s_->data.data(), s_->data.size()}; }
  double item() const;

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool rg);
  // Gradient buffer; allocated (zero-filled) on demand when requires_grad.
  std::span<double> grad();
  std::span<const double> grad() const;
  bool has_grad() const { return s_ && !s_->grad.empty(); }
  void zero_grad();

  // Same-storage identity, used for parameter-aliasing checks.
  const void* id() const { return s_.get(); }

  // Deep copy with no graph history (fresh leaf).
  Tensor detached() const;

 private:
  struct Storage {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> s_;
  explicit Tensor(std::shared_ptr<Storage> s) : s_(std::move(s)) {}
  friend class GradTape;
};

// Records the forward trace; nodes are appended in execution order, so the
// sequence is already topologically sorted and backward() is a single
// reverse sweep visiting each node exactly once.
class GradTape {
 public:
  struct Node {
    const char* label;
    std::vector<const void*> input_ids;
    const void* output_id;
    std::function<void()> backward;
  };

  void record(const char* label, std::vector<const void*> input_ids,
              const void* output_id, std::function<void()> backward);
  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_[i]; }
  void clear();

  void run_backward();

 private:
  std::vector<Node> nodes_;
};

// Scoped activation of a tape: ops executed inside the scope record
// backward rules onto it. One tape per thread at a time.
class TapeScope {
 public:
  explicit TapeScope(GradTape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradTape* prev_;
};

GradTape* active_tape();

// Seeds d(loss)/d(loss) = 1 and replays the active tape in reverse,
// accumulating gradients additively into every reachable requires_grad
// tensor. The tape is left intact; reset it explicitly via clear().
void backward(Tensor& loss);

// Multiply-add accounting. matmul records 2*m*n*k per matrix pair; data
// movement ops (reshape, permute, slice, concat, shift) record nothing.
struct FlopCounter {
  std::int64_t flops = 0;
  std::map<std::string, std::int64_t> breakdown;
  void add(const char* label, std::int64_t n);
};

class FlopScope {
 public:
  explicit FlopScope(FlopCounter& counter);
  ~FlopScope();
  FlopScope(const FlopScope&) = delete;
  FlopScope& operator=(const FlopScope&) = delete;

 private:
  FlopCounter* prev_;
};

FlopCounter* active_flop_counter();
void count_flops(const char* label, std::int64_t n);

// ---- shape ops (pure data movement, zero flops) ----
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<int>& perm);
Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t end);
Tensor concat(const std::vector<Tensor>& xs, int axis);
// Stack n copies of x along a new leading axis.
Tensor broadcast_front(const Tensor& x, std::int64_t n);

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& x, double c);
Tensor mul_scalar(const Tensor& x, double c);
Tensor neg(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor pow_scalar(const Tensor& x, double p);
Tensor clamp(const Tensor& x, double lo, double hi);
Tensor sigmoid(const Tensor& x);
Tensor gelu(const Tensor& x);
// Adds a length-C vector to every row of x (..., C). Explicit op instead of
// implicit broadcasting.
Tensor add_rows(const Tensor& x, const Tensor& bias);

// ---- reductions ----
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

// ---- linear algebra ----
// Rank-2 x rank-2, or rank-3 x rank-3 with equal batch dims (or one batch
// broadcast from 1). No other implicit broadcasting.
Tensor matmul(const Tensor& a, const Tensor& b);

// ---- neural-net primitives ----
// Numerically stable softmax along `axis`; slices sum to 1.
Tensor softmax(const Tensor& x, int axis);
// Normalizes the last dimension to mean 0 / variance 1 (population), then
// applies elementwise gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double epsilon);
// Bilinear resize of the trailing two dims (align_corners = false).
Tensor upsample_bilinear(const Tensor& x, std::int64_t out_h, std::int64_t out_w);

// ---- init helpers ----
Tensor xavier_uniform(Shape shape, std::int64_t fan_in, std::int64_t fan_out, Rng& rng);
Tensor normal_init(Shape shape, double stddev, Rng& rng);
Tensor uniform_init(Shape shape, double lo, double hi, Rng& rng);

// Row-major strides for a shape.
std::vector<std::int64_t> row_major_strides(const Shape& shape);

bool all_finite(const Tensor& x);

namespace autodiff {
// Records a custom operation on the active tape (no-op when no tape is
// active or no input requires grad). The backward closure must accumulate
// into the inputs' grad buffers. Returns true when recorded.
bool record(const char* label, const std::vector<Tensor>& inputs, Tensor& out,
            std::function<void()> backward_fn);
}  // namespace autodiff

}  // namespace tevit
