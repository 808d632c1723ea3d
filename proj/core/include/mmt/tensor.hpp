#pragma once
// Dense row-major tensors with hand-written backward passes recorded on a
// tape. Ops run forward immediately; when a tape is active and some input
// requires gradients they append a closure that accumulates input gradients
// from output gradients. Backward = run the tape in reverse creation order.

#include <functional>
#include <memory>
#include <random>
#include <vector>

#include "mmt/common.hpp"

namespace mmt {

class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

std::size_t shape_numel(const std::vector<int>& shape);

class Tensor {
 public:
  std::vector<int> shape;
  std::vector<double> value;
  std::vector<double> grad;  // same length as value; backward accumulates here
  bool requires_grad = false;

  Tensor() = default;
  explicit Tensor(std::vector<int> s, double fill = 0.0);

  static TensorPtr make(std::vector<int> shape, double fill = 0.0);
  static TensorPtr scalar(double v);
  static TensorPtr from(std::vector<int> shape, std::vector<double> values);

  std::size_t size() const { return value.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const;
  double item() const;  // scalar tensors only
  void zero_grad();
};

// ---------------------------------------------------------------------------
// Tape

class Tape {
 public:
  void record(std::function<void()> backward);
  void backward(const TensorPtr& loss);  // seeds d(loss)=1 then runs in reverse
  void run_reverse();
  void clear();
  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<std::function<void()>> nodes_;
};

Tape* active_tape();

// Activates `tape` for ops created in this scope. With no active tape ops are
// forward-only (translation, finite-difference sweeps).
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

// Detector test hook: flips the sign of matmul's left-operand gradient so the
// finite-difference checker has a known-broken backward to catch.
void set_backward_fault_injection(bool on);
bool backward_fault_injection();

enum class Padding { kValid, kSame };

// ---------------------------------------------------------------------------
// Ops

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);     // [m,k]x[k,n]
TensorPtr matmul_nt(const TensorPtr& a, const TensorPtr& b);  // [m,k]x[n,k]^T -> [m,n]
TensorPtr matvec(const TensorPtr& a, const TensorPtr& x);     // [m,k]x[k] -> [m]
TensorPtr add(const TensorPtr& a, const TensorPtr& b);        // equal shape, or b broadcast over last axis
TensorPtr mul(const TensorPtr& a, const TensorPtr& b);        // elementwise, same broadcast rule
TensorPtr affine(const TensorPtr& x, double k, double b);     // k*x + b elementwise
TensorPtr add_n(const std::vector<TensorPtr>& xs);
TensorPtr tanh(const TensorPtr& x);
TensorPtr sigmoid(const TensorPtr& x);
TensorPtr relu(const TensorPtr& x);
TensorPtr softmax(const TensorPtr& scores);
TensorPtr softmax_masked(const TensorPtr& scores, const std::vector<int>& mask);
TensorPtr conv2d(const TensorPtr& input, const TensorPtr& kernel, int stride, Padding padding);
TensorPtr max_pool2d(const TensorPtr& input, int k, int stride, Padding padding);
TensorPtr global_max_pool(const TensorPtr& input);  // [B,H,W,C] -> [B,C]
TensorPtr concat(const std::vector<TensorPtr>& xs);  // rank-1 concat
TensorPtr row(const TensorPtr& m, int i);            // [R,C] -> [C]
TensorPtr stack_rows(const std::vector<TensorPtr>& rows);  // R x [C] -> [R,C]
TensorPtr slice_cols(const TensorPtr& m, int c0, int c1);  // [R,C] -> [R,c1-c0]
TensorPtr tile_rows(const TensorPtr& v, int n);            // [C] -> [n,C]
TensorPtr embedding_rows(const TensorPtr& table, const std::vector<int>& ids);
TensorPtr masked_mean_rows(const TensorPtr& m, const std::vector<int>& mask);
TensorPtr layer_norm(const TensorPtr& x, const TensorPtr& gain, const TensorPtr& bias,
                     double eps = 1e-5);
TensorPtr sum(const TensorPtr& x);
TensorPtr mean(const TensorPtr& x);
TensorPtr nll(const TensorPtr& logits, int target);  // -log softmax(logits)[target]
TensorPtr dropout(const TensorPtr& x, double keep, std::mt19937_64& rng);
TensorPtr detach(const TensorPtr& x);
// sum_i weights[i] * keys[i,:]; reductions use value-ordered summation so the
// result is exactly invariant under key permutations.
TensorPtr attend_context(const TensorPtr& weights, const TensorPtr& keys);
TensorPtr example_grid(const TensorPtr& grid, int b);  // [B,h,w,C] -> [h*w,C]

// Forward-only helpers (no tape interaction).
std::vector<double> log_softmax_values(const Tensor& logits);
double stable_sum(std::vector<double> xs);  // value-ordered summation

}  // namespace mmt
