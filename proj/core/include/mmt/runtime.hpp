#pragma once
// Per-call execution context: train vs inference statistics, dropout keeps,
// and the RNG stream that makes dropout reproducible.

#include <random>

#include "mmt/tensor.hpp"

namespace mmt {

// All rates are KEEP probabilities (1.0 = no dropout).
struct DropoutConfig {
  double gru_in = 1.0;
  double gru_out = 1.0;
  double cgru_in = 1.0;
  double cgru_out = 1.0;
  double softmax_out = 1.0;

  bool any() const {
    return gru_in < 1.0 || gru_out < 1.0 || cgru_in < 1.0 || cgru_out < 1.0 ||
           softmax_out < 1.0;
  }
};

struct RunContext {
  bool train = false;         // batch statistics + dropout eligible
  bool update_stats = false;  // fold batch statistics into running averages
  DropoutConfig dropout;      // keeps; ignored unless train and rng set
  std::mt19937_64* rng = nullptr;

  static RunContext inference() { return RunContext{}; }
};

inline TensorPtr maybe_dropout(const TensorPtr& x, double keep, const RunContext& ctx) {
  if (!ctx.train || keep >= 1.0 || ctx.rng == nullptr) return x;
  return dropout(x, keep, *ctx.rng);
}

}  // namespace mmt
