#pragma once
// Central-difference gradient verification. `f` evaluates the scalar loss
// forward-only; `compute_grads` fills parameter gradients analytically (tape
// backward). The checker perturbs every trainable scalar in place, restoring
// it exactly, and compares (f(t+e)-f(t-e))/2e to the analytic gradient.

#include <functional>
#include <string>
#include <vector>

#include "mmt/params.hpp"

namespace mmt {

struct GradCheckRow {
  std::string param;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t checked = 0;   // trainable scalars swept
  std::size_t skipped = 0;   // frozen scalars excluded
  std::vector<GradCheckRow> worst_rows;  // a few top offenders for diagnostics

  bool passed(double tol = 1e-4) const { return checked > 0 && max_rel_err < tol; }
  std::string summary() const;
};

// Relative error uses |a-n| / max(|a|, |n|, floor); the floor keeps
// central-difference roundoff (~1e-9 absolute on O(1) losses) from inflating
// the ratio on near-zero gradients.
GradCheckReport finite_difference_check(const std::function<double()>& f,
                                        ParameterStore& params,
                                        const std::function<void()>& compute_grads,
                                        double eps = 1e-5, double rel_floor = 1e-3);

}  // namespace mmt
