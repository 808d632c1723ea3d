#include "mmt/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace mmt {

std::string GradCheckReport::summary() const {
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "checked %zu scalars (%zu frozen skipped), max rel err %.3e at %s[%zu]",
                checked, skipped, max_rel_err,
                worst_param.empty() ? "-" : worst_param.c_str(), worst_index);
  return buf;
}

GradCheckReport finite_difference_check(const std::function<double()>& f,
                                        ParameterStore& params,
                                        const std::function<void()>& compute_grads,
                                        double eps, double rel_floor) {
  if (get_precision() != Precision::kDouble) {
    throw ParamError("finite_difference_check: double precision must be active");
  }
  if (!(eps > 0.0)) throw ParamError("finite_difference_check: eps must be positive");

  double f0 = f();
  double f1 = f();
  if (f0 != f1) {
    throw DeterminismError(
        "finite_difference_check: f is not deterministic (repeat evaluation differs)");
  }

  params.zero_grad();
  compute_grads();

  GradCheckReport report;
  for (const auto& p : params.items()) {
    if (!p->trainable) {
      report.skipped += p->value->size();
      continue;
    }
    Tensor& t = *p->value;
    for (std::size_t i = 0; i < t.size(); ++i) {
      double saved = t.value[i];
      t.value[i] = saved + eps;
      double fp = f();
      t.value[i] = saved - eps;
      double fm = f();
      t.value[i] = saved;
      double numeric = (fp - fm) / (2.0 * eps);
      double analytic = t.grad[i];
      double denom = std::max({std::fabs(analytic), std::fabs(numeric), rel_floor});
      double rel = std::fabs(analytic - numeric) / denom;
      ++report.checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = p->name;
        report.worst_index = i;
      }
      if (rel > 1e-5 && report.worst_rows.size() < 16) {
        report.worst_rows.push_back({p->name, i, analytic, numeric, rel});
      }
    }
  }
  std::sort(report.worst_rows.begin(), report.worst_rows.end(),
            [](const GradCheckRow& a, const GradCheckRow& b) { return a.rel_err > b.rel_err; });
  return report;
}

}  // namespace mmt
