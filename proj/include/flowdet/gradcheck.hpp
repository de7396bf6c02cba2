#pragma once

#include <functional>
#include <limits>

#include "flowdet/ops.hpp"

namespace flowdet {

struct GradCheckReport {
  std::string op;
  double max_rel_err = 0.0;
  bool pass = false;
  std::string note;  // failing location or non-finite diagnostics
};

struct GradCheckOptions {
  double eps = 1e-5;
  double tol = 1e-5;
  // Absolute noise floor: an element whose analytic/numeric disagreement is
  // below this is treated as matching. Central differences of a scalar of
  // magnitude L carry ~machine_eps*L/eps of rounding noise, which otherwise
  // dominates the relative error wherever the true gradient is near zero.
  double atol = 1e-9;
  // 0 = check every element; otherwise check a seeded sample per input
  int64_t max_elements_per_input = 0;
  uint64_t seed = 1234;
};

// Central-difference gradient check at f64. `fn` evaluates the operation
// under test from the current contents of `inputs` and returns its output
// tensor (any shape). The output is projected to a scalar with a fixed
// random weighting so that every output element influences the check.
// rel err = |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
inline GradCheckReport gradcheck(const std::string& name,
                                 const std::function<Tensor<double>()>& fn,
                                 std::vector<Tensor<double>*> inputs,
                                 const GradCheckOptions& opt = {}) {
  GradCheckReport report;
  report.op = name;

  for (auto* in : inputs) in->set_requires_grad(true);

  // fixed projection weights, sized after a probe evaluation
  Tensor<double> probe = fn();
  if (!probe.all_finite()) {
    report.pass = false;
    report.note = "non-finite forward output";
    report.max_rel_err = std::numeric_limits<double>::infinity();
    return report;
  }
  Rng proj_rng(opt.seed);
  std::vector<double> proj(static_cast<size_t>(probe.numel()));
  for (auto& v : proj) v = proj_rng.uniform(-1.0, 1.0);

  auto eval_scalar = [&]() -> double {
    Tensor<double> y = fn();
    double acc = 0.0;
    const double* p = y.data().data();
    for (size_t i = 0; i < proj.size(); ++i) acc += p[i] * proj[i];
    return acc;
  };

  // analytic gradients
  std::vector<std::vector<double>> analytic;
  {
    Graph<double> graph;
    Tensor<double> y = fn();
    Tensor<double> loss = weighted_sum(y, proj);
    graph.backward(loss);
    for (auto* in : inputs) {
      auto gs = in->grad_span();
      analytic.emplace_back(gs.begin(), gs.end());
    }
  }

  Rng pick(opt.seed ^ 0xabcdef);
  report.pass = true;
  for (size_t k = 0; k < inputs.size(); ++k) {
    Tensor<double>& in = *inputs[k];
    auto data = in.mutable_data();
    const int64_t n = in.numel();
    std::vector<int64_t> elements;
    if (opt.max_elements_per_input > 0 && n > opt.max_elements_per_input) {
      for (int64_t i = 0; i < opt.max_elements_per_input; ++i) elements.push_back(pick.below(n));
    } else {
      elements.resize(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) elements[size_t(i)] = i;
    }
    for (int64_t idx : elements) {
      const double saved = data[size_t(idx)];
      data[size_t(idx)] = saved + opt.eps;
      const double up = eval_scalar();
      data[size_t(idx)] = saved - opt.eps;
      const double down = eval_scalar();
      data[size_t(idx)] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        report.pass = false;
        report.note = "non-finite perturbed output at input " + std::to_string(k) + " element " +
                      std::to_string(idx);
        report.max_rel_err = std::numeric_limits<double>::infinity();
        return report;
      }
      const double numeric = (up - down) / (2.0 * opt.eps);
      const double a = analytic[k][size_t(idx)];
      if (std::fabs(a - numeric) <= opt.atol) continue;
      const double rel = std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        if (rel > opt.tol) {
          std::ostringstream os;
          os.precision(6);
          os << "input " << k << " element " << idx << ": analytic " << a << " vs numeric "
             << numeric;
          report.note = os.str();
        }
      }
    }
  }
  report.pass = report.max_rel_err <= opt.tol;
  return report;
}

}  // namespace flowdet
