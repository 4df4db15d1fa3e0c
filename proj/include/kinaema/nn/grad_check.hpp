#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "kinaema/nn/tensor.hpp"

namespace kinaema::nn {

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  int checked_elements = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double worst = 0.0;
  std::string worst_param;
  bool ok(double tol) const { return worst < tol; }
};

// Compares reverse-mode gradients against central finite differences.
// `fn` rebuilds the graph and returns the scalar loss; it is re-evaluated for
// every probe. Intended for the double instantiation of the engine.
// `max_elements` > 0 subsamples each parameter with a deterministic stride.
template <class S>
GradCheckReport grad_check(const std::function<Tensor<S>()>& fn, ParamSet<S>& params,
                           double eps = 1e-5, int max_elements = 0) {
  params.zero_grad();
  Tensor<S> loss = fn();
  if (!std::isfinite(static_cast<double>(loss.item())))
    throw NumericError("grad_check: non-finite loss");
  backward(loss);

  std::vector<std::vector<S>> analytic;
  for (auto& e : params.entries()) {
    auto* node = e.tensor.node();
    node->ensure_grad();
    analytic.push_back(node->grad);
  }

  GradCheckReport report;
  for (size_t pi = 0; pi < params.entries().size(); ++pi) {
    auto& entry = params.entries()[pi];
    auto& vals = entry.tensor.values();
    int64_t n = entry.tensor.numel();
    int64_t stride = 1;
    if (max_elements > 0 && n > max_elements) stride = (n + max_elements - 1) / max_elements;

    GradCheckEntry res;
    res.name = entry.name;
    for (int64_t i = 0; i < n; i += stride) {
      S orig = vals[i];
      vals[i] = orig + static_cast<S>(eps);
      double f_plus = static_cast<double>(fn().item());
      vals[i] = orig - static_cast<S>(eps);
      double f_minus = static_cast<double>(fn().item());
      vals[i] = orig;
      if (!std::isfinite(f_plus) || !std::isfinite(f_minus))
        throw NumericError("grad_check: non-finite output perturbing " + entry.name);
      double fd = (f_plus - f_minus) / (2.0 * eps);
      double an = static_cast<double>(analytic[pi][i]);
      double denom = std::max({std::abs(fd), std::abs(an), 1e-5});
      double rel = std::abs(fd - an) / denom;
      res.max_rel_err = std::max(res.max_rel_err, rel);
      ++res.checked_elements;
    }
    if (res.max_rel_err > report.worst) {
      report.worst = res.max_rel_err;
      report.worst_param = res.name;
    }
    report.entries.push_back(std::move(res));
  }
  params.zero_grad();
  return report;
}

}  // namespace kinaema::nn
