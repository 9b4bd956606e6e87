#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "cdp/tensor.hpp"

// Central-difference gradient checking. Runs in double; callers build the
// computation as a lambda over leaf tensors so it can be replayed with
// perturbed inputs.

namespace cdp {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst;  // "input I element J: analytic=.. fd=.."
};

// f: (const std::vector<Tensor64>&) -> scalar Tensor64.
// Relative error per element: |a - fd| / max(|a|, |fd|, 1e-8).
template <typename F>
GradCheckResult grad_check(F&& f, std::vector<Tensor64> inputs, double h = 1e-5) {
  for (auto& t : inputs) t.set_requires_grad(true);

  Tensor64 loss = f(inputs);
  if (loss.numel() != 1) throw TensorError("grad_check: f must return a scalar");
  for (auto& t : inputs) t.zero_grad();
  loss.backward();

  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) analytic.push_back(t.grad());

  GradCheckResult res;
  NoGradGuard ng;
  for (size_t i = 0; i < inputs.size(); ++i) {
    auto& vals = inputs[i].mutable_data();
    for (size_t j = 0; j < vals.size(); ++j) {
      double orig = vals[j];
      vals[j] = orig + h;
      double fp = f(inputs).item();
      vals[j] = orig - h;
      double fm = f(inputs).item();
      vals[j] = orig;
      double fd = (fp - fm) / (2.0 * h);
      double a = analytic[i][j];
      if (!std::isfinite(a) || !std::isfinite(fd))
        throw TensorError("grad_check: non-finite gradient at input " + std::to_string(i) +
                          " element " + std::to_string(j) + " (analytic=" + std::to_string(a) +
                          " fd=" + std::to_string(fd) + ")");
      double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-8});
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst = "input " + std::to_string(i) + " element " + std::to_string(j) +
                    ": analytic=" + std::to_string(a) + " fd=" + std::to_string(fd);
      }
    }
  }
  return res;
}

}  // namespace cdp
