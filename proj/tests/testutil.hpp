#ifndef CMAMBA_TESTS_TESTUTIL_HPP
#define CMAMBA_TESTS_TESTUTIL_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "cmamba/autograd.hpp"
#include "cmamba/ops.hpp"
#include "cmamba/tensor.hpp"

namespace cmamba::testutil {

inline double rel_err(double got, double want) {
  const double denom = std::max({std::abs(got), std::abs(want), 1e-8});
  return std::abs(got - want) / denom;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// loss = sum(x * weights); makes every output element observable in a scalar.
inline Var weighted_sum(const Var& x, const Tensor& weights) {
  return sum_all(mul(x, constant(weights)));
}

struct GradCheckResult {
  double max_rel_err = 0.0;
  int worst_param = -1;
  int64_t worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;

  std::string describe() const {
    return "max_rel_err=" + std::to_string(max_rel_err) + " at param " +
           std::to_string(worst_param) + "[" + std::to_string(worst_index) +
           "] analytic=" + std::to_string(analytic) + " numeric=" + std::to_string(numeric);
  }
};

// Central-difference check of d(f)/d(params) for a scalar-valued builder.
// `f` must rebuild the graph from the given leaves on every call.
inline GradCheckResult check_gradients(
    const std::function<Var(const std::vector<Var>&)>& f, const std::vector<Tensor>& init,
    double eps = 1e-5, int64_t max_elems_per_param = 256) {
  std::vector<Var> params;
  params.reserve(init.size());
  for (const Tensor& t : init) params.push_back(make_param(t));
  Var loss = f(params);
  backward(loss);

  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (const Var& p : params) {
    p->ensure_grad();
    analytic.push_back(p->grad);
  }

  GradCheckResult res;
  NoGradGuard ng;
  for (size_t pi = 0; pi < init.size(); ++pi) {
    const int64_t n = init[pi].numel();
    const int64_t step = std::max<int64_t>(1, n / max_elems_per_param);
    for (int64_t j = 0; j < n; j += step) {
      std::vector<Var> perturbed;
      auto eval_at = [&](double delta) {
        perturbed.clear();
        for (size_t k = 0; k < init.size(); ++k) {
          Tensor t = init[k];
          if (k == pi) t[j] += delta;
          perturbed.push_back(constant(std::move(t)));
        }
        return f(perturbed)->value.item();
      };
      const double numeric = (eval_at(eps) - eval_at(-eps)) / (2.0 * eps);
      const double a = analytic[pi][j];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
      const double err = std::abs(a - numeric) / denom;
      if (err > res.max_rel_err) {
        res.max_rel_err = err;
        res.worst_param = static_cast<int>(pi);
        res.worst_index = j;
        res.analytic = a;
        res.numeric = numeric;
      }
    }
  }
  return res;
}

// In-place variant: `f` rebuilds the graph reading the *current* values of
// `params` (shared leaves), so structured parameter bundles need no rebuild
// plumbing.  Mutates and restores the leaf tensors during probing.  Several
// step sizes may be given; an element passes with the best of them (the valid
// FD window differs between tiny-gradient and high-curvature parameters).
inline GradCheckResult check_gradients_inplace(const std::function<Var()>& f,
                                               const std::vector<Var>& params,
                                               std::vector<double> eps_list,
                                               int64_t max_elems_per_param = 64,
                                               double denom_floor = 1e-6) {
  for (const Var& p : params) p->grad = Tensor();
  Var loss = f();
  backward(loss);
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (const Var& p : params) {
    p->ensure_grad();
    analytic.push_back(p->grad);
  }

  GradCheckResult res;
  NoGradGuard ng;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& t = params[pi]->value;
    const int64_t n = t.numel();
    const int64_t step = std::max<int64_t>(1, n / max_elems_per_param);
    for (int64_t j = 0; j < n; j += step) {
      const double a = analytic[pi][j];
      double best_err = std::numeric_limits<double>::infinity();
      double best_numeric = 0.0;
      for (double eps : eps_list) {
        const double orig = t[j];
        t[j] = orig + eps;
        const double lp = f()->value.item();
        t[j] = orig - eps;
        const double lm = f()->value.item();
        t[j] = orig;
        const double numeric = (lp - lm) / (2.0 * eps);
        const double denom = std::max({std::abs(a), std::abs(numeric), denom_floor});
        const double err = std::abs(a - numeric) / denom;
        if (err < best_err) {
          best_err = err;
          best_numeric = numeric;
        }
      }
      if (best_err > res.max_rel_err) {
        res.max_rel_err = best_err;
        res.worst_param = static_cast<int>(pi);
        res.worst_index = j;
        res.analytic = a;
        res.numeric = best_numeric;
      }
    }
  }
  return res;
}

inline GradCheckResult check_gradients_inplace(const std::function<Var()>& f,
                                               const std::vector<Var>& params, double eps = 1e-5,
                                               int64_t max_elems_per_param = 64) {
  return check_gradients_inplace(f, params, std::vector<double>{eps}, max_elems_per_param);
}

}  // namespace cmamba::testutil

#endif  // CMAMBA_TESTS_TESTUTIL_HPP
