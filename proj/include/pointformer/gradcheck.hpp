#pragma once

// Finite-difference gradient verification.
//
// The loss function is called once with accumulate=true (it must run
// forward + backward and leave gradients in the parameters) and then
// repeatedly with accumulate=false while entries are nudged for central
// differences.  The relative error divides by max(1, |numeric|) so tiny
// gradients are compared absolutely.

#include "pointformer/tape.hpp"

#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace pf {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  Index worst_row = 0;
  Index worst_col = 0;
  double autodiff = 0.0;
  double numeric = 0.0;
  std::size_t entries = 0;
};

template <class S>
GradCheckReport check_gradients(const std::function<S(bool accumulate)>& loss_fn,
                                const std::vector<Parameter<S>*>& params, double eps) {
  if (eps <= 0.0) throw UsageError("check_gradients: eps must be positive");
  zero_grads(params);
  loss_fn(true);

  std::vector<Matrix2D<S>> analytic;
  analytic.reserve(params.size());
  for (auto* p : params) {
    p->ensure_grad();
    analytic.push_back(p->grad);
  }

  GradCheckReport rep;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter<S>& p = *params[pi];
    for (Index r = 0; r < p.value.rows(); ++r) {
      for (Index c = 0; c < p.value.cols(); ++c) {
        const S saved = p.value(r, c);
        p.value(r, c) = saved + S(eps);
        const double up = static_cast<double>(loss_fn(false));
        p.value(r, c) = saved - S(eps);
        const double down = static_cast<double>(loss_fn(false));
        p.value(r, c) = saved;
        const double numeric = (up - down) / (2.0 * eps);
        const double a = static_cast<double>(analytic[pi](r, c));
        const double rel = std::abs(a - numeric) / std::max(1.0, std::abs(numeric));
        ++rep.entries;
        if (rel > rep.max_rel_err) {
          rep.max_rel_err = rel;
          rep.worst_param = p.id;
          rep.worst_row = r;
          rep.worst_col = c;
          rep.autodiff = a;
          rep.numeric = numeric;
        }
      }
    }
  }
  return rep;
}

}  // namespace pf
