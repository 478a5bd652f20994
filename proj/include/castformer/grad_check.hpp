#pragma once

#include <functional>
#include <map>
#include <string>

#include "castformer/param_store.hpp"

namespace castformer {

using ScalarFn = std::function<double(const ParamStore&)>;
using LossFn = std::function<Tensor(const ParamStore&)>;

// Central differences (f(p+h) - f(p-h)) / 2h for every coordinate of every
// entry. f is evaluated twice at the base point first; any bitwise
// difference raises UnreliableCheckError.
NamedTensors finite_diff_grad(const ScalarFn& f, ParamStore& params, double h = 1e-5);

// Reverse-mode gradients of the loss built by f.
NamedTensors analytic_grad(const LossFn& f, ParamStore& params);

inline constexpr double kRelErrorFloor = 1e-5;

// Relative error |a-n| / max(|a|, |n|, floor). Central differences at
// h = 1e-5 carry ~4e-10 of round-off, so a coordinate whose true gradient is
// exactly zero (key biases under softmax, say) is judged against the floor
// rather than against that noise.
double relative_error(double analytic, double numeric, double floor = kRelErrorFloor);

struct GradCheckReport {
  struct Worst {
    double error = 0.0;
    std::string param;
    std::size_t index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
  };
  // Keyed by group: the parameter name without its last component.
  std::map<std::string, Worst> groups;
  Worst worst;

  bool passed(double tol) const { return worst.error <= tol; }
};

std::string param_group(const std::string& name);

GradCheckReport compare_grads(const NamedTensors& analytic, const NamedTensors& numeric,
                              double floor = kRelErrorFloor);

// Analytic vs finite-difference comparison for a loss over params.
GradCheckReport check_gradients(const LossFn& f, ParamStore& params, double h = 1e-5);

}  // namespace castformer
