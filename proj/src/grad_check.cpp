#include "castformer/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "castformer/errors.hpp"

namespace castformer {

NamedTensors finite_diff_grad(const ScalarFn& f, ParamStore& params, double h) {
  const double f0 = f(params);
  const double f1 = f(params);
  if (std::memcmp(&f0, &f1, sizeof f0) != 0) {
    throw UnreliableCheckError("function is not deterministic (" + std::to_string(f0) +
                               " vs " + std::to_string(f1) +
                               "); disable dropout and fix the data");
  }
  NamedTensors out;
  for (auto& [name, e] : params.entries()) {
    auto p = e.value.mutable_data();
    std::vector<double> g(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double orig = p[i];
      p[i] = orig + h;
      const double up = f(params);
      p[i] = orig - h;
      const double down = f(params);
      p[i] = orig;
      g[i] = (up - down) / (2.0 * h);
    }
    out.emplace(name, Tensor::from(e.value.shape(), std::move(g)));
  }
  return out;
}

NamedTensors analytic_grad(const LossFn& f, ParamStore& params) {
  params.zero_grad();
  Tensor loss = f(params);
  loss.backward();
  NamedTensors g = params.grads();
  params.zero_grad();
  return g;
}

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

std::string param_group(const std::string& name) {
  const auto pos = name.rfind('.');
  return pos == std::string::npos ? name : name.substr(0, pos);
}

GradCheckReport compare_grads(const NamedTensors& analytic, const NamedTensors& numeric,
                              double floor) {
  if (analytic.size() != numeric.size()) {
    throw ConsistencyError("compare_grads: gradient sets differ in size");
  }
  GradCheckReport rep;
  for (const auto& [name, a] : analytic) {
    auto it = numeric.find(name);
    if (it == numeric.end()) throw ConsistencyError("compare_grads: missing " + name);
    const auto av = a.data();
    const auto nv = it->second.data();
    auto& grp = rep.groups[param_group(name)];
    for (std::size_t i = 0; i < av.size(); ++i) {
      const double err = relative_error(av[i], nv[i], floor);
      GradCheckReport::Worst w{err, name, i, av[i], nv[i]};
      if (err >= grp.error) grp = w;
      if (err >= rep.worst.error) rep.worst = w;
    }
  }
  return rep;
}

GradCheckReport check_gradients(const LossFn& f, ParamStore& params, double h) {
  NamedTensors a = analytic_grad(f, params);
  NoGradGuard guard;
  NamedTensors n = finite_diff_grad([&](const ParamStore& p) { return f(p).item(); },
                                    params, h);
  return compare_grads(a, n);
}

}  // namespace castformer
