#pragma once

// Finite-difference gradient oracle and the reverse-mode / central-difference
// comparison used throughout the test suite.

#include <functional>
#include <string>
#include <vector>

#include "acdit/param_store.hpp"

namespace acdit {

// Scalar objective over the parameter store. The callable must build a fresh
// graph on every invocation and return the scalar loss node.
template <typename T>
using LossFn = std::function<Var<T>(ParamStore<T>&)>;

// Central differences (f(θ+eps·e_i) − f(θ−eps·e_i)) / (2·eps) per element of
// the named parameter. The parameter value is restored afterwards.
template <typename T>
Array<T> finite_difference_gradient(const LossFn<T>& f, ParamStore<T>& store,
                                    const std::string& path, double eps) {
  if (!(eps > 0.0)) throw ConfigError("finite_difference_gradient: eps must be > 0");
  Var<T>& p = store.at(path);
  Array<T> grad({p.rows(), p.cols()});
  NoGradGuard ng;
  T* values = p.data();
  for (int64_t i = 0; i < p.numel(); ++i) {
    T saved = values[i];
    values[i] = saved + static_cast<T>(eps);
    T f_plus = f(store).item();
    values[i] = saved - static_cast<T>(eps);
    T f_minus = f(store).item();
    values[i] = saved;
    if (!std::isfinite(static_cast<double>(f_plus)) ||
        !std::isfinite(static_cast<double>(f_minus)))
      throw NumericError("finite_difference_gradient: non-finite objective at '" +
                         path + "' element " + std::to_string(i));
    grad.values[i] =
        (f_plus - f_minus) / static_cast<T>(2.0 * eps);
  }
  return grad;
}

struct GradCheckEntry {
  std::string path;
  double max_rel_err = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tol = 0.0;
  bool pass = false;
};

// Per-path relative error ‖g_ad − g_fd‖∞ / max(‖g_fd‖∞, 1e-12); pass iff all
// paths come in under tol.
template <typename T>
GradCheckReport grad_check(const LossFn<T>& f, ParamStore<T>& store,
                           const std::vector<std::string>& paths, double eps,
                           double tol) {
  for (const auto& path : paths) store.at(path);  // missing path → LookupError

  store.zero_grad();
  Var<T> loss = f(store);
  backward(loss);

  GradCheckReport report;
  report.tol = tol;
  report.pass = true;
  for (const auto& path : paths) {
    Var<T>& p = store.at(path);
    if (!p.requires_grad())
      throw ConfigError("grad_check: parameter not trainable: " + path);
    std::vector<T> g_ad(p.node()->grad.begin(), p.node()->grad.end());
    if (g_ad.empty()) g_ad.assign(static_cast<size_t>(p.numel()), T(0));
    Array<T> g_fd = finite_difference_gradient(f, store, path, eps);
    double max_ad_fd = 0.0, max_fd = 0.0;
    for (int64_t i = 0; i < p.numel(); ++i) {
      max_ad_fd = std::max(max_ad_fd,
                           std::abs(static_cast<double>(g_ad[i]) -
                                    static_cast<double>(g_fd.values[i])));
      max_fd = std::max(max_fd, std::abs(static_cast<double>(g_fd.values[i])));
    }
    GradCheckEntry entry;
    entry.path = path;
    entry.max_rel_err = max_ad_fd / std::max(max_fd, 1e-12);
    if (entry.max_rel_err >= tol) report.pass = false;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace acdit
