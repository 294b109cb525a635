#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "moelab/tensor.hpp"

namespace moelab {

// One parameter under check: the 64-bit tensor f reads (perturbed in place)
// and the analytic gradient claimed for it. The analytic values may come from
// a 32-bit backward pass cast up; the finite-difference baseline itself is
// always evaluated in 64-bit.
struct FdParam {
  std::string name;
  Tensor<double> tensor;
  std::vector<double> analytic;
};

inline FdParam fd_param(std::string name, Tensor<double> t) {
  if (!t.requires_grad())
    throw TrainError("fd_param: tensor '" + name + "' has no grad to check");
  std::vector<double> g(t.grad(), t.grad() + t.numel());
  return FdParam{std::move(name), std::move(t), std::move(g)};
}

template <class Real>
FdParam fd_param_from(std::string name, Tensor<double> t,
                      const Tensor<Real>& grad_source) {
  if (!grad_source.requires_grad())
    throw TrainError("fd_param_from: '" + name + "' has no grad to check");
  if (grad_source.numel() != t.numel())
    throw ShapeError("fd_param_from: grad/tensor numel mismatch for '" + name +
                     "'");
  std::vector<double> g(grad_source.numel());
  for (std::size_t i = 0; i < g.size(); ++i)
    g[i] = static_cast<double>(grad_source.grad()[i]);
  return FdParam{std::move(name), std::move(t), std::move(g)};
}

struct FdReport {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::string worst_name;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_fd = 0.0;
  std::size_t coords_checked = 0;
  bool finite = true;  // false iff f produced NaN/Inf during probing
  bool pass = false;

  std::string describe() const;
};

// Central-difference check: fd_i = (f(p_i+h) - f(p_i-h)) / 2h per coordinate.
// Relative error uses max(|analytic|, |fd|, denom_floor) as denominator; the
// floor absorbs finite-difference noise on near-zero coordinates. f must be a
// deterministic pure function of the param values (re-derive any Rng inside).
inline FdReport finite_difference_check(const std::function<double()>& f,
                                        std::vector<FdParam>& params,
                                        double h, double tol,
                                        double denom_floor = 1e-3) {
  FdReport rep;
  for (FdParam& p : params) {
    if (p.analytic.size() != p.tensor.numel())
      throw ShapeError("finite_difference_check: analytic size mismatch for '" +
                       p.name + "'");
    double* v = p.tensor.data();
    for (std::size_t i = 0; i < p.tensor.numel(); ++i) {
      const double saved = v[i];
      v[i] = saved + h;
      const double fp = f();
      v[i] = saved - h;
      const double fm = f();
      v[i] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        rep.finite = false;
        rep.worst_name = p.name;
        rep.worst_index = i;
        rep.pass = false;
        return rep;
      }
      const double fd = (fp - fm) / (2.0 * h);
      const double a = p.analytic[i];
      const double abs_err = std::abs(a - fd);
      const double rel =
          abs_err / std::max({std::abs(a), std::abs(fd), denom_floor});
      ++rep.coords_checked;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.max_abs_err = abs_err;
        rep.worst_name = p.name;
        rep.worst_index = i;
        rep.worst_analytic = a;
        rep.worst_fd = fd;
      }
    }
  }
  rep.pass = rep.finite && rep.max_rel_err < tol;
  return rep;
}

inline std::string FdReport::describe() const {
  if (!finite)
    return "non-finite loss while probing " + worst_name + "[" +
           std::to_string(worst_index) + "]";
  return "max rel err " + std::to_string(max_rel_err) + " at " + worst_name +
         "[" + std::to_string(worst_index) + "] (analytic " +
         std::to_string(worst_analytic) + ", fd " + std::to_string(worst_fd) +
         ", " + std::to_string(coords_checked) + " coords)";
}

}  // namespace moelab
