// Independent reference computations shared by the unit tests and the
// acceptance binary. Nothing in here calls into the library's derivative code.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include <Eigen/Dense>

namespace oracle {

/// Central finite-difference gradient of a scalar function.
inline Eigen::VectorXd central_gradient(const std::function<double(const Eigen::VectorXd&)>& f,
                                        const Eigen::VectorXd& at, double h) {
  Eigen::VectorXd g(at.size());
  Eigen::VectorXd p = at;
  for (Eigen::Index i = 0; i < at.size(); ++i) {
    const double keep = p[i];
    p[i] = keep + h;
    const double up = f(p);
    p[i] = keep - h;
    const double down = f(p);
    p[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// ||a - b|| / max(||a||, ||b||, floor).
inline double relative_error(const Eigen::VectorXd& a, const Eigen::VectorXd& b,
                             double floor = 1e-12) {
  const double scale = std::max({a.norm(), b.norm(), floor});
  return (a - b).norm() / scale;
}

/// Least-squares slope of log(y) against log(x).
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double lx = std::log(x[i]);
    const double ly = std::log(y[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  const double dn = static_cast<double>(n);
  return (dn * sxy - sx * sy) / (dn * sxx - sx * sx);
}

}  // namespace oracle
