#pragma once

#include <cstdint>

#include <Eigen/Dense>

namespace mpdc::nn {

struct AdamState {
  Eigen::VectorXd first_moment;
  Eigen::VectorXd second_moment;
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double learning_rate = 1e-3;
  double epsilon = 1e-8;

  static AdamState for_params(std::size_t n, double learning_rate);
};

/// One bias-corrected Adam update of `params` in place. Throws NumericalError
/// on a non-finite gradient, leaving params and state untouched.
void adam_step(AdamState& state, Eigen::VectorXd& params, const Eigen::VectorXd& gradient);

}  // namespace mpdc::nn
