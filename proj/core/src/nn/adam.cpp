#include "mpdc/nn/adam.hpp"

#include <cmath>
#include <string>

#include "mpdc/errors.hpp"

namespace mpdc::nn {

AdamState AdamState::for_params(std::size_t n, double learning_rate) {
  AdamState s;
  s.first_moment = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
  s.second_moment = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
  s.learning_rate = learning_rate;
  return s;
}

void adam_step(AdamState& state, Eigen::VectorXd& params, const Eigen::VectorXd& gradient) {
  if (gradient.size() != params.size() || state.first_moment.size() != params.size() ||
      state.second_moment.size() != params.size()) {
    throw ValidationError("adam_step: parameter, gradient and moment sizes differ");
  }
  if (!gradient.allFinite()) {
    throw NumericalError("adam_step: non-finite gradient at step " + std::to_string(state.step + 1));
  }
  state.step += 1;
  state.first_moment = state.beta1 * state.first_moment + (1.0 - state.beta1) * gradient;
  state.second_moment =
      state.beta2 * state.second_moment + (1.0 - state.beta2) * gradient.cwiseAbs2();
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  params.array() -= state.learning_rate * (state.first_moment.array() / c1) /
                    ((state.second_moment.array() / c2).sqrt() + state.epsilon);
}

}  // namespace mpdc::nn
