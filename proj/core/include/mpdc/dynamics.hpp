#pragma once

#include <string>
#include <vector>

#include "mpdc/ensemble.hpp"
#include "mpdc/field.hpp"

namespace mpdc {

/// Integration grid on [0, T]. Between consecutive checkpoints the step is
/// uniform and no larger than the requested dt, so every checkpoint is a grid
/// time.
struct TimeGrid {
  std::vector<double> times;
  std::vector<int> checkpoint_steps;  // grid index of each checkpoint

  static TimeGrid make(double horizon, double dt, std::vector<double> checkpoints);
  static TimeGrid uniform(double horizon, int steps);

  int steps() const { return static_cast<int>(times.size()) - 1; }
  double horizon() const { return times.back(); }
  double step(int j) const { return times[static_cast<std::size_t>(j) + 1] - times[static_cast<std::size_t>(j)]; }
  /// Trapezoid quadrature weights over the grid.
  Vector trapezoid_weights() const;
  std::vector<double> checkpoint_times() const;
};

/// Particle states at every grid time; weights are constant along the flow.
struct Trajectory {
  TimeGrid grid;
  std::vector<Matrix> states;  // states[j] is d x N at grid.times[j]
  Vector weights;
  std::string scheme = "rk4";

  ParticleEnsemble at_step(int j) const;
  ParticleEnsemble at_checkpoint(int c) const;
  const Matrix& final_state() const { return states.back(); }
  int size() const { return static_cast<int>(weights.size()); }
  int dim() const { return static_cast<int>(states.front().rows()); }
};

/// One classical RK4 step of dx/dt = u(x, t).
Matrix rk4_step(const VectorField& u, const Matrix& x, double t, double h);

Trajectory rollout(const ParticleEnsemble& initial, const VectorField& u, const TimeGrid& grid);
Trajectory rollout(const ParticleEnsemble& initial, const VectorField& u, double horizon, double dt,
                   const std::vector<double>& checkpoints);

/// A pathwise loss L = sum_j q_j running(j) + terminal, q the trapezoid
/// weights of the grid. Implementations return the value and, when the output
/// pointers are non-null, write d/dX and d/dU (both d x N; U = u(X, t_j)).
class PathLoss {
 public:
  virtual ~PathLoss() = default;
  virtual double running(int step, double t, const Matrix& x, const Matrix& u, Matrix* d_x,
                         Matrix* d_u) const = 0;
  virtual double terminal(const Matrix& x, Matrix* d_x) const = 0;
};

struct SweepResult {
  double loss = 0.0;
  Vector param_grad;
  /// costates[j] = gradient with respect to X_j of the part of the loss
  /// accumulated on [t_j, T]. costates[0] is the full gradient in X_0.
  std::vector<Matrix> costates;
};

/// Reverse-mode sweep through the unrolled RK4 steps of `trajectory`, which
/// must have been produced by rolling out `u`.
SweepResult reverse_sweep(const VectorField& u, const Trajectory& trajectory, const PathLoss& loss,
                          bool want_param_grad, bool keep_costates);

struct RolloutGradient {
  Trajectory trajectory;
  double loss = 0.0;
  Vector param_grad;
};

RolloutGradient rollout_with_param_grad(const ParticleEnsemble& initial, const VectorField& u,
                                        const TimeGrid& grid, const PathLoss& loss);

/// Law of the Gaussian initial density pushed forward by u = x/(t - T - 1):
/// coordinates are scaled by (T + 1 - t)/(T + 1).
struct PushforwardGaussian {
  double coordinate_scale = 1.0;
  Vector mean;
  double variance = 1.0;
};

PushforwardGaussian pushforward_density_check(const GaussianDensity& initial, double horizon, double t);

}  // namespace mpdc
