#include "mpdc/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "mpdc/errors.hpp"

namespace mpdc {
namespace {

void require_finite_state(const Matrix& x, double t) {
  if (x.allFinite()) return;
  for (Eigen::Index i = 0; i < x.cols(); ++i) {
    if (!x.col(i).allFinite()) {
      std::ostringstream msg;
      msg << "rollout: particle " << i << " became non-finite at t=" << t;
      throw NumericalError(msg.str());
    }
  }
}

Matrix rk4_vjp(const VectorField& u, const Matrix& x, double t, double h, const Matrix& cot,
               Vector* param_grad) {
  const Matrix k1 = u.eval(x, t);
  const Matrix y2 = x + 0.5 * h * k1;
  const Matrix k2 = u.eval(y2, t + 0.5 * h);
  const Matrix y3 = x + 0.5 * h * k2;
  const Matrix k3 = u.eval(y3, t + 0.5 * h);
  const Matrix y4 = x + h * k3;

  Matrix bx = cot;
  Matrix bk3 = (h / 3.0) * cot;
  Matrix bk2 = (h / 3.0) * cot;
  Matrix bk1 = (h / 6.0) * cot;
  const Matrix by4 = u.vjp(y4, t + h, (h / 6.0) * cot, param_grad);
  bx += by4;
  bk3 += h * by4;
  const Matrix by3 = u.vjp(y3, t + 0.5 * h, bk3, param_grad);
  bx += by3;
  bk2 += 0.5 * h * by3;
  const Matrix by2 = u.vjp(y2, t + 0.5 * h, bk2, param_grad);
  bx += by2;
  bk1 += 0.5 * h * by2;
  bx += u.vjp(x, t, bk1, param_grad);
  return bx;
}

}  // namespace

TimeGrid TimeGrid::make(double horizon, double dt, std::vector<double> checkpoints) {
  if (!(horizon > 0.0) || !std::isfinite(horizon)) throw ValidationError("time horizon must be positive");
  if (!(dt > 0.0) || !std::isfinite(dt)) throw ValidationError("dt must be positive");
  for (std::size_t i = 0; i < checkpoints.size(); ++i) {
    const double c = checkpoints[i];
    if (c < 0.0 || c > horizon) throw ValidationError("checkpoint times must lie in [0, T]");
    if (i > 0 && !(c > checkpoints[i - 1])) {
      throw ValidationError("checkpoint times must be strictly increasing");
    }
  }
  std::vector<double> knots = checkpoints;
  knots.push_back(0.0);
  knots.push_back(horizon);
  std::sort(knots.begin(), knots.end());
  knots.erase(std::unique(knots.begin(), knots.end()), knots.end());
  if (checkpoints.size() > 1) {
    double min_gap = horizon;
    for (std::size_t i = 1; i < checkpoints.size(); ++i) {
      min_gap = std::min(min_gap, checkpoints[i] - checkpoints[i - 1]);
    }
    if (dt > min_gap * (1.0 + 1e-12)) throw ValidationError("dt exceeds the smallest checkpoint gap");
  }

  TimeGrid g;
  g.times.push_back(0.0);
  for (std::size_t s = 1; s < knots.size(); ++s) {
    const double a = knots[s - 1];
    const double b = knots[s];
    const int n = std::max(1, static_cast<int>(std::ceil((b - a) / dt - 1e-9)));
    const double h = (b - a) / n;
    for (int i = 1; i < n; ++i) g.times.push_back(a + i * h);
    g.times.push_back(b);
  }
  for (double c : checkpoints) {
    const auto it = std::lower_bound(g.times.begin(), g.times.end(), c);
    g.checkpoint_steps.push_back(static_cast<int>(it - g.times.begin()));
  }
  return g;
}

TimeGrid TimeGrid::uniform(double horizon, int steps) {
  if (steps < 1) throw ValidationError("a time grid needs at least one step");
  return make(horizon, horizon / steps, {0.0, horizon});
}

Vector TimeGrid::trapezoid_weights() const {
  Vector q = Vector::Zero(static_cast<Eigen::Index>(times.size()));
  for (int j = 0; j < steps(); ++j) {
    q[j] += 0.5 * step(j);
    q[j + 1] += 0.5 * step(j);
  }
  return q;
}

std::vector<double> TimeGrid::checkpoint_times() const {
  std::vector<double> out;
  for (int s : checkpoint_steps) out.push_back(times[static_cast<std::size_t>(s)]);
  return out;
}

ParticleEnsemble Trajectory::at_step(int j) const {
  ParticleEnsemble e;
  e.points = states.at(static_cast<std::size_t>(j));
  e.weights = weights;
  e.time = grid.times.at(static_cast<std::size_t>(j));
  return e;
}

ParticleEnsemble Trajectory::at_checkpoint(int c) const {
  return at_step(grid.checkpoint_steps.at(static_cast<std::size_t>(c)));
}

Matrix rk4_step(const VectorField& u, const Matrix& x, double t, double h) {
  const Matrix k1 = u.eval(x, t);
  const Matrix k2 = u.eval(x + 0.5 * h * k1, t + 0.5 * h);
  const Matrix k3 = u.eval(x + 0.5 * h * k2, t + 0.5 * h);
  const Matrix k4 = u.eval(x + h * k3, t + h);
  return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

Trajectory rollout(const ParticleEnsemble& initial, const VectorField& u, const TimeGrid& grid) {
  initial.validate();
  if (u.dim() != initial.dim()) throw ValidationError("rollout: field and ensemble dimensions differ");
  Trajectory traj;
  traj.grid = grid;
  traj.weights = initial.weights;
  traj.states.reserve(grid.times.size());
  traj.states.push_back(initial.points);
  for (int j = 0; j < grid.steps(); ++j) {
    Matrix next = rk4_step(u, traj.states.back(), grid.times[static_cast<std::size_t>(j)], grid.step(j));
    require_finite_state(next, grid.times[static_cast<std::size_t>(j) + 1]);
    traj.states.push_back(std::move(next));
  }
  return traj;
}

Trajectory rollout(const ParticleEnsemble& initial, const VectorField& u, double horizon, double dt,
                   const std::vector<double>& checkpoints) {
  return rollout(initial, u, TimeGrid::make(horizon, dt, checkpoints));
}

SweepResult reverse_sweep(const VectorField& u, const Trajectory& traj, const PathLoss& loss,
                          bool want_param_grad, bool keep_costates) {
  const int steps = traj.grid.steps();
  const Vector q = traj.grid.trapezoid_weights();
  const std::size_t np = u.num_params();
  SweepResult out;
  if (want_param_grad) out.param_grad = Vector::Zero(static_cast<Eigen::Index>(np));
  Vector* pg = want_param_grad ? &out.param_grad : nullptr;

  // Cotangent of the running integrand at grid step j, through U = u(X).
  auto running_cotangent = [&](int j) {
    const double t = traj.grid.times[static_cast<std::size_t>(j)];
    const Matrix& x = traj.states[static_cast<std::size_t>(j)];
    const Matrix uval = u.eval(x, t);
    Matrix dx = Matrix::Zero(x.rows(), x.cols());
    Matrix du = Matrix::Zero(x.rows(), x.cols());
    out.loss += q[j] * loss.running(j, t, x, uval, &dx, &du);
    if (du.squaredNorm() > 0.0) {
      Vector tmp = want_param_grad ? Vector::Zero(static_cast<Eigen::Index>(np)) : Vector();
      dx += u.vjp(x, t, du, want_param_grad ? &tmp : nullptr);
      if (want_param_grad) out.param_grad += q[j] * tmp;
    }
    return dx;
  };

  if (keep_costates) out.costates.resize(static_cast<std::size_t>(steps) + 1);
  const Matrix& xt = traj.states.back();
  Matrix lambda = Matrix::Zero(xt.rows(), xt.cols());
  out.loss += loss.terminal(xt, &lambda);
  Matrix c_next = running_cotangent(steps);
  if (steps == 0) lambda += c_next;
  if (keep_costates) out.costates.back() = lambda;

  for (int j = steps - 1; j >= 0; --j) {
    const double h = traj.grid.step(j);
    const Matrix c_here = running_cotangent(j);
    const Matrix cot = lambda + 0.5 * h * c_next;
    lambda = rk4_vjp(u, traj.states[static_cast<std::size_t>(j)], traj.grid.times[static_cast<std::size_t>(j)],
                     h, cot, pg) +
             0.5 * h * c_here;
    if (keep_costates) out.costates[static_cast<std::size_t>(j)] = lambda;
    c_next = c_here;
  }
  return out;
}

RolloutGradient rollout_with_param_grad(const ParticleEnsemble& initial, const VectorField& u,
                                        const TimeGrid& grid, const PathLoss& loss) {
  RolloutGradient r;
  r.trajectory = rollout(initial, u, grid);
  SweepResult s = reverse_sweep(u, r.trajectory, loss, true, false);
  r.loss = s.loss;
  r.param_grad = std::move(s.param_grad);
  return r;
}

PushforwardGaussian pushforward_density_check(const GaussianDensity& initial, double horizon, double t) {
  if (!(horizon > 0.0)) throw ValidationError("pushforward_density_check: T must be positive");
  if (t < 0.0 || t > horizon) throw ValidationError("pushforward_density_check: t outside [0, T]");
  PushforwardGaussian p;
  p.coordinate_scale = (horizon + 1.0 - t) / (horizon + 1.0);
  p.mean = p.coordinate_scale * initial.mean;
  p.variance = p.coordinate_scale * p.coordinate_scale * initial.variance;
  return p;
}

}  // namespace mpdc
