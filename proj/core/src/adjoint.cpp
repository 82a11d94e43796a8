#include "mpdc/adjoint.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "mpdc/errors.hpp"
#include "mpdc/nn/adam.hpp"

namespace mpdc {
namespace {

int nearest_step(const TimeGrid& grid, double t) {
  const auto it = std::lower_bound(grid.times.begin(), grid.times.end(), t);
  if (it == grid.times.begin()) return 0;
  if (it == grid.times.end()) return grid.steps();
  const int hi = static_cast<int>(it - grid.times.begin());
  return (t - grid.times[static_cast<std::size_t>(hi) - 1] <= *it - t) ? hi - 1 : hi;
}

struct PathEnd {
  Matrix end;
  Vector accumulated;
};

// RK4 on the augmented system dX/ds = u(X, s), dS/ds = source(X, s).
PathEnd integrate_characteristics(const AdjointProblem& p, Matrix x, double t, double dt) {
  const double remaining = p.horizon - t;
  PathEnd out;
  out.accumulated = Vector::Zero(x.cols());
  if (remaining > 0.0) {
    const int n = std::max(1, static_cast<int>(std::ceil(remaining / dt - 1e-9)));
    const double h = remaining / n;
    const VectorField& u = *p.u;
    for (int i = 0; i < n; ++i) {
      const double s = t + i * h;
      const Matrix k1 = u.eval(x, s);
      const Vector r1 = p.source_at(x, s, k1, false).value;
      const Matrix y2 = x + 0.5 * h * k1;
      const Matrix k2 = u.eval(y2, s + 0.5 * h);
      const Vector r2 = p.source_at(y2, s + 0.5 * h, k2, false).value;
      const Matrix y3 = x + 0.5 * h * k2;
      const Matrix k3 = u.eval(y3, s + 0.5 * h);
      const Vector r3 = p.source_at(y3, s + 0.5 * h, k3, false).value;
      const Matrix y4 = x + h * k3;
      const Matrix k4 = u.eval(y4, s + h);
      const Vector r4 = p.source_at(y4, s + h, k4, false).value;
      x += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
      out.accumulated += (h / 6.0) * (r1 + 2.0 * r2 + 2.0 * r3 + r4);
      if (!x.allFinite() || !out.accumulated.allFinite()) {
        for (Eigen::Index c = 0; c < x.cols(); ++c) {
          if (!x.col(c).allFinite() || !std::isfinite(out.accumulated[c])) {
            std::ostringstream msg;
            msg << "characteristics: path " << c << " started at t=" << t << " diverged at s="
                << s + h;
            throw NumericalError(msg.str());
          }
        }
      }
    }
  }
  out.end = std::move(x);
  return out;
}

Vector terminal_values(const TerminalTerm& term, const Matrix& x) {
  Vector v(x.cols());
  for (Eigen::Index i = 0; i < x.cols(); ++i) v[i] = term.g(x.col(i));
  return v;
}

Matrix terminal_gradients(const TerminalTerm& term, const Matrix& x) {
  Matrix g(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.cols(); ++i) g.col(i) = term.grad_g(x.col(i));
  return g;
}

class SeedLoss final : public PathLoss {
 public:
  SeedLoss(const AdjointProblem& p, const Trajectory& seeds, bool self)
      : p_(p), seeds_(seeds), self_(self), r_(static_cast<std::size_t>(seeds.grid.steps()) + 1) {}

  double running(int step, double t, const Matrix& x, const Matrix& u, Matrix* d_x,
                 Matrix* d_u) const override {
    DerivEvaluation e;
    if (self_) {
      e = running_deriv(p_.spec, seeds_.at_step(step), x, u, true, true);
    } else {
      e = p_.source_at(x, t, u, true);
    }
    if (d_x) *d_x = e.grad_x;
    if (d_u) *d_u = e.grad_u;
    r_[static_cast<std::size_t>(step)] = e.value;
    return e.value.sum();
  }

  double terminal(const Matrix& x, Matrix* d_x) const override {
    if (d_x) *d_x = terminal_gradients(p_.spec.terminal, x);
    return terminal_values(p_.spec.terminal, x).sum();
  }

  const std::vector<Vector>& sources() const { return r_; }

 private:
  const AdjointProblem& p_;
  const Trajectory& seeds_;
  bool self_;
  mutable std::vector<Vector> r_;
};

}  // namespace

void AdjointProblem::validate() const {
  if (!u) throw ValidationError("adjoint problem has no control field");
  if (!(horizon > 0.0)) throw ValidationError("adjoint problem horizon must be positive");
  if (spec.terminal.target.size() != u->dim()) {
    throw ValidationError("terminal reward dimension differs from the control");
  }
  if (spec.has_interaction() && !density) {
    throw ValidationError("an interaction term needs the density trajectory");
  }
}

DerivEvaluation AdjointProblem::source_at(const Matrix& x, double t, const Matrix& u_at_x,
                                          bool gradients) const {
  if (spec.has_interaction()) {
    return running_deriv(spec, density->at_step(nearest_step(density->grid, t)), x, u_at_x, false,
                         gradients);
  }
  // Without interaction the density is not read; any nonempty ensemble works.
  return running_deriv(spec, ParticleEnsemble::uniform(Matrix::Zero(x.rows(), 1)), x, u_at_x,
                       false, gradients);
}

Vector AdjointProblem::source(const Matrix& x, std::span<const double> times,
                              const Matrix& u_at_x) const {
  if (static_cast<Eigen::Index>(times.size()) != x.cols()) {
    throw ValidationError("source: one time per column required");
  }
  if (!spec.has_interaction()) return source_at(x, 0.0, u_at_x, false).value;
  Vector out(x.cols());
  // Group columns by the density snapshot they read.
  std::vector<int> step(times.size());
  for (std::size_t i = 0; i < times.size(); ++i) step[i] = nearest_step(density->grid, times[i]);
  std::vector<int> order(times.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return step[static_cast<std::size_t>(a)] < step[static_cast<std::size_t>(b)]; });
  std::size_t begin = 0;
  while (begin < order.size()) {
    std::size_t end = begin;
    const int s = step[static_cast<std::size_t>(order[begin])];
    while (end < order.size() && step[static_cast<std::size_t>(order[end])] == s) ++end;
    Matrix xs(x.rows(), static_cast<Eigen::Index>(end - begin));
    Matrix us(x.rows(), xs.cols());
    for (std::size_t k = begin; k < end; ++k) {
      xs.col(static_cast<Eigen::Index>(k - begin)) = x.col(order[k]);
      us.col(static_cast<Eigen::Index>(k - begin)) = u_at_x.col(order[k]);
    }
    Vector v = running_deriv(spec, density->at_step(s), xs, us, false, false).value;
    for (std::size_t k = begin; k < end; ++k) out[order[k]] = v[static_cast<Eigen::Index>(k - begin)];
    begin = end;
  }
  return out;
}

Vector AnalyticAdjoint::values(const Matrix& x, double t) const {
  Vector v(x.cols());
  for (Eigen::Index i = 0; i < x.cols(); ++i) v[i] = value_(x.col(i), t);
  return v;
}

Vector AnalyticAdjoint::time_derivatives(const Matrix& x, double t) const {
  Vector v(x.cols());
  for (Eigen::Index i = 0; i < x.cols(); ++i) v[i] = dt_(x.col(i), t);
  return v;
}

Matrix AnalyticAdjoint::gradients(const Matrix& x, double t) const {
  Matrix g(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.cols(); ++i) g.col(i) = grad_(x.col(i), t);
  return g;
}

Vector pde_residual(const AdjointModel& phi, const AdjointProblem& problem, const Matrix& x, double t) {
  const Matrix u = problem.u->eval(x, t);
  const Vector transport = u.cwiseProduct(phi.gradients(x, t)).colwise().sum().transpose();
  return phi.time_derivatives(x, t) + transport + problem.source_at(x, t, u, false).value;
}

CharacteristicsSolution::CharacteristicsSolution(AdjointProblem problem, double dt,
                                                 std::optional<SeedTable> table)
    : problem_(std::move(problem)), dt_(dt), table_(std::move(table)) {
  problem_.validate();
  if (!(dt_ > 0.0)) throw ValidationError("characteristics dt must be positive");
}

Vector CharacteristicsSolution::values(const Matrix& x, double t) const {
  if (t < 0.0 || t > problem_.horizon) throw ValidationError("adjoint query time outside [0, T]");
  PathEnd p = integrate_characteristics(problem_, x, t, dt_);
  return terminal_values(problem_.spec.terminal, p.end) + p.accumulated;
}

Vector CharacteristicsSolution::time_derivatives(const Matrix& x, double t) const {
  const double h = 1e-4 * problem_.horizon;
  const double lo = std::max(0.0, t - h);
  const double hi = std::min(problem_.horizon, t + h);
  return (values(x, hi) - values(x, lo)) / (hi - lo);
}

Matrix CharacteristicsSolution::gradients(const Matrix& x, double t) const {
  const Eigen::Index d = x.rows();
  const Eigen::Index m = x.cols();
  Matrix probes(d, 2 * d * m);
  Vector steps(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    steps[i] = 1e-4 * std::max(1.0, x.col(i).cwiseAbs().maxCoeff());
    for (Eigen::Index k = 0; k < d; ++k) {
      probes.col((i * d + k) * 2) = x.col(i);
      probes.col((i * d + k) * 2 + 1) = x.col(i);
      probes((k), (i * d + k) * 2) += steps[i];
      probes((k), (i * d + k) * 2 + 1) -= steps[i];
    }
  }
  const Vector v = values(probes, t);
  Matrix g(d, m);
  for (Eigen::Index i = 0; i < m; ++i) {
    for (Eigen::Index k = 0; k < d; ++k) {
      g(k, i) = (v[(i * d + k) * 2] - v[(i * d + k) * 2 + 1]) / (2.0 * steps[i]);
    }
  }
  return g;
}

SeedTable tabulate_along(const AdjointProblem& problem, std::shared_ptr<const Trajectory> seeds) {
  problem.validate();
  if (!seeds) throw ValidationError("tabulate_along: no seed trajectory");
  const Trajectory& tr = *seeds;
  SeedLoss loss(problem, tr, problem.density.get() == seeds.get());
  SweepResult sweep = reverse_sweep(*problem.u, tr, loss, false, true);

  SeedTable table;
  table.seeds = seeds;
  table.gradients = std::move(sweep.costates);
  const int steps = tr.grid.steps();
  const std::vector<Vector>& r = loss.sources();
  table.values.resize(static_cast<std::size_t>(steps) + 1);
  table.values.back() = terminal_values(problem.spec.terminal, tr.final_state());
  for (int j = steps - 1; j >= 0; --j) {
    const std::size_t sj = static_cast<std::size_t>(j);
    table.values[sj] = table.values[sj + 1] + 0.5 * tr.grid.step(j) * (r[sj] + r[sj + 1]);
  }
  return table;
}

std::shared_ptr<CharacteristicsSolution> solve_characteristics(const AdjointProblem& problem, double dt,
                                                               bool tabulate) {
  std::optional<SeedTable> table;
  if (tabulate && problem.density) table = tabulate_along(problem, problem.density);
  return std::make_shared<CharacteristicsSolution>(problem, dt, std::move(table));
}

CollocationSolution::CollocationSolution(AdjointProblem problem, nn::ParamField trunk)
    : problem_(std::move(problem)), trunk_(std::move(trunk)) {
  problem_.validate();
  if (trunk_.input_dim() != problem_.dim() + 1 || trunk_.output_dim() != 1) {
    throw ValidationError("collocation trunk must map R^{d+1} to R");
  }
}

Vector CollocationSolution::values(const Matrix& x, double t) const {
  const double s = t / problem_.horizon;
  const Vector trunk = trunk_.evaluate(nn::space_time_inputs(x, t)).row(0).transpose();
  return (1.0 - s) * trunk + s * terminal_values(problem_.spec.terminal, x);
}

Vector CollocationSolution::time_derivatives(const Matrix& x, double t) const {
  const double T = problem_.horizon;
  nn::Tape tape;
  nn::TangentGraph tg = trunk_.record_with_tangents(tape, nn::space_time_inputs(x, t));
  const Vector trunk = tape.value(tg.graph.output).row(0).transpose();
  const Vector dtrunk = tape.value(tg.tangents.back()).row(0).transpose();
  return -trunk / T + (1.0 - t / T) * dtrunk + terminal_values(problem_.spec.terminal, x) / T;
}

Matrix CollocationSolution::gradients(const Matrix& x, double t) const {
  const double s = t / problem_.horizon;
  nn::Tape tape;
  nn::TangentGraph tg = trunk_.record_with_tangents(tape, nn::space_time_inputs(x, t));
  Matrix g(x.rows(), x.cols());
  for (Eigen::Index k = 0; k < x.rows(); ++k) g.row(k) = tape.value(tg.tangents[static_cast<std::size_t>(k)]).row(0);
  return (1.0 - s) * g + s * terminal_gradients(problem_.spec.terminal, x);
}

double CollocationSolution::loss_and_grad(const Matrix& x, std::span<const double> times,
                                          const Vector& weights, Vector* grad) const {
  const double T = problem_.horizon;
  const Eigen::Index b = x.cols();
  const Eigen::Index d = x.rows();
  Vector tv = Eigen::Map<const Vector>(times.data(), b);
  const Matrix u = problem_.u->eval_at(x, times);
  const Vector r = problem_.source(x, times, u);
  const Vector g = terminal_values(problem_.spec.terminal, x);
  const Matrix gg = terminal_gradients(problem_.spec.terminal, x);
  const Vector s = tv / T;
  const Vector a = Vector::Ones(b) - s;

  // Terms of the residual that do not depend on the trunk.
  Vector fixed = g / T + r;
  fixed.array() += (u.cwiseProduct(gg).colwise().sum().transpose().array() * s.array());

  nn::Tape tape;
  nn::TangentGraph tg = trunk_.record_with_tangents(tape, nn::space_time_inputs(x, tv));
  nn::Var res = tape.scale(tg.graph.output, -1.0 / T);
  res = tape.add(res, tape.mul(tape.constant(a.transpose()), tg.tangents[static_cast<std::size_t>(d)]));
  for (Eigen::Index k = 0; k < d; ++k) {
    Matrix coeff = (u.row(k).transpose().array() * a.array()).matrix().transpose();
    res = tape.add(res, tape.mul(tape.constant(coeff), tg.tangents[static_cast<std::size_t>(k)]));
  }
  res = tape.add(res, tape.constant(fixed.transpose()));
  nn::Var loss = tape.sum(tape.mul(tape.square(res), tape.constant(weights.transpose())));
  const double value = tape.value(loss)(0, 0);
  if (grad != nullptr) {
    tape.backward(loss);
    *grad = trunk_.gather_param_grad(tape, tg.graph);
  }
  return value;
}

std::shared_ptr<CollocationSolution> solve_collocation(const AdjointProblem& problem,
                                                       const CollocationConfig& config,
                                                       const nn::ParamField* warm_start) {
  problem.validate();
  const int d = problem.dim();
  if (config.batch < 1 || config.steps < 0) throw ValidationError("collocation batch/steps invalid");
  if (config.reference.mean.size() != d || !(config.reference.variance > 0.0)) {
    throw ValidationError("collocation reference density must be a d-dimensional Gaussian");
  }
  nn::ParamField trunk;
  if (warm_start != nullptr) {
    trunk = *warm_start;
  } else {
    nn::FieldArchitecture arch{d + 1, 1, config.width, config.hidden_layers, nn::Activation::kTanh, true};
    nn::FieldInit init;
    init.zero_output = true;
    trunk = nn::ParamField(arch, config.seed, init);
  }
  auto sol = std::make_shared<CollocationSolution>(problem, std::move(trunk));

  std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, problem.horizon);
  const double sd = std::sqrt(config.reference.variance);
  nn::AdamState adam = nn::AdamState::for_params(sol->trunk().num_params(), config.learning_rate);

  CollocationReport report;
  Matrix x(d, config.batch);
  std::vector<double> times(static_cast<std::size_t>(config.batch));
  Vector weights(config.batch);
  Vector grad;
  for (int step = 0; step < config.steps; ++step) {
    for (int i = 0; i < config.batch; ++i) {
      for (int k = 0; k < d; ++k) x(k, i) = config.reference.mean[k] + sd * normal(rng);
      times[static_cast<std::size_t>(i)] = unif(rng);
    }
    if (config.importance_weights) {
      // 1 / p_ref up to a constant, normalized over the batch.
      for (int i = 0; i < config.batch; ++i) {
        weights[i] = (x.col(i) - config.reference.mean).squaredNorm() / (2.0 * config.reference.variance);
      }
      weights.array() = (weights.array() - weights.maxCoeff()).exp();
      weights /= weights.sum();
    } else {
      weights.setConstant(1.0 / config.batch);
    }
    const double loss = sol->loss_and_grad(x, times, weights, &grad);
    if (!std::isfinite(loss)) throw NumericalError("collocation loss became non-finite");
    report.loss_history.push_back(loss);
    Vector p = sol->trunk().params();
    nn::adam_step(adam, p, grad);
    sol->trunk().set_params(p);
  }
  report.steps = config.steps;
  // Smoothed final loss over the trailing tenth of training.
  const std::size_t n = report.loss_history.size();
  const std::size_t tail = std::max<std::size_t>(1, n / 10);
  if (n > 0) {
    report.final_loss = std::accumulate(report.loss_history.end() - static_cast<long>(tail),
                                        report.loss_history.end(), 0.0) /
                        static_cast<double>(tail);
  }
  report.below_threshold = report.final_loss <= config.residual_threshold;
  sol->set_report(std::move(report));
  return sol;
}

Vector phi_grad(const AdjointModel& solution, const Vector& x, double t) {
  Matrix q = x;
  return solution.gradients(q, t).col(0);
}

}  // namespace mpdc
