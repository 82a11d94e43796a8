#include "mpdc/hamiltonian_mp.hpp"

#include <chrono>
#include <cmath>
#include <random>
#include <sstream>

#include "mpdc/errors.hpp"

namespace mpdc {
namespace {

constexpr int kBestCheckInterval = 10;

// Everything the frozen-density loss needs at the (particle, time) columns.
struct ControlTargets {
  Matrix inputs;    // (d+1) x M network inputs
  Matrix base;      // base field values, d x M (zero without a base)
  Matrix grad_phi;  // d x M
  Matrix previous;  // u_prev, d x M
  Vector weights;   // q_j w_i, M
};

ControlTargets build_targets(const ControlField& previous, const AdjointSolution& phi) {
  const AdjointProblem& problem = phi.problem();
  std::shared_ptr<const Trajectory> traj;
  if (const SeedTable* table = phi.seed_table()) {
    traj = table->seeds;
  } else {
    traj = problem.density;
  }
  if (!traj) throw ValidationError("control update needs the density trajectory the adjoint was built on");
  const int d = traj->dim();
  const int n = traj->size();
  const int steps = traj->grid.steps();
  const Eigen::Index m = static_cast<Eigen::Index>(n) * (steps + 1);
  const Vector q = traj->grid.trapezoid_weights();

  ControlTargets c;
  c.inputs.resize(d + 1, m);
  c.base = Matrix::Zero(d, m);
  c.grad_phi.resize(d, m);
  c.previous.resize(d, m);
  c.weights.resize(m);
  for (int j = 0; j <= steps; ++j) {
    const double t = traj->grid.times[static_cast<std::size_t>(j)];
    const Matrix& x = traj->states[static_cast<std::size_t>(j)];
    const Eigen::Index off = static_cast<Eigen::Index>(j) * n;
    c.inputs.block(0, off, d, n) = x;
    c.inputs.block(d, off, 1, n).setConstant(t);
    if (previous.base()) c.base.middleCols(off, n) = previous.base()->eval(x, t);
    if (const SeedTable* table = phi.seed_table()) {
      c.grad_phi.middleCols(off, n) = table->gradients[static_cast<std::size_t>(j)];
    } else {
      c.grad_phi.middleCols(off, n) = phi.gradients(x, t);
    }
    c.previous.middleCols(off, n) = previous.eval(x, t);
    c.weights.segment(off, n) = q[j] * traj->weights;
  }
  return c;
}

ControlTargets select_columns(const ControlTargets& all, const std::vector<Eigen::Index>& cols) {
  ControlTargets c;
  const Eigen::Index m = static_cast<Eigen::Index>(cols.size());
  c.inputs.resize(all.inputs.rows(), m);
  c.base.resize(all.base.rows(), m);
  c.grad_phi.resize(all.grad_phi.rows(), m);
  c.previous.resize(all.previous.rows(), m);
  c.weights.resize(m);
  const double scale = static_cast<double>(all.weights.size()) / static_cast<double>(m);
  for (Eigen::Index k = 0; k < m; ++k) {
    const Eigen::Index i = cols[static_cast<std::size_t>(k)];
    c.inputs.col(k) = all.inputs.col(i);
    c.base.col(k) = all.base.col(i);
    c.grad_phi.col(k) = all.grad_phi.col(i);
    c.previous.col(k) = all.previous.col(i);
    c.weights[k] = scale * all.weights[i];
  }
  return c;
}

double targets_loss(const nn::ParamField& net, const ControlTargets& c, double coef, double step,
                    Vector* grad) {
  nn::Tape tape;
  nn::FieldGraph g = net.record(tape, c.inputs, false);
  const Matrix u = tape.value(g.output) + c.base;
  const Matrix diff = u - c.previous;
  const Vector per_col = (-(u.array() * c.grad_phi.array()).colwise().sum() +
                          coef * u.colwise().squaredNorm().array() +
                          diff.colwise().squaredNorm().array() / (2.0 * step))
                             .transpose();
  const double loss = per_col.dot(c.weights);
  if (grad != nullptr) {
    Matrix cot = -c.grad_phi + 2.0 * coef * u + diff / step;
    cot.array().rowwise() *= c.weights.transpose().array();
    tape.backward(g.output, cot);
    *grad = net.gather_param_grad(tape, g);
  }
  return loss;
}

double hamiltonian_gain(const nn::ParamField& net, const ControlTargets& c, double coef) {
  const Matrix u = net.evaluate(c.inputs) + c.base;
  const Vector gain = ((u - c.previous).array() * c.grad_phi.array()).colwise().sum().transpose().array() -
                      coef * (u.colwise().squaredNorm() - c.previous.colwise().squaredNorm()).transpose().array();
  return gain.dot(c.weights);
}

double mean_abs_residual(const AdjointSolution& phi, const Trajectory& traj, int probes) {
  if (probes <= 0) return 0.0;
  const int j = traj.grid.steps() / 2;
  const int m = std::min(probes, traj.size());
  const Matrix x = traj.states[static_cast<std::size_t>(j)].leftCols(m);
  const Vector r = pde_residual(phi, phi.problem(), x, traj.grid.times[static_cast<std::size_t>(j)]);
  return r.cwiseAbs().mean();
}

}  // namespace

void ControlProblem::validate() const {
  if (!(horizon > 0.0) || !std::isfinite(horizon)) throw ValidationError("horizon T must be positive");
  if (reward.dim() < 1) throw ValidationError("terminal target must have dimension d >= 1");
  if (density_dim(initial) != reward.dim()) {
    throw ValidationError("initial density dimension differs from the reward dimension");
  }
}

double SolverConfig::step_at(int k) const {
  if (k >= 1 && static_cast<std::size_t>(k) <= step_schedule.size()) {
    return step_schedule[static_cast<std::size_t>(k) - 1];
  }
  return step_size;
}

void SolverConfig::validate() const {
  if (max_iterations < 1) throw ValidationError("max_iterations K must be at least 1");
  if (!(tolerance > 0.0)) throw ValidationError("tolerance must be positive");
  if (!(step_min > 0.0) || !(step_max >= step_min)) throw ValidationError("invalid step size range");
  auto check_step = [&](double s) {
    if (!std::isfinite(s) || s < step_min || s > step_max) {
      std::ostringstream msg;
      msg << "step size " << s << " outside [" << step_min << ", " << step_max << "]";
      throw ValidationError(msg.str());
    }
  };
  check_step(step_size);
  for (double s : step_schedule) check_step(s);
  if (control_steps < 0) throw ValidationError("control_steps must be nonnegative");
  if (!(control_learning_rate > 0.0)) throw ValidationError("control learning rate must be positive");
  if (!(step_reference > 0.0)) throw ValidationError("step_reference must be positive");
  if (control_batch < 0) throw ValidationError("control_batch must be nonnegative");
  if (plateau_halvings < 0) throw ValidationError("plateau_halvings must be nonnegative");
  if (particles < 1 || eval_particles < 1) throw ValidationError("particle counts must be at least 1");
  if (!(dt > 0.0)) throw ValidationError("dt must be positive");
  if (!(adjoint_dt > 0.0)) throw ValidationError("adjoint_dt must be positive");
  if (control_architecture.width < 1 || control_architecture.hidden_layers < 0) {
    throw ValidationError("invalid control network shape");
  }
}

nlohmann::json IterationRecord::to_json() const {
  return {{"k", k},
          {"step_size", step_size},
          {"reward", reward},
          {"reward_se", reward_se},
          {"delta", delta},
          {"control_loss", control_loss},
          {"adjoint_residual", adjoint_residual},
          {"hamiltonian_gain", hamiltonian_gain},
          {"retries", retries},
          {"lr_scale", lr_scale},
          {"seconds", seconds}};
}

ControlField SolverState::control_at(int j) const {
  ControlField c = control;
  c.set_params(snapshots.at(static_cast<std::size_t>(j)));
  return c;
}

double hamiltonian(const RewardSpec& spec, const ParticleEnsemble& ensemble, const Matrix& grad_phi,
                   const Matrix& w_values) {
  ensemble.validate();
  if (grad_phi.rows() != ensemble.points.rows() || grad_phi.cols() != ensemble.points.cols()) {
    throw ValidationError("hamiltonian: grad phi must be d x N");
  }
  const Vector dots = (w_values.array() * grad_phi.array()).colwise().sum().transpose();
  return dots.dot(ensemble.weights) + running_value(spec, ensemble, w_values);
}

double hamiltonian(const RewardSpec& spec, const ParticleEnsemble& ensemble, const AdjointModel& phi,
                   const VectorField& w, double t) {
  if (std::abs(ensemble.time - t) > 1e-12) throw ValidationError("hamiltonian: ensemble time differs from t");
  return hamiltonian(spec, ensemble, phi.gradients(ensemble.points, t), w.eval(ensemble.points, t));
}

RewardEstimate total_reward(const RewardSpec& spec, const VectorField& u, const ParticleEnsemble& initial,
                            const TimeGrid& grid) {
  const Trajectory traj = rollout(initial, u, grid);
  const Vector q = grid.trapezoid_weights();
  RewardEstimate est;
  Vector influence = Vector::Zero(traj.size());
  for (int j = 0; j <= grid.steps(); ++j) {
    const ParticleEnsemble e = traj.at_step(j);
    const Matrix controls = u.eval(e.points, e.time);
    est.value += q[j] * running_value(spec, e, controls);
    influence += q[j] * running_influence(spec, e, controls);
  }
  const Vector term = terminal_contributions(spec, traj.final_state());
  est.value += term.dot(traj.weights);
  influence += term;
  const double mean = influence.dot(traj.weights);
  est.standard_error =
      std::sqrt(((influence.array() - mean).square() * traj.weights.array().square()).sum());
  if (!std::isfinite(est.value)) throw NumericalError("total reward is not finite");
  return est;
}

double convergence_metric(const VectorField& a, const VectorField& b, const Trajectory& trajectory) {
  if (a.dim() != b.dim() || a.dim() != trajectory.dim()) {
    throw ValidationError("convergence_metric: dimensions differ");
  }
  const Vector q = trajectory.grid.trapezoid_weights();
  double total = 0.0;
  for (int j = 0; j <= trajectory.grid.steps(); ++j) {
    const double t = trajectory.grid.times[static_cast<std::size_t>(j)];
    const Matrix& x = trajectory.states[static_cast<std::size_t>(j)];
    const Vector sq = (a.eval(x, t) - b.eval(x, t)).colwise().squaredNorm().transpose();
    total += q[j] * sq.dot(trajectory.weights);
  }
  return total;
}

double stepsize_bound(double lip_u, double lip_rho, double lip_g, double m_rho, double m_u, int dim,
                      double horizon, double control_coefficient) {
  for (double v : {lip_u, lip_rho, lip_g, m_rho, m_u, horizon, control_coefficient}) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ValidationError("stepsize_bound: constants must be positive");
  }
  if (dim < 1) throw ValidationError("stepsize_bound: dimension must be positive");
  return 2.0 / (lip_u + (lip_rho * horizon + lip_g) * m_rho * m_rho * dim * m_u + control_coefficient);
}

double control_loss(const ControlField& candidate, const ControlField& previous, const AdjointSolution& phi,
                    const RewardSpec& spec, double step_size, Vector* grad) {
  const ControlTargets c = build_targets(previous, phi);
  return targets_loss(candidate.net(), c, spec.control_coefficient(), step_size, grad);
}

namespace {

struct InnerResult {
  Vector best;
  double best_loss = 0.0;
  bool improved = false;
};

// control_steps Adam steps from `start`; keeps the best iterate by the full loss.
InnerResult inner_adam(const ControlField& start, const ControlTargets& all, double coef, double step_size,
                       const SolverConfig& config, nn::AdamState& optimizer, std::mt19937_64& rng) {
  const Eigen::Index m = all.weights.size();
  const bool minibatch = config.control_batch > 0 && config.control_batch < m;
  std::uniform_int_distribution<Eigen::Index> pick(0, m - 1);
  ControlField u = start;
  Vector params = u.params();
  InnerResult r;
  r.best = params;
  r.best_loss = targets_loss(u.net(), all, coef, step_size, nullptr);
  auto consider = [&](double loss) {
    if (std::isfinite(loss) && loss < r.best_loss) {
      r.best_loss = loss;
      r.best = u.params();
      r.improved = true;
    }
  };
  Vector grad;
  for (int s = 0; s < config.control_steps; ++s) {
    double loss;
    if (minibatch) {
      std::vector<Eigen::Index> cols(static_cast<std::size_t>(config.control_batch));
      for (auto& c : cols) c = pick(rng);
      loss = targets_loss(u.net(), select_columns(all, cols), coef, step_size, &grad);
    } else {
      loss = targets_loss(u.net(), all, coef, step_size, &grad);
      if (s > 0) consider(loss);
    }
    if (!std::isfinite(loss)) throw NumericalError("control loss became non-finite");
    nn::adam_step(optimizer, params, grad);
    u.set_params(params);
    u.net().project();
    params = u.params();
    if (!params.allFinite()) throw NumericalError("control update produced non-finite parameters");
    const bool last = s + 1 == config.control_steps;
    if (last || (minibatch && (s + 1) % kBestCheckInterval == 0)) {
      consider(targets_loss(u.net(), all, coef, step_size, nullptr));
    }
  }
  return r;
}

}  // namespace

ControlUpdate mp_control_update(const ControlField& previous, const AdjointSolution& phi,
                                const RewardSpec& spec, const SolverConfig& config, double step_size,
                                nn::AdamState& optimizer, double lr_scale) {
  if (!(step_size > 0.0) || !std::isfinite(step_size)) {
    throw ValidationError("mp_control_update: step size must be positive");
  }
  if (!(lr_scale > 0.0)) throw ValidationError("mp_control_update: learning-rate scale must be positive");
  const ControlTargets all = build_targets(previous, phi);
  const double coef = spec.control_coefficient();
  const double base_lr = config.control_learning_rate * std::min(1.0, step_size / config.step_reference);

  if (optimizer.first_moment.size() != static_cast<Eigen::Index>(previous.num_params())) {
    optimizer = nn::AdamState::for_params(previous.num_params(), base_lr);
  }
  const nn::AdamState saved = optimizer;
  double scale = lr_scale;
  for (int attempt = 0; attempt < 2; ++attempt) {
    optimizer = saved;
    optimizer.epsilon = config.adam_epsilon;
    std::mt19937_64 rng(config.train_seed * 1000003ULL + static_cast<std::uint64_t>(saved.step));
    try {
      for (int round = 0;; ++round) {
        optimizer.learning_rate = base_lr * scale;
        const InnerResult r = inner_adam(previous, all, coef, step_size, config, optimizer, rng);
        // No inner iterate beat u_prev: the steps are too coarse here.
        if (r.improved || round >= config.plateau_halvings) {
          ControlUpdate out;
          out.control = previous;
          out.control.set_params(r.best);
          out.loss = r.best_loss;
          out.retries = attempt;
          out.lr_scale = scale;
          return out;
        }
        scale *= 0.5;
      }
    } catch (const NumericalError&) {
      scale *= 0.5;
    }
  }
  optimizer = saved;
  throw NumericalError("control update diverged twice; iteration aborted");
}

std::shared_ptr<const AdjointSolution> solve_adjoint(const ControlProblem& problem, const SolverConfig& config,
                                                     std::shared_ptr<const VectorField> u,
                                                     std::shared_ptr<const Trajectory> density,
                                                     const AdjointSolution* previous) {
  AdjointProblem ap;
  ap.u = std::move(u);
  ap.spec = problem.reward;
  ap.density = std::move(density);
  ap.horizon = problem.horizon;
  if (config.backend == AdjointBackend::kCharacteristics) {
    return solve_characteristics(ap, config.adjoint_dt, true);
  }
  CollocationConfig cc = config.collocation;
  if (cc.reference.mean.size() == 0) {
    // Centered between the initial mean and the target, wide enough for both.
    cc.reference.mean = 0.5 * (density_mean(problem.initial) + problem.reward.terminal.target);
    cc.reference.variance = 2.0;
  }
  const nn::ParamField* warm = nullptr;
  if (const auto* prev = dynamic_cast<const CollocationSolution*>(previous)) {
    warm = &prev->trunk();
  } else {
    cc.steps = config.collocation_first_steps;
  }
  return solve_collocation(ap, cc, warm);
}

SolverState initial_state(const ControlProblem& problem, const SolverConfig& config,
                          std::optional<ControlField> initial_control) {
  problem.validate();
  config.validate();
  const int d = problem.dim();
  SolverState s;
  if (initial_control) {
    if (initial_control->dim() != d) throw ValidationError("initial control dimension differs from d");
    s.control = std::move(*initial_control);
  } else {
    s.control = make_control(d, config.control_architecture, config.init_seed, true);
  }
  s.control.net().set_lipschitz_cap(config.lipschitz_cap);
  std::vector<double> checkpoints;
  for (double c : config.checkpoints) {
    if (c <= problem.horizon) checkpoints.push_back(c);
  }
  s.grid = TimeGrid::make(problem.horizon, config.dt, checkpoints);
  s.train_initial = sample_initial(problem.initial, config.particles, config.train_seed);
  s.eval_initial = sample_initial(problem.initial, config.eval_particles, config.eval_seed);
  s.trajectory = std::make_shared<const Trajectory>(rollout(s.train_initial, s.control, s.grid));
  const RewardEstimate r = total_reward(problem.reward, s.control, s.eval_initial, s.grid);
  s.rewards.push_back(r.value);
  s.reward_se.push_back(r.standard_error);
  s.snapshots.push_back(s.control.params());
  s.optimizer = nn::AdamState::for_params(s.control.num_params(), config.control_learning_rate);
  s.optimizer.epsilon = config.adam_epsilon;
  return s;
}

void iterate(SolverState& state, const ControlProblem& problem, const SolverConfig& config) {
  const auto start = std::chrono::steady_clock::now();
  const int k = state.k + 1;
  const double step = config.step_at(k);
  auto previous = std::make_shared<const ControlField>(state.control);

  std::shared_ptr<const AdjointSolution> phi =
      solve_adjoint(problem, config, previous, state.trajectory, state.adjoint.get());

  IterationRecord rec;
  rec.k = k;
  rec.step_size = step;
  rec.adjoint_residual = mean_abs_residual(*phi, *state.trajectory, config.residual_probes);

  if (!config.persistent_optimizer) {
    state.optimizer = nn::AdamState::for_params(state.control.num_params(), config.control_learning_rate);
  }
  ControlUpdate upd =
      mp_control_update(state.control, *phi, problem.reward, config, step, state.optimizer, state.lr_scale);
  state.lr_scale = upd.lr_scale;
  rec.lr_scale = upd.lr_scale;
  rec.control_loss = upd.loss;
  rec.retries = upd.retries;
  rec.hamiltonian_gain =
      hamiltonian_gain(upd.control.net(), build_targets(state.control, *phi), problem.reward.control_coefficient());

  auto next = std::make_shared<const Trajectory>(rollout(state.train_initial, upd.control, state.grid));
  rec.delta = convergence_metric(upd.control, state.control, *next);
  const RewardEstimate r = total_reward(problem.reward, upd.control, state.eval_initial, state.grid);
  rec.reward = r.value;
  rec.reward_se = r.standard_error;

  state.control = std::move(upd.control);
  state.trajectory = std::move(next);
  state.adjoint = std::move(phi);
  state.k = k;
  state.snapshots.push_back(state.control.params());
  state.rewards.push_back(r.value);
  state.reward_se.push_back(r.standard_error);
  state.deltas.push_back(rec.delta);
  rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  state.records.push_back(rec);
}

SolverState run(const ControlProblem& problem, const SolverConfig& config,
                std::optional<ControlField> initial_control, const IterationCallback& on_iteration) {
  SolverState state = initial_state(problem, config, std::move(initial_control));
  for (int k = 1; k <= config.max_iterations; ++k) {
    try {
      iterate(state, problem, config);
    } catch (const NumericalError& e) {
      state.failure = "iteration " + std::to_string(k) + ": " + e.what();
      break;
    }
    if (on_iteration) on_iteration(state);
    if (state.deltas.back() < config.tolerance) {
      state.converged = true;
      break;
    }
  }
  return state;
}

}  // namespace mpdc
