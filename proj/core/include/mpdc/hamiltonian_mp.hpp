#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mpdc/adjoint.hpp"
#include "mpdc/dynamics.hpp"
#include "mpdc/ensemble.hpp"
#include "mpdc/field.hpp"
#include "mpdc/nn/adam.hpp"
#include "mpdc/rewards.hpp"

namespace mpdc {

/// Reward functional plus initial density.
struct ControlProblem {
  RewardSpec reward;
  InitialDensity initial;
  double horizon = 1.0;

  int dim() const { return reward.dim(); }
  void validate() const;
};

enum class AdjointBackend { kCharacteristics, kCollocation };

struct SolverConfig {
  int max_iterations = 50;
  double tolerance = 1e-3;
  /// Proximal step size used at every iteration unless `step_schedule` gives
  /// a value for it (entry k-1 for iteration k).
  double step_size = 0.25;
  std::vector<double> step_schedule;
  double step_min = 1e-12;
  double step_max = 10.0;

  int control_steps = 20;
  double control_learning_rate = 1e-2;
  /// The inner learning rate is multiplied by min(1, step / step_reference).
  double step_reference = 0.25;
  double adam_epsilon = 1e-8;
  /// Keep Adam moments across outer iterations.
  bool persistent_optimizer = true;
  /// Columns (particle, time) per inner step; 0 uses all of them.
  int control_batch = 0;
  /// When no inner iterate improves on u_prev the inner learning rate is
  /// halved and the inner run repeated, at most this many times. The reduced
  /// rate carries over to later iterations.
  int plateau_halvings = 3;

  nn::FieldArchitecture control_architecture{0, 0, 32, 2, nn::Activation::kSoftplus, true};
  std::optional<double> lipschitz_cap = 10.0;

  int particles = 4096;
  int eval_particles = 4096;
  double dt = 0.05;
  std::vector<double> checkpoints{0.0, 0.25, 0.5, 0.75, 1.0};

  AdjointBackend backend = AdjointBackend::kCharacteristics;
  /// Step of the characteristics integrator for off-trajectory queries.
  double adjoint_dt = 0.01;
  CollocationConfig collocation;
  /// Collocation steps at the first iteration (later ones warm start).
  int collocation_first_steps = 3000;
  /// Particles at which the adjoint PDE residual is reported (0 disables).
  int residual_probes = 16;

  std::uint64_t train_seed = 1;
  std::uint64_t eval_seed = 2;
  std::uint64_t init_seed = 3;

  double step_at(int k) const;
  void validate() const;
};

struct RewardEstimate {
  double value = 0.0;
  double standard_error = 0.0;
};

struct IterationRecord {
  int k = 0;
  double step_size = 0.0;
  double reward = 0.0;
  double reward_se = 0.0;
  double delta = 0.0;
  double control_loss = 0.0;
  double adjoint_residual = 0.0;
  double hamiltonian_gain = 0.0;
  int retries = 0;
  double lr_scale = 1.0;
  double seconds = 0.0;

  nlohmann::json to_json() const;
};

struct SolverState {
  int k = 0;
  ControlField control;
  /// Parameter vectors of u^0, u^1, ...; entry k never changes once written.
  std::vector<Vector> snapshots;
  ParticleEnsemble train_initial;
  ParticleEnsemble eval_initial;
  TimeGrid grid;
  /// rho^k on the training particles.
  std::shared_ptr<const Trajectory> trajectory;
  /// phi^k (null before the first iteration).
  std::shared_ptr<const AdjointSolution> adjoint;
  std::vector<double> rewards;
  std::vector<double> reward_se;
  std::vector<double> deltas;
  std::vector<IterationRecord> records;
  nn::AdamState optimizer;
  double lr_scale = 1.0;
  bool converged = false;
  /// Set when an iteration aborted; the state holds everything before it.
  std::string failure;

  /// u^j rebuilt from its snapshot.
  ControlField control_at(int j) const;
};

/// H(rho_t, phi_t, w) = int rho <w, grad phi> + R(rho_t, w) on an ensemble at
/// time t, with grad phi supplied at the particles (d x N).
double hamiltonian(const RewardSpec& spec, const ParticleEnsemble& ensemble, const Matrix& grad_phi,
                   const Matrix& w_values);
double hamiltonian(const RewardSpec& spec, const ParticleEnsemble& ensemble, const AdjointModel& phi,
                   const VectorField& w, double t);

/// I[u] = int R dt + G(rho_T) from a rollout of `initial`, with the standard
/// error of its first-order (influence function) expansion.
RewardEstimate total_reward(const RewardSpec& spec, const VectorField& u, const ParticleEnsemble& initial,
                            const TimeGrid& grid);

/// int ||u_a - u_b||^2_{L^2(rho_t)} dt along a trajectory (trapezoid in time).
double convergence_metric(const VectorField& a, const VectorField& b, const Trajectory& trajectory);

/// 2 / (L_u + (L_rho T + L_G) M_rho^2 d M_U + c).
double stepsize_bound(double lip_u, double lip_rho, double lip_g, double m_rho, double m_u, int dim,
                      double horizon, double control_coefficient);

struct ControlUpdate {
  ControlField control;
  double loss = 0.0;
  int retries = 0;
  double lr_scale = 1.0;
};

/// Proximal maximization of the Hamiltonian in the control. With the density
/// frozen at the particles of the adjoint's seed trajectory (rho^{k-1}), the
/// loss is
///   sum_j q_j sum_i w_i [ -u . grad phi + c |u|^2 + |u - u_prev|^2 / (2 step) ]
/// and is minimized with `control_steps` Adam steps starting from u_prev. The
/// best iterate by the full loss is returned (u_prev itself when no step
/// improved on it, after the plateau halvings). A non-finite step rolls back,
/// halves the learning rate and retries once. `lr_scale` multiplies the
/// configured inner learning rate.
ControlUpdate mp_control_update(const ControlField& previous, const AdjointSolution& phi,
                                const RewardSpec& spec, const SolverConfig& config, double step_size,
                                nn::AdamState& optimizer, double lr_scale = 1.0);

/// Frozen-density proximal loss and its parameter gradient for a candidate
/// control; exposed for tests.
double control_loss(const ControlField& candidate, const ControlField& previous, const AdjointSolution& phi,
                    const RewardSpec& spec, double step_size, Vector* grad);

using IterationCallback = std::function<void(const SolverState&)>;

/// Initial state: samples the training and evaluation ensembles, rolls out
/// u^0 and evaluates I[u^0]. Without `initial_control` u^0 is a zero-output
/// network.
SolverState initial_state(const ControlProblem& problem, const SolverConfig& config,
                          std::optional<ControlField> initial_control = std::nullopt);

/// One outer iteration: phi^k from (u^{k-1}, rho^{k-1}), the control update,
/// rho^k, Delta_k and I[u^k].
void iterate(SolverState& state, const ControlProblem& problem, const SolverConfig& config);

/// The mean-field Hamiltonian-based successive approximation.
SolverState run(const ControlProblem& problem, const SolverConfig& config,
                std::optional<ControlField> initial_control = std::nullopt,
                const IterationCallback& on_iteration = nullptr);

std::shared_ptr<const AdjointSolution> solve_adjoint(const ControlProblem& problem, const SolverConfig& config,
                                                     std::shared_ptr<const VectorField> u,
                                                     std::shared_ptr<const Trajectory> density,
                                                     const AdjointSolution* previous);

}  // namespace mpdc
