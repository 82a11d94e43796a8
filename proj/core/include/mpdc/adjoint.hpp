#pragma once

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mpdc/dynamics.hpp"
#include "mpdc/field.hpp"
#include "mpdc/nn/param_field.hpp"
#include "mpdc/rewards.hpp"

namespace mpdc {

/// Data of the terminal-value transport problem
///   d_t phi + u . grad phi = -(delta R / delta rho)(x, t),  phi(., T) = g,
/// built against a control u and the density trajectory rho it generates.
struct AdjointProblem {
  std::shared_ptr<const VectorField> u;
  RewardSpec spec;
  /// Density used by the interaction part of the source. May be null when the
  /// reward has no interaction term.
  std::shared_ptr<const Trajectory> density;
  double horizon = 1.0;

  /// delta R / delta rho at points with per-column times, given u there.
  Vector source(const Matrix& x, std::span<const double> times, const Matrix& u_at_x) const;
  DerivEvaluation source_at(const Matrix& x, double t, const Matrix& u_at_x, bool gradients) const;
  int dim() const { return u->dim(); }
  void validate() const;
};

/// Something with phi, d_t phi and grad phi on batches (x is d x M).
class AdjointModel {
 public:
  virtual ~AdjointModel() = default;
  virtual Vector values(const Matrix& x, double t) const = 0;
  virtual Vector time_derivatives(const Matrix& x, double t) const = 0;
  virtual Matrix gradients(const Matrix& x, double t) const = 0;
};

/// Closed-form phi given as callables on single points.
class AnalyticAdjoint final : public AdjointModel {
 public:
  using Scalar = std::function<double(const Vector&, double)>;
  using Gradient = std::function<Vector(const Vector&, double)>;
  AnalyticAdjoint(Scalar value, Scalar time_derivative, Gradient gradient)
      : value_(std::move(value)), dt_(std::move(time_derivative)), grad_(std::move(gradient)) {}

  Vector values(const Matrix& x, double t) const override;
  Vector time_derivatives(const Matrix& x, double t) const override;
  Matrix gradients(const Matrix& x, double t) const override;

 private:
  Scalar value_;
  Scalar dt_;
  Gradient grad_;
};

/// d_t phi + u . grad phi + delta R / delta rho at (x, t).
Vector pde_residual(const AdjointModel& phi, const AdjointProblem& problem, const Matrix& x, double t);

/// Values and gradients of phi at the particles of the trajectory the adjoint
/// was built against, at every grid step.
struct SeedTable {
  std::shared_ptr<const Trajectory> seeds;
  std::vector<Vector> values;     // per grid step, N
  std::vector<Matrix> gradients;  // per grid step, d x N
};

class AdjointSolution : public AdjointModel {
 public:
  virtual std::string backend() const = 0;
  virtual const AdjointProblem& problem() const = 0;
  /// Present when phi was also tabulated along the density's particles.
  virtual const SeedTable* seed_table() const { return nullptr; }
  const TerminalTerm& terminal() const { return problem().spec.terminal; }
};

/// Method of characteristics: phi(x, t) = g(X_T) + int_t^T (delta R/delta rho)(X_s, s) ds
/// along dX/ds = u(X, s), X_t = x, integrated with RK4.
class CharacteristicsSolution final : public AdjointSolution {
 public:
  CharacteristicsSolution(AdjointProblem problem, double dt, std::optional<SeedTable> table);

  std::string backend() const override { return "characteristics"; }
  const AdjointProblem& problem() const override { return problem_; }
  const SeedTable* seed_table() const override { return table_ ? &*table_ : nullptr; }

  Vector values(const Matrix& x, double t) const override;
  Vector time_derivatives(const Matrix& x, double t) const override;
  /// Central differences of re-solved characteristics, h = 1e-4 * max(1, |x|_inf).
  Matrix gradients(const Matrix& x, double t) const override;

  double dt() const { return dt_; }

 private:
  AdjointProblem problem_;
  double dt_;
  std::optional<SeedTable> table_;
};

/// Builds the characteristics solution. When `tabulate` is set and the
/// problem has a density trajectory, phi and grad phi are also tabulated along
/// that trajectory's particles with the discrete adjoint of its RK4 steps.
std::shared_ptr<CharacteristicsSolution> solve_characteristics(const AdjointProblem& problem, double dt,
                                                               bool tabulate);

/// Tabulates phi along `seeds` (which must be a rollout of problem.u).
SeedTable tabulate_along(const AdjointProblem& problem, std::shared_ptr<const Trajectory> seeds);

struct CollocationConfig {
  int width = 100;
  int hidden_layers = 2;
  int batch = 2048;
  int steps = 3000;
  double learning_rate = 1e-3;
  GaussianDensity reference;
  /// Divide each residual term by the reference density (self-normalized).
  /// Off: the residual is averaged under the reference density.
  bool importance_weights = false;
  double residual_threshold = 1e-2;
  std::uint64_t seed = 0;
};

struct CollocationReport {
  double final_loss = 0.0;
  int steps = 0;
  bool below_threshold = false;
  std::vector<double> loss_history;
};

/// phi_t(x) = (1 - t/T) trunk(x, t) + (t/T) g(x); the terminal condition holds
/// for any trunk parameters.
class CollocationSolution final : public AdjointSolution {
 public:
  CollocationSolution(AdjointProblem problem, nn::ParamField trunk);

  std::string backend() const override { return "collocation"; }
  const AdjointProblem& problem() const override { return problem_; }

  Vector values(const Matrix& x, double t) const override;
  Vector time_derivatives(const Matrix& x, double t) const override;
  Matrix gradients(const Matrix& x, double t) const override;

  const nn::ParamField& trunk() const { return trunk_; }
  nn::ParamField& trunk() { return trunk_; }
  const CollocationReport& report() const { return report_; }
  void set_report(CollocationReport r) { report_ = std::move(r); }

  /// Mean-square residual loss and its parameter gradient on a batch.
  double loss_and_grad(const Matrix& x, std::span<const double> times, const Vector& weights,
                       Vector* grad) const;

 private:
  AdjointProblem problem_;
  nn::ParamField trunk_;
  CollocationReport report_;
};

/// Trains the trunk by Adam on the squared residual at fresh samples from the
/// reference density each step. `warm_start` reuses a previous trunk.
std::shared_ptr<CollocationSolution> solve_collocation(const AdjointProblem& problem,
                                                       const CollocationConfig& config,
                                                       const nn::ParamField* warm_start = nullptr);

/// grad phi at a single point.
Vector phi_grad(const AdjointModel& solution, const Vector& x, double t);

}  // namespace mpdc
