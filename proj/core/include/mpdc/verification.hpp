#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mpdc/adjoint.hpp"
#include "mpdc/ensemble.hpp"
#include "mpdc/field.hpp"
#include "mpdc/hamiltonian_mp.hpp"

namespace mpdc {

/// Closed-form solution of the linear-quadratic problem
///   maximize -1/2 int |u|^2 rho - 1/2 int |x|^2 rho_T,  rho_0 = N(0, I_d).
struct LQOracle {
  double horizon = 1.0;
  int dim = 2;

  double denominator(double t) const { return t - horizon - 1.0; }
  /// u*(x, t) = x / (t - T - 1)
  Vector control(const Vector& x, double t) const;
  /// phi*(x, t) = |x|^2 / (2 (t - T - 1))
  double phi(const Vector& x, double t) const;
  double phi_dt(const Vector& x, double t) const;
  Vector grad_phi(const Vector& x, double t) const;
  /// V*(p, t) = E_p|x|^2 / (2 (t - T - 1))
  double value(double second_moment, double t) const;
  double value(const ParticleEnsemble& p, double t) const;
  /// X_t = flow_scale(t) X_0 under u*.
  double flow_scale(double t) const;

  std::shared_ptr<const VectorField> control_field() const;
  AnalyticAdjoint adjoint() const;
  ControlProblem problem() const;
};

/// Cell-centred values on a uniform grid over the box [lower, upper]^d,
/// d in {1, 2}, with an upwind finite-volume stepper for
///   d_t sigma = -div(u sigma)
/// and no flux through the box boundary. Cell index i + cells * j.
class TransportGrid {
 public:
  TransportGrid(int dim, double lower, double upper, int cells);

  int dim() const { return dim_; }
  int cells() const { return cells_; }
  int size() const { return dim_ == 1 ? cells_ : cells_ * cells_; }
  double lower() const { return lower_; }
  double upper() const { return upper_; }
  double width() const { return h_; }
  double cell_volume() const;

  /// d x size() cell centres.
  const Matrix& centers() const { return centers_; }
  Vector sample(const std::function<double(const Vector&)>& f) const;

  double mass(const Vector& v) const;
  double inner(const Vector& a, const Vector& b) const;
  double l2_norm(const Vector& v) const;
  /// -div(v) of a d x size() flux by centred differences, zero outside the box.
  Vector divergence(const Matrix& flux) const;

  /// dt / h times the sum over axes of the largest face speed.
  double cfl(const VectorField& u, double t, double dt) const;
  /// One forward Euler upwind step with u frozen at t. Throws ValidationError
  /// when the CFL number exceeds `max_cfl`.
  void step(const VectorField& u, double t, double dt, Vector& sigma, double max_cfl = 0.9) const;
  /// Transpose of `step`: the upwind step for d_t phi + u . grad phi = 0
  /// backwards in time.
  void step_adjoint(const VectorField& u, double t, double dt, Vector& phi, double max_cfl = 0.9) const;

  /// Uniform substeps over [t0, t1] with CFL at most `target`, judged from
  /// face speeds at a few times in the interval.
  int substeps(const VectorField& u, double t0, double t1, double target = 0.9) const;
  /// sigma transported from t0 to t1.
  Vector transport(const VectorField& u, Vector sigma, double t0, double t1, double target = 0.9) const;
  /// phi pulled back from t1 to t0 with the transposed steps of `transport`.
  Vector pull_back(const VectorField& u, Vector phi, double t0, double t1, double target = 0.9) const;

 private:
  Matrix face_points(int axis) const;
  double max_face_speed(const VectorField& u, double t, int axis) const;

  int dim_;
  int cells_;
  double lower_;
  double upper_;
  double h_;
  Matrix centers_;
  Matrix faces_[2];  // interior faces normal to each axis
};

/// Least-squares slope of log y against log x.
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

struct PerturbationReport {
  double tau = 0.0;
  double horizon = 0.0;
  std::vector<double> eps;
  /// ||rho^eps_T - rho*_T - eps sigma_T||_2
  std::vector<double> errors;
  /// errors / eps
  std::vector<double> ratios;
  /// NaN when some error is zero.
  double slope = 0.0;
  /// Largest |rho^eps - rho*| at t = tau - eps over all eps.
  double pre_needle_gap = 0.0;
  double sigma_mass = 0.0;

  nlohmann::json to_json() const;
};

/// Needle perturbation u^eps = w on (tau - eps, tau], u* elsewhere, solved on
/// the grid together with rho* and the first-order term sigma (initial value
/// -div(rho*_tau (w - u*_tau)) at tau, then transported by u*).
PerturbationReport check_perturbation_order(const TransportGrid& grid, const Vector& rho0,
                                            const VectorField& u_star, const VectorField& w, double tau,
                                            double horizon, const std::vector<double>& eps_list,
                                            double cfl = 0.9);

/// A signed measure given by weighted points; its weights must sum to zero.
struct SignedSample {
  Matrix points;
  Vector weights;
};

struct DerivativeReport {
  double finite_difference = 0.0;
  double predicted = 0.0;
  double error = 0.0;
  double tolerance = 0.0;
  bool passed = false;

  nlohmann::json to_json() const;
};

/// Default acceptance: |FD - <phi_0, h>| <= rel |<phi_0, h>| + abs.
struct DerivativeTolerance {
  double relative = 1e-3;
  double absolute = 1e-6;
};

/// Particle path: G(rho_T^eps) for p + eps h with both rolled out by u (RK4,
/// step dt), against <phi_0, h> where phi_0 solves the source-free terminal
/// problem for `terminal` by characteristics.
DerivativeReport check_initial_derivative(const VectorField& u, const TerminalTerm& terminal,
                                          const ParticleEnsemble& p, const SignedSample& h, double horizon,
                                          double dt, double eps = 1e-4, DerivativeTolerance tol = {});

/// Grid path: both sides with the grid stepper, phi_0 by `pull_back` of g.
DerivativeReport check_initial_derivative(const TransportGrid& grid, const VectorField& u, const Vector& g,
                                          const Vector& p, const Vector& h, double horizon, double eps = 1e-4,
                                          DerivativeTolerance tol = {});

/// phi_0 of the source-free terminal problem at the given points.
Vector initial_adjoint(const VectorField& u, const TerminalTerm& terminal, const Matrix& points,
                       double horizon, double dt);

struct HjbReport {
  double t = 0.0;
  double value = 0.0;
  /// d_t V + <p, |grad v|^2 / (4c)>
  double residual = 0.0;
  double standard_error = 0.0;
  /// V(p, T) - G(p)
  double terminal_gap = 0.0;

  nlohmann::json to_json() const;
};

/// Residual of the value-functional equation for a candidate V(p, t) = <p, v(., t)>
/// with v supplied as an AdjointModel (so delta V / delta p = v). The reward
/// must be control energy only (coefficient c > 0), where the inner maximum is
/// |grad v|^2 / (4c).
HjbReport check_hjb_residual(const AdjointModel& v, const RewardSpec& spec, const ParticleEnsemble& p, double t,
                             double horizon);

struct FixedPointOptions {
  SolverConfig solver;
  std::vector<double> taus{0.0, 0.25, 0.5, 0.75, 1.0};
  int random_fields = 50;
  int hamiltonian_particles = 20000;
  double adjoint_tolerance = 1e-3;
  double stationarity_tolerance = 1e-6;
  std::uint64_t seed = 11;
};

struct FixedPointReport {
  /// Largest relative error of phi and grad phi against the closed form.
  double adjoint_value_error = 0.0;
  double adjoint_gradient_error = 0.0;
  int comparisons = 0;
  /// Comparisons with H(w) > H(u*) + 2 SE.
  int violations = 0;
  /// min over comparisons of (H(u*) - H(w)) / SE.
  double worst_margin = 0.0;
  double hamiltonian_optimum = 0.0;
  double hamiltonian_zero = 0.0;
  /// Delta after one solver iteration started at u*.
  double stationarity_delta = 0.0;
  bool adjoint_ok = false;
  bool maximum_ok = false;
  bool stationary = false;

  bool passed() const { return adjoint_ok && maximum_ok && stationary; }
  nlohmann::json to_json() const;
};

FixedPointReport check_mp_fixed_point(const LQOracle& lq, const FixedPointOptions& options = {});

struct VerifyOptions {
  /// all | lq | perturbation | hjb | initial-deriv
  std::string suite = "all";
  std::uint64_t seed = 7;
  /// Cells of the 1D needle grid on [-3, 3].
  int perturbation_cells = 2400;
  int hjb_particles = 100000;
  int derivative_trials = 10;
  FixedPointOptions fixed_point;
};

/// The checks of a suite with their default problems. Each entry of "checks"
/// has a name, "passed" and the measured values. Throws ValidationError on an
/// unknown suite.
nlohmann::json run_verification(const VerifyOptions& options = {});

}  // namespace mpdc
