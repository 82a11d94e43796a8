#pragma once

#include <cstdint>
#include <variant>
#include <vector>

#include "mpdc/ensemble.hpp"
#include "mpdc/field.hpp"

namespace mpdc {

/// Barrier b(x) >= 0 that vanishes on the obstacle.
struct ObstacleShape {
  enum class Kind { kCylinder, kDoubleWedge };
  Kind kind = Kind::kCylinder;
  /// Cylinder: squared radius about the x_3..x_d axis.
  double radius_sq = 0.25;
  /// DoubleWedge: b = scale * max(0, slope x_1^2 - x_2^2 - offset).
  double scale = 50.0;
  double slope = 5.0;
  double offset = 0.1;

  double value(const Eigen::Ref<const Vector>& x) const;
  /// Gradient of b; zero where b is clamped.
  Vector gradient(const Eigen::Ref<const Vector>& x) const;
  /// True where the agent is inside the obstacle region proper.
  bool inside(const Eigen::Ref<const Vector>& x) const;

  static ObstacleShape cylinder(double radius = 0.5);
  static ObstacleShape double_wedge();
};

/// -coefficient * int |u|^2 rho
struct ControlEnergy {
  double coefficient = 0.5;
};

/// -gamma * int int rho(x) rho(y) / (c + |x - y|^2)
struct Interaction {
  double gamma = 0.0;
  double c = 0.1;
};

/// -int rho(x) / (eps_b + b(x))
struct ObstaclePenalty {
  ObstacleShape shape;
  double eps_b = 0.1;
};

using RunningTerm = std::variant<ControlEnergy, Interaction, ObstaclePenalty>;

/// g(x) = -scale * |x - target|^2, G(q) = int g q.
struct TerminalTerm {
  Vector target;
  double scale = 0.5;

  double g(const Eigen::Ref<const Vector>& x) const;
  Vector grad_g(const Eigen::Ref<const Vector>& x) const;
};

/// How the double integral of the interaction term is estimated.
enum class PairScheme {
  kAllPairs,  // every ordered pair i != j
  kShuffle,   // i paired with pi(i) for a seeded random derangement-free shuffle
};

struct RewardSpec {
  std::vector<RunningTerm> running;
  TerminalTerm terminal;
  PairScheme pairs = PairScheme::kAllPairs;
  std::uint64_t pair_seed = 0;
  /// The interaction potential at a query point averages over at most this
  /// many density particles (the first ones; particles are i.i.d.).
  int interaction_subsample = 1024;

  int dim() const { return static_cast<int>(terminal.target.size()); }
  bool control_energy_only() const;
  double control_coefficient() const;
  bool has_interaction() const;
};

/// Pointwise parts of the running reward for each particle: the integrand
/// -c|u|^2 - 1/(eps_b + b) per particle (the interaction is not pointwise).
Vector running_pointwise(const RewardSpec& spec, const Matrix& points, const Matrix& controls);

/// Monte-Carlo estimate of R(rho_t, u_t) given the controls u_t at the
/// particles (d x N).
double running_value(const RewardSpec& spec, const ParticleEnsemble& ensemble,
                     const Matrix& controls);
double running_value(const RewardSpec& spec, const ParticleEnsemble& ensemble,
                     const VectorField& u, double t);

/// Interaction part of the estimate alone (0 without an Interaction term).
double interaction_value(const RewardSpec& spec, const ParticleEnsemble& ensemble);

/// Per-particle influence values of the running reward (delta R / delta rho at
/// each particle, leaving the particle itself out of the pair average). Their
/// weighted spread gives the first-order standard error of running_value.
Vector running_influence(const RewardSpec& spec, const ParticleEnsemble& ensemble,
                         const Matrix& controls);

struct DerivEvaluation {
  Vector value;       // delta R / delta rho at each query, M
  Matrix grad_x;      // partial in x with u held as a separate input, d x M
  Matrix grad_u;      // partial with respect to the control value, d x M
};

/// delta R / delta rho_t at the query points (d x M), where controls holds
/// u_t at the queries. `density` is rho_t. When `queries_are_particles` is
/// set the queries are density's own particles in order and the interaction
/// average skips the particle itself.
DerivEvaluation running_deriv(const RewardSpec& spec, const ParticleEnsemble& density,
                              const Matrix& queries, const Matrix& controls,
                              bool queries_are_particles, bool want_gradients);

/// Convenience scalar form at one point.
double running_deriv(const RewardSpec& spec, const ParticleEnsemble& density, const VectorField& u,
                     double t, const Vector& x);

double terminal_value(const RewardSpec& spec, const ParticleEnsemble& ensemble);
double terminal_deriv(const RewardSpec& spec, const Vector& x);
Vector terminal_contributions(const RewardSpec& spec, const Matrix& points);

}  // namespace mpdc
