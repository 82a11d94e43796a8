#pragma once

#include <cstdint>
#include <variant>

#include <Eigen/Dense>

namespace mpdc {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// N weighted samples of a density at time `time`. points is d x N.
struct ParticleEnsemble {
  Matrix points;
  Vector weights;
  double time = 0.0;

  static ParticleEnsemble uniform(Matrix points, double time = 0.0);

  int dim() const { return static_cast<int>(points.rows()); }
  int size() const { return static_cast<int>(points.cols()); }
  bool uniform_weights() const;
  /// Throws ValidationError unless N >= 1, weights are nonnegative and sum to
  /// one within 1e-12, and every point is finite.
  void validate() const;
};

/// N(mean, variance * I).
struct GaussianDensity {
  Vector mean;
  double variance = 1.0;
};

/// x_1 = -shift - Exp(1) (density chi(x_1 + shift) e^{x_1 + shift}) times an
/// isotropic Gaussian on x_2..x_d.
struct TruncExpGaussianDensity {
  int dim = 2;
  double shift = 0.5;
  Vector tail_mean;  // d - 1 entries
  double tail_variance = 0.25;
};

using InitialDensity = std::variant<GaussianDensity, TruncExpGaussianDensity>;

int density_dim(const InitialDensity& density);
/// Mean of the density (used to place importance-sampling references).
Vector density_mean(const InitialDensity& density);

ParticleEnsemble sample_initial(const InitialDensity& density, int n, std::uint64_t seed);

/// Weighted mean and second moment helpers.
Vector weighted_mean(const ParticleEnsemble& e);
double weighted_second_moment(const ParticleEnsemble& e);

}  // namespace mpdc
