#include "mpdc/ensemble.hpp"

#include <cmath>
#include <random>
#include <string>

#include "mpdc/errors.hpp"

namespace mpdc {

ParticleEnsemble ParticleEnsemble::uniform(Matrix points, double time) {
  ParticleEnsemble e;
  const Eigen::Index n = points.cols();
  e.points = std::move(points);
  e.weights = Vector::Constant(n, n > 0 ? 1.0 / static_cast<double>(n) : 0.0);
  e.time = time;
  return e;
}

bool ParticleEnsemble::uniform_weights() const {
  if (weights.size() == 0) return true;
  return (weights.array() == weights[0]).all();
}

void ParticleEnsemble::validate() const {
  if (points.cols() < 1 || points.rows() < 1) throw ValidationError("ensemble is empty");
  if (weights.size() != points.cols()) {
    throw ValidationError("ensemble has " + std::to_string(points.cols()) + " points but " +
                          std::to_string(weights.size()) + " weights");
  }
  if ((weights.array() < 0.0).any()) throw ValidationError("ensemble weights must be nonnegative");
  if (std::abs(weights.sum() - 1.0) > 1e-12) throw ValidationError("ensemble weights must sum to 1");
  if (!points.allFinite()) throw ValidationError("ensemble contains non-finite points");
}

int density_dim(const InitialDensity& density) {
  return std::visit(
      [](const auto& d) -> int {
        using T = std::decay_t<decltype(d)>;
        if constexpr (std::is_same_v<T, GaussianDensity>) {
          return static_cast<int>(d.mean.size());
        } else {
          return d.dim;
        }
      },
      density);
}

Vector density_mean(const InitialDensity& density) {
  if (const auto* g = std::get_if<GaussianDensity>(&density)) return g->mean;
  const auto& t = std::get<TruncExpGaussianDensity>(density);
  Vector m(t.dim);
  m[0] = -t.shift - 1.0;
  m.tail(t.dim - 1) = t.tail_mean;
  return m;
}

ParticleEnsemble sample_initial(const InitialDensity& density, int n, std::uint64_t seed) {
  if (n < 1) throw ValidationError("sample_initial: N must be at least 1");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  if (const auto* g = std::get_if<GaussianDensity>(&density)) {
    if (g->mean.size() < 1) throw ValidationError("Gaussian density needs a mean of dimension >= 1");
    if (!(g->variance > 0.0) || !std::isfinite(g->variance)) {
      throw ValidationError("Gaussian density covariance must be positive");
    }
    const double sd = std::sqrt(g->variance);
    Matrix x(g->mean.size(), n);
    for (int i = 0; i < n; ++i) {
      for (Eigen::Index k = 0; k < x.rows(); ++k) x(k, i) = g->mean[k] + sd * normal(rng);
    }
    return ParticleEnsemble::uniform(std::move(x));
  }

  const auto& t = std::get<TruncExpGaussianDensity>(density);
  if (t.dim < 2) throw ValidationError("TruncExpGaussian density needs d >= 2");
  if (t.tail_mean.size() != t.dim - 1) {
    throw ValidationError("TruncExpGaussian tail mean must have d - 1 entries");
  }
  if (!(t.tail_variance > 0.0)) throw ValidationError("TruncExpGaussian variance must be positive");
  std::exponential_distribution<double> expo(1.0);
  const double sd = std::sqrt(t.tail_variance);
  Matrix x(t.dim, n);
  for (int i = 0; i < n; ++i) {
    x(0, i) = -t.shift - expo(rng);
    for (int k = 1; k < t.dim; ++k) x(k, i) = t.tail_mean[k - 1] + sd * normal(rng);
  }
  return ParticleEnsemble::uniform(std::move(x));
}

Vector weighted_mean(const ParticleEnsemble& e) { return e.points * e.weights; }

double weighted_second_moment(const ParticleEnsemble& e) {
  return e.points.colwise().squaredNorm().dot(e.weights.transpose());
}

}  // namespace mpdc
