#include "mpdc/rewards.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include "mpdc/errors.hpp"

namespace mpdc {
namespace {

void require_nonempty(const ParticleEnsemble& e) {
  if (e.points.cols() < 1) throw ValidationError("reward evaluation on an empty ensemble");
  if (e.weights.size() != e.points.cols()) throw ValidationError("ensemble weights do not match points");
}

void require_controls(const Matrix& points, const Matrix& controls) {
  if (controls.rows() != points.rows() || controls.cols() != points.cols()) {
    throw ValidationError("controls must be d x N like the points");
  }
}

double kernel(double c, const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& y) {
  return 1.0 / (c + (x - y).squaredNorm());
}

// A seeded random cycle through all indices: pairs (order[i], order[i+1]).
std::vector<int> shuffle_cycle(int n, std::uint64_t seed) {
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

}  // namespace

double ObstacleShape::value(const Eigen::Ref<const Vector>& x) const {
  if (x.size() < 2) throw ValidationError("obstacle shapes need d >= 2");
  if (kind == Kind::kCylinder) {
    const double r2 = x[0] * x[0] + x[1] * x[1];
    return r2 > radius_sq ? r2 - radius_sq : 0.0;
  }
  const double s = slope * x[0] * x[0] - x[1] * x[1] - offset;
  return s > 0.0 ? scale * s : 0.0;
}

Vector ObstacleShape::gradient(const Eigen::Ref<const Vector>& x) const {
  Vector g = Vector::Zero(x.size());
  if (value(x) <= 0.0) return g;
  if (kind == Kind::kCylinder) {
    g[0] = 2.0 * x[0];
    g[1] = 2.0 * x[1];
  } else {
    g[0] = scale * 2.0 * slope * x[0];
    g[1] = -scale * 2.0 * x[1];
  }
  return g;
}

bool ObstacleShape::inside(const Eigen::Ref<const Vector>& x) const {
  if (kind == Kind::kCylinder) return x[0] * x[0] + x[1] * x[1] < radius_sq;
  return value(x) == 0.0;
}

ObstacleShape ObstacleShape::cylinder(double radius) {
  ObstacleShape s;
  s.kind = Kind::kCylinder;
  s.radius_sq = radius * radius;
  return s;
}

ObstacleShape ObstacleShape::double_wedge() {
  ObstacleShape s;
  s.kind = Kind::kDoubleWedge;
  return s;
}

double TerminalTerm::g(const Eigen::Ref<const Vector>& x) const {
  return -scale * (x - target).squaredNorm();
}

Vector TerminalTerm::grad_g(const Eigen::Ref<const Vector>& x) const {
  return -2.0 * scale * (x - target);
}

bool RewardSpec::control_energy_only() const {
  for (const RunningTerm& t : running) {
    if (const auto* i = std::get_if<Interaction>(&t)) {
      if (i->gamma != 0.0) return false;
    } else if (!std::holds_alternative<ControlEnergy>(t)) {
      return false;
    }
  }
  return true;
}

double RewardSpec::control_coefficient() const {
  double c = 0.0;
  for (const RunningTerm& t : running) {
    if (const auto* e = std::get_if<ControlEnergy>(&t)) c += e->coefficient;
  }
  return c;
}

bool RewardSpec::has_interaction() const {
  for (const RunningTerm& t : running) {
    if (const auto* i = std::get_if<Interaction>(&t); i != nullptr && i->gamma != 0.0) return true;
  }
  return false;
}

Vector running_pointwise(const RewardSpec& spec, const Matrix& points, const Matrix& controls) {
  require_controls(points, controls);
  Vector out = Vector::Zero(points.cols());
  for (const RunningTerm& term : spec.running) {
    if (const auto* e = std::get_if<ControlEnergy>(&term)) {
      out.array() -= e->coefficient * controls.colwise().squaredNorm().transpose().array();
    } else if (const auto* o = std::get_if<ObstaclePenalty>(&term)) {
      for (Eigen::Index i = 0; i < points.cols(); ++i) {
        out[i] -= 1.0 / (o->eps_b + o->shape.value(points.col(i)));
      }
    }
  }
  return out;
}

double interaction_value(const RewardSpec& spec, const ParticleEnsemble& e) {
  require_nonempty(e);
  const int n = e.size();
  double total = 0.0;
  for (const RunningTerm& term : spec.running) {
    const auto* it = std::get_if<Interaction>(&term);
    if (it == nullptr || it->gamma == 0.0 || n < 2) continue;
    double acc = 0.0;
    double norm = 0.0;
    if (spec.pairs == PairScheme::kAllPairs) {
      for (int i = 0; i < n; ++i) {
        double row = 0.0;
        for (int j = 0; j < n; ++j) {
          if (j != i) row += e.weights[j] * kernel(it->c, e.points.col(i), e.points.col(j));
        }
        acc += e.weights[i] * row;
      }
      norm = 1.0 - e.weights.squaredNorm();
    } else {
      const std::vector<int> order = shuffle_cycle(n, spec.pair_seed);
      for (int k = 0; k < n; ++k) {
        const int i = order[static_cast<std::size_t>(k)];
        const int j = order[static_cast<std::size_t>((k + 1) % n)];
        const double wij = e.weights[i] * e.weights[j];
        acc += wij * kernel(it->c, e.points.col(i), e.points.col(j));
        norm += wij;
      }
    }
    total -= it->gamma * acc / norm;
  }
  return total;
}

double running_value(const RewardSpec& spec, const ParticleEnsemble& ensemble,
                     const Matrix& controls) {
  require_nonempty(ensemble);
  const Vector pointwise = running_pointwise(spec, ensemble.points, controls);
  return pointwise.dot(ensemble.weights) + interaction_value(spec, ensemble);
}

double running_value(const RewardSpec& spec, const ParticleEnsemble& ensemble,
                     const VectorField& u, double t) {
  require_nonempty(ensemble);
  return running_value(spec, ensemble, u.eval(ensemble.points, t));
}

Vector running_influence(const RewardSpec& spec, const ParticleEnsemble& e, const Matrix& controls) {
  require_nonempty(e);
  return running_deriv(spec, e, e.points, controls, true, false).value;
}

DerivEvaluation running_deriv(const RewardSpec& spec, const ParticleEnsemble& density,
                              const Matrix& queries, const Matrix& controls,
                              bool queries_are_particles, bool want_gradients) {
  require_nonempty(density);
  require_controls(queries, controls);
  if (queries.rows() != density.points.rows()) {
    throw ValidationError("running_deriv: query dimension differs from the density");
  }
  if (queries_are_particles && queries.cols() != density.points.cols()) {
    throw ValidationError("running_deriv: queries_are_particles needs one query per particle");
  }
  const Eigen::Index m = queries.cols();
  const Eigen::Index d = queries.rows();
  DerivEvaluation out;
  out.value = Vector::Zero(m);
  if (want_gradients) {
    out.grad_x = Matrix::Zero(d, m);
    out.grad_u = Matrix::Zero(d, m);
  }

  for (const RunningTerm& term : spec.running) {
    if (const auto* e = std::get_if<ControlEnergy>(&term)) {
      out.value.array() -= e->coefficient * controls.colwise().squaredNorm().transpose().array();
      if (want_gradients) out.grad_u -= 2.0 * e->coefficient * controls;
    } else if (const auto* o = std::get_if<ObstaclePenalty>(&term)) {
      for (Eigen::Index i = 0; i < m; ++i) {
        const double denom = o->eps_b + o->shape.value(queries.col(i));
        out.value[i] -= 1.0 / denom;
        if (want_gradients) out.grad_x.col(i) += o->shape.gradient(queries.col(i)) / (denom * denom);
      }
    } else if (const auto* it = std::get_if<Interaction>(&term)) {
      if (it->gamma == 0.0) continue;
      const int sub = std::min<int>(density.size(), std::max(1, spec.interaction_subsample));
      for (Eigen::Index i = 0; i < m; ++i) {
        double acc = 0.0;
        double wsum = 0.0;
        Vector g = want_gradients ? Vector::Zero(d) : Vector();
        for (int j = 0; j < sub; ++j) {
          if (queries_are_particles && j == i) continue;
          const Vector diff = queries.col(i) - density.points.col(j);
          const double a = it->c + diff.squaredNorm();
          const double w = density.weights[j];
          acc += w / a;
          wsum += w;
          if (want_gradients) g += (w / (a * a)) * diff;
        }
        if (wsum <= 0.0) continue;
        out.value[i] -= 2.0 * it->gamma * acc / wsum;
        if (want_gradients) out.grad_x.col(i) += 4.0 * it->gamma * g / wsum;
      }
    }
  }
  return out;
}

double running_deriv(const RewardSpec& spec, const ParticleEnsemble& density, const VectorField& u,
                     double t, const Vector& x) {
  Matrix q = x;
  return running_deriv(spec, density, q, u.eval(q, t), false, false).value[0];
}

double terminal_value(const RewardSpec& spec, const ParticleEnsemble& ensemble) {
  require_nonempty(ensemble);
  return terminal_contributions(spec, ensemble.points).dot(ensemble.weights);
}

double terminal_deriv(const RewardSpec& spec, const Vector& x) { return spec.terminal.g(x); }

Vector terminal_contributions(const RewardSpec& spec, const Matrix& points) {
  if (points.rows() != spec.terminal.target.size()) {
    throw ValidationError("terminal reward dimension differs from the points");
  }
  Vector out(points.cols());
  for (Eigen::Index i = 0; i < points.cols(); ++i) out[i] = spec.terminal.g(points.col(i));
  return out;
}

}  // namespace mpdc
