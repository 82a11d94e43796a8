#include <doctest.h>

#include <cmath>

#include "mpdc/dynamics.hpp"
#include "mpdc/errors.hpp"
#include "oracles.hpp"

using namespace mpdc;

namespace {

std::shared_ptr<ScaledIdentityField> lq_field(int d, double horizon) {
  return std::make_shared<ScaledIdentityField>(d, [horizon](double t) { return 1.0 / (t - horizon - 1.0); });
}

// L = sum_j q_j sum_i w_i a_j . tanh(x) + sum_i w_i b . x^2 (+ u-dependent term)
class ProbeLoss final : public PathLoss {
 public:
  ProbeLoss(Vector w, double u_weight) : w_(std::move(w)), u_weight_(u_weight) {}
  double running(int step, double, const Matrix& x, const Matrix& u, Matrix* d_x,
                 Matrix* d_u) const override {
    const double a = 0.3 + 0.1 * step;
    Matrix th = x.array().tanh().matrix();
    double v = a * (th * w_).sum() + u_weight_ * 0.5 * (u.colwise().squaredNorm() * w_)(0);
    if (d_x) *d_x = a * (1.0 - th.array().square()).matrix() * w_.asDiagonal();
    if (d_u) *d_u = u_weight_ * u * w_.asDiagonal();
    return v;
  }
  double terminal(const Matrix& x, Matrix* d_x) const override {
    if (d_x) *d_x = 2.0 * x * w_.asDiagonal();
    return (x.colwise().squaredNorm() * w_)(0);
  }

 private:
  Vector w_;
  double u_weight_;
};

class HalfSquaredTerminal final : public PathLoss {
 public:
  double running(int, double, const Matrix&, const Matrix&, Matrix*, Matrix*) const override { return 0.0; }
  double terminal(const Matrix& x, Matrix* d_x) const override {
    if (d_x) *d_x = x;
    return 0.5 * x.squaredNorm();
  }
};

class ZeroLoss final : public PathLoss {
 public:
  double running(int, double, const Matrix&, const Matrix&, Matrix*, Matrix*) const override { return 0.0; }
  double terminal(const Matrix&, Matrix*) const override { return 0.0; }
};

}  // namespace

TEST_CASE("time grid") {
  TimeGrid g = TimeGrid::make(1.0, 0.1, {0.0, 0.25, 0.5, 0.75, 1.0});
  CHECK(g.times.front() == 0.0);
  CHECK(g.times.back() == 1.0);
  REQUIRE(g.checkpoint_steps.size() == 5);
  for (std::size_t c = 0; c < 5; ++c) {
    CHECK(g.times[static_cast<std::size_t>(g.checkpoint_steps[c])] == doctest::Approx(0.25 * c));
  }
  for (int j = 0; j < g.steps(); ++j) CHECK(g.step(j) <= 0.1 + 1e-15);
  CHECK(g.trapezoid_weights().sum() == doctest::Approx(1.0).epsilon(1e-14));
  CHECK_THROWS_AS(TimeGrid::make(1.0, 0.3, {0.0, 0.25, 0.5}), ValidationError);
  CHECK_THROWS_AS(TimeGrid::make(1.0, 0.1, {0.5, 0.25}), ValidationError);
  CHECK_THROWS_AS(TimeGrid::make(1.0, -0.1, {}), ValidationError);
}

TEST_CASE("sample_initial") {
  SUBCASE("degenerate Gaussian is rejected") {
    CHECK_THROWS_AS(sample_initial(GaussianDensity{Vector::Zero(2), 0.0}, 10, 1), ValidationError);
    CHECK_THROWS_AS(sample_initial(GaussianDensity{Vector::Zero(2), 1.0}, 0, 1), ValidationError);
  }
  SUBCASE("Gaussian mean") {
    const int n = 10000;
    ParticleEnsemble e = sample_initial(GaussianDensity{Vector::Constant(8, -2.0), 0.5}, n, 42);
    Vector m = weighted_mean(e);
    for (int k = 0; k < 8; ++k) CHECK(std::abs(m[k] + 2.0) <= 4.0 * std::sqrt(0.5 / n));
  }
  SUBCASE("truncated exponential support") {
    TruncExpGaussianDensity t;
    t.dim = 3;
    t.tail_mean = Vector::Zero(2);
    t.tail_mean[0] = 0.5;
    ParticleEnsemble e = sample_initial(t, 10000, 3);
    CHECK((e.points.row(0).array() <= -0.5).all());
    CHECK(e.points.row(0).mean() == doctest::Approx(-1.5).epsilon(0.03));
    CHECK(e.points.row(1).mean() == doctest::Approx(0.5).epsilon(0.03));
  }
  SUBCASE("seeded determinism") {
    GaussianDensity g{Vector::Zero(3), 1.0};
    CHECK((sample_initial(g, 50, 9).points.array() == sample_initial(g, 50, 9).points.array()).all());
  }
}

TEST_CASE("rollout") {
  SUBCASE("zero field keeps the ensemble") {
    ParticleEnsemble e = ParticleEnsemble::uniform(Matrix::Random(3, 20));
    Trajectory tr = rollout(e, *zero_field(3), 1.0, 0.1, {0.0, 0.5, 1.0});
    for (const Matrix& s : tr.states) CHECK((s.array() == e.points.array()).all());
  }
  SUBCASE("LQ optimal flow halves coordinates at T=1") {
    Matrix x(2, 1);
    x << 1.0, 1.0;
    Trajectory tr = rollout(ParticleEnsemble::uniform(x), *lq_field(2, 1.0), 1.0, 1e-3, {0.0, 1.0});
    CHECK((tr.final_state().col(0) - Eigen::Vector2d(0.5, 0.5)).cwiseAbs().maxCoeff() <= 1e-9);
  }
  SUBCASE("RK4 order against a reference solution") {
    // x' = -x^3 + sin(t) x has no closed form; compare against dt = 1e-4.
    FunctionField f(
        1, [](const Vector& x, double t) { return Vector((-x.array().cube() + std::sin(3 * t) * x.array()).matrix()); },
        [](const Vector&, double, const Vector& c) { return c; });
    Matrix x0 = Matrix::Constant(1, 1, 1.3);
    const double ref = rollout(ParticleEnsemble::uniform(x0), f, 1.0, 1e-4, {}).final_state()(0, 0);
    const double e1 = std::abs(rollout(ParticleEnsemble::uniform(x0), f, 1.0, 0.1, {}).final_state()(0, 0) - ref);
    const double e2 = std::abs(rollout(ParticleEnsemble::uniform(x0), f, 1.0, 0.05, {}).final_state()(0, 0) - ref);
    CHECK(std::log2(e1 / e2) >= 3.5);
  }
  SUBCASE("second moment follows the scale law") {
    const int n = 8192;
    GaussianDensity p{Vector::Zero(2), 1.0};
    ParticleEnsemble e = sample_initial(p, n, 17);
    Trajectory tr = rollout(e, *lq_field(2, 1.0), 1.0, 0.01, {0.0, 0.25, 0.5, 0.75, 1.0});
    for (int c = 0; c < 5; ++c) {
      const double t = 0.25 * c;
      const PushforwardGaussian pf = pushforward_density_check(p, 1.0, t);
      ParticleEnsemble et = tr.at_checkpoint(c);
      // Second moment per coordinate vs. its sample counterpart at t=0 scaled.
      const double empirical = weighted_second_moment(et) / 2.0;
      const double expected = pf.variance;
      const double se = std::sqrt(2.0 / (2.0 * n)) * expected;
      CHECK(std::abs(empirical - expected) <= 3.0 * se);
    }
  }
  SUBCASE("weights are conserved and replays are identical") {
    ParticleEnsemble e = sample_initial(GaussianDensity{Vector::Zero(2), 1.0}, 100, 4);
    e.weights = Vector::LinSpaced(100, 1.0, 2.0);
    e.weights /= e.weights.sum();
    ControlField u = make_control(2, {3, 2, 8, 2, nn::Activation::kTanh, true}, 5, false);
    Trajectory a = rollout(e, u, 1.0, 0.05, {0.0, 0.5, 1.0});
    Trajectory b = rollout(e, u, 1.0, 0.05, {0.0, 0.5, 1.0});
    CHECK((a.weights.array() == e.weights.array()).all());
    CHECK((a.final_state().array() == b.final_state().array()).all());
  }
  SUBCASE("blow-up names the particle") {
    FunctionField f(1, [](const Vector& x, double) { return Vector(x.array().square().matrix()); },
                    [](const Vector& x, double, const Vector& c) { return Vector((2 * x.array() * c.array()).matrix()); });
    Matrix x0(1, 3);
    x0 << 0.1, 5.0, 0.2;
    try {
      rollout(ParticleEnsemble::uniform(x0), f, 3.0, 0.01, {});
      CHECK(false);
    } catch (const NumericalError& err) {
      CHECK(std::string(err.what()).find("particle 1") != std::string::npos);
    }
  }
}

TEST_CASE("pushforward scale") {
  GaussianDensity p{Vector::Zero(2), 1.0};
  CHECK(pushforward_density_check(p, 1.0, 0.0).coordinate_scale == 1.0);
  CHECK(pushforward_density_check(p, 1.0, 1.0).coordinate_scale == 0.5);
  CHECK(pushforward_density_check(p, 1.0, 0.5).coordinate_scale == 0.75);
}

TEST_CASE("rollout_with_param_grad") {
  TimeGrid grid = TimeGrid::make(1.0, 0.05, {0.0, 0.5, 1.0});
  SUBCASE("zero loss") {
    ControlField u = make_control(2, {3, 2, 6, 2, nn::Activation::kTanh, true}, 2, false);
    RolloutGradient r = rollout_with_param_grad(ParticleEnsemble::uniform(Matrix::Random(2, 5)), u, grid, ZeroLoss());
    CHECK(r.param_grad.norm() == 0.0);
  }
  SUBCASE("linear field closed form") {
    for (double theta : {-0.7, 0.0, 0.4}) {
      LinearParamField u(1, theta);
      Matrix x0 = Matrix::Constant(1, 1, 1.5);
      TimeGrid fine = TimeGrid::make(1.0, 1e-3, {});
      RolloutGradient r = rollout_with_param_grad(ParticleEnsemble::uniform(x0), u, fine, HalfSquaredTerminal());
      const double exact = std::exp(2.0 * theta) * 1.5 * 1.5 * 1.0;
      CHECK(r.param_grad[0] == doctest::Approx(exact).epsilon(1e-9));
    }
  }
  SUBCASE("random networks match finite differences") {
    for (int rep = 0; rep < 10; ++rep) {
      ControlField u = make_control(2, {3, 2, 6, 1 + rep % 2, rep % 2 ? nn::Activation::kTanh : nn::Activation::kSoftplus, true},
                                    50 + rep, false);
      ParticleEnsemble e = ParticleEnsemble::uniform(Matrix::Random(2, 4));
      ProbeLoss loss(e.weights, rep % 3 == 0 ? 0.0 : 0.7);
      RolloutGradient r = rollout_with_param_grad(e, u, grid, loss);
      auto f = [&](const Vector& p) {
        ControlField c = u;
        c.set_params(p);
        return reverse_sweep(c, rollout(e, c, grid), loss, false, false).loss;
      };
      CHECK(oracle::relative_error(r.param_grad, oracle::central_gradient(f, u.params(), 1e-5)) <= 1e-4);
    }
  }
  SUBCASE("costate at t=0 is the gradient in the initial points") {
    ControlField u = make_control(2, {3, 2, 6, 2, nn::Activation::kTanh, true}, 8, false);
    Matrix x0 = Matrix::Random(2, 3);
    ParticleEnsemble e = ParticleEnsemble::uniform(x0);
    ProbeLoss loss(e.weights, 0.5);
    SweepResult s = reverse_sweep(u, rollout(e, u, grid), loss, false, true);
    Vector flat = Eigen::Map<const Vector>(x0.data(), x0.size());
    auto f = [&](const Vector& p) {
      ParticleEnsemble q = ParticleEnsemble::uniform(Eigen::Map<const Matrix>(p.data(), 2, 3));
      return reverse_sweep(u, rollout(q, u, grid), loss, false, false).loss;
    };
    Vector analytic = Eigen::Map<const Vector>(s.costates[0].data(), 6);
    CHECK(oracle::relative_error(analytic, oracle::central_gradient(f, flat, 1e-5)) <= 1e-6);
  }
}
