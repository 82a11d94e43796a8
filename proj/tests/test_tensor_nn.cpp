#include <doctest.h>

#include <cmath>
#include <random>

#include "mpdc/errors.hpp"
#include "mpdc/nn/adam.hpp"
#include "mpdc/nn/param_field.hpp"
#include "mpdc/nn/tape.hpp"
#include "oracles.hpp"

using mpdc::nn::Activation;
using mpdc::nn::AdamState;
using mpdc::nn::FieldArchitecture;
using mpdc::nn::Matrix;
using mpdc::nn::OpKind;
using mpdc::nn::ParamField;
using mpdc::nn::Tape;
using mpdc::nn::Var;

namespace {

Matrix random_matrix(std::mt19937_64& rng, int rows, int cols, double away_from_zero = 0.0) {
  std::uniform_real_distribution<double> dist(-1.5, 1.5);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    double v = dist(rng);
    while (std::abs(v) < away_from_zero) v = dist(rng);
    m.data()[i] = v;
  }
  return m;
}

// Applies one primitive to leaves built from a flat vector and contracts the
// result with fixed weights so the output is scalar.
struct OpCase {
  OpKind kind;
  int rows_a, cols_a, rows_b, cols_b;
};

Var apply(Tape& tape, OpKind kind, Var a, Var b) {
  switch (kind) {
    case OpKind::kMatMul: return tape.matmul(a, b);
    case OpKind::kAdd: return tape.add(a, b);
    case OpKind::kSub: return tape.sub(a, b);
    case OpKind::kMul: return tape.mul(a, b);
    case OpKind::kScale: return tape.scale(a, -1.7);
    case OpKind::kAddBroadcast: return tape.add_broadcast(a, b);
    case OpKind::kTanh: return tape.tanh(a);
    case OpKind::kSoftplus: return tape.softplus(a);
    case OpKind::kSigmoid: return tape.sigmoid(a);
    case OpKind::kRelu: return tape.relu(a);
    case OpKind::kSquare: return tape.square(a);
    case OpKind::kColSum: return tape.col_sum(a);
    case OpKind::kSum: return tape.sum(a);
    default: return a;
  }
}

bool binary(OpKind k) {
  return k == OpKind::kMatMul || k == OpKind::kAdd || k == OpKind::kSub || k == OpKind::kMul ||
         k == OpKind::kAddBroadcast;
}

}  // namespace

TEST_CASE("every tape primitive matches central differences on 100 random cases") {
  const OpCase cases[] = {
      {OpKind::kMatMul, 3, 4, 4, 2}, {OpKind::kAdd, 3, 2, 3, 2},   {OpKind::kSub, 3, 2, 3, 2},
      {OpKind::kMul, 3, 2, 3, 2},    {OpKind::kScale, 2, 3, 0, 0}, {OpKind::kAddBroadcast, 3, 4, 3, 1},
      {OpKind::kTanh, 3, 3, 0, 0},   {OpKind::kSoftplus, 3, 3, 0, 0},
      {OpKind::kSigmoid, 3, 3, 0, 0}, {OpKind::kRelu, 3, 3, 0, 0},
      {OpKind::kSquare, 3, 3, 0, 0}, {OpKind::kColSum, 3, 4, 0, 0}, {OpKind::kSum, 3, 4, 0, 0},
  };
  std::mt19937_64 rng(2024);
  for (const OpCase& c : cases) {
    for (int rep = 0; rep < 100; ++rep) {
      const double away = c.kind == OpKind::kRelu ? 0.05 : 0.0;
      Matrix a0 = random_matrix(rng, c.rows_a, c.cols_a, away);
      Matrix b0 = binary(c.kind) ? random_matrix(rng, c.rows_b, c.cols_b) : Matrix();
      const Eigen::Index na = a0.size();
      const Eigen::Index nb = b0.size();

      Tape probe;
      Var pa = probe.leaf(a0, true);
      Var pb = binary(c.kind) ? probe.leaf(b0, true) : Var{};
      const Matrix& shape = probe.value(apply(probe, c.kind, pa, pb));
      Matrix contract = random_matrix(rng, static_cast<int>(shape.rows()), static_cast<int>(shape.cols()));

      auto loss = [&](const Eigen::VectorXd& flat) {
        Tape t;
        Var va = t.leaf(Eigen::Map<const Matrix>(flat.data(), a0.rows(), a0.cols()), true);
        Var vb = binary(c.kind)
                     ? t.leaf(Eigen::Map<const Matrix>(flat.data() + na, b0.rows(), b0.cols()), true)
                     : Var{};
        return t.value(apply(t, c.kind, va, vb)).cwiseProduct(contract).sum();
      };

      Eigen::VectorXd flat(na + nb);
      flat.head(na) = Eigen::Map<const Eigen::VectorXd>(a0.data(), na);
      if (nb > 0) flat.tail(nb) = Eigen::Map<const Eigen::VectorXd>(b0.data(), nb);

      Tape t;
      Var va = t.leaf(a0, true);
      Var vb = binary(c.kind) ? t.leaf(b0, true) : Var{};
      Var out = apply(t, c.kind, va, vb);
      Var scalar = t.sum(t.mul(out, t.constant(contract)));
      t.backward(scalar);
      Eigen::VectorXd analytic(na + nb);
      analytic.head(na) = Eigen::Map<const Eigen::VectorXd>(t.grad(va).data(), na);
      if (nb > 0) analytic.tail(nb) = Eigen::Map<const Eigen::VectorXd>(t.grad(vb).data(), nb);

      const Eigen::VectorXd fd = oracle::central_gradient(loss, flat, 1e-4);
      INFO("op kind " << static_cast<int>(c.kind) << " rep " << rep);
      CHECK(oracle::relative_error(analytic, fd) <= 1e-5);
    }
  }
}

TEST_CASE("step has no gradient and grad before backward is an error") {
  Tape t;
  Var a = t.leaf(Matrix::Constant(2, 2, 0.3), true);
  Var s = t.step(a);
  CHECK_FALSE(t.requires_grad(s));
  CHECK(t.kind(s) == OpKind::kStep);
  CHECK_THROWS_AS(t.grad(a), mpdc::ValidationError);
  t.backward(t.sum(t.add(t.mul(s, a), a)));
  CHECK(t.grad(a).isApprox(Matrix::Constant(2, 2, 2.0)));
}

TEST_CASE("tape replays are bit-identical") {
  FieldArchitecture arch{3, 2, 16, 2, Activation::kTanh, true};
  ParamField f(arch, 7);
  Matrix x = Matrix::Random(3, 5);
  Tape t1, t2;
  auto g1 = f.record(t1, x, true);
  auto g2 = f.record(t2, x, true);
  t1.backward(t1.sum(g1.output));
  t2.backward(t2.sum(g2.output));
  CHECK((t1.value(g1.output).array() == t2.value(g2.output).array()).all());
  CHECK((f.gather_param_grad(t1, g1).array() == f.gather_param_grad(t2, g2).array()).all());
}

TEST_CASE("forward examples") {
  SUBCASE("zero output layer gives zero") {
    mpdc::nn::FieldInit init;
    init.zero_output = true;
    ParamField f({3, 2, 10, 2, Activation::kSoftplus, true}, 3, init);
    Eigen::Vector2d x(0.4, -1.3);
    CHECK(mpdc::nn::forward(f, x, 0.6).norm() == 0.0);
  }
  SUBCASE("identity linear layer") {
    ParamField f({3, 2, 0, 0, Activation::kTanh, false}, 1);
    Matrix w = Matrix::Zero(2, 3);
    w(0, 0) = 1.0;
    w(1, 1) = 1.0;
    f.weight(0) = w;
    f.bias(0).setZero();
    Eigen::VectorXd y = mpdc::nn::forward(f, Eigen::Vector2d(1.0, 2.0), 0.0);
    CHECK(y[0] == 1.0);
    CHECK(y[1] == 2.0);
  }
  SUBCASE("seeded determinism") {
    FieldArchitecture arch{3, 2, 20, 2, Activation::kSoftplus, true};
    ParamField a(arch, 7), b(arch, 7);
    CHECK((a.params().array() == b.params().array()).all());
    Eigen::Vector2d x(0.3, 0.9);
    CHECK((mpdc::nn::forward(a, x, 0.5).array() == mpdc::nn::forward(b, x, 0.5).array()).all());
    ParamField c(arch, 8);
    CHECK((a.params() - c.params()).norm() > 0.0);
  }
  SUBCASE("non-finite input is rejected") {
    ParamField f({3, 2, 4, 1, Activation::kTanh, false}, 1);
    Eigen::Vector2d x(std::nan(""), 0.0);
    CHECK_THROWS_AS(mpdc::nn::forward(f, x, 0.0), mpdc::ValidationError);
    CHECK_THROWS_AS(mpdc::nn::forward(f, Eigen::Vector2d(0, 0), INFINITY), mpdc::ValidationError);
  }
}

TEST_CASE("grad_params") {
  FieldArchitecture arch{3, 2, 8, 2, Activation::kTanh, true};
  ParamField f(arch, 11);
  Matrix x = Matrix::Random(3, 4);

  SUBCASE("constant loss has zero gradient") {
    Tape t;
    auto g = f.record(t, x, false);
    Var loss = t.sum(t.scale(g.output, 0.0));
    CHECK(mpdc::nn::grad_params(f, t, g, loss).norm() == 0.0);
  }
  SUBCASE("half squared norm of the parameters") {
    Tape t;
    auto g = f.record(t, x, false);
    Var acc = t.scale(t.sum(t.square(g.weights[0])), 0.5);
    for (std::size_t i = 0; i < g.weights.size(); ++i) {
      if (i > 0) acc = t.add(acc, t.scale(t.sum(t.square(g.weights[i])), 0.5));
      acc = t.add(acc, t.scale(t.sum(t.square(g.biases[i])), 0.5));
    }
    CHECK(oracle::relative_error(mpdc::nn::grad_params(f, t, g, acc), f.params()) <= 1e-14);
  }
  SUBCASE("detached or foreign loss is rejected") {
    Tape t, other;
    auto g = f.record(t, x, false);
    CHECK_THROWS_AS(mpdc::nn::grad_params(f, t, g, Var{}), mpdc::ValidationError);
    Var foreign = other.sum(other.leaf(Matrix::Ones(1, 1), true));
    CHECK_THROWS_AS(mpdc::nn::grad_params(f, t, g, foreign), mpdc::ValidationError);
  }
  SUBCASE("random architectures match finite differences") {
    std::mt19937_64 rng(5);
    const Activation acts[] = {Activation::kTanh, Activation::kSoftplus};
    for (int rep = 0; rep < 20; ++rep) {
      FieldArchitecture a{3, rep % 2 == 0 ? 2 : 1, 6 + rep % 5, 1 + rep % 3, acts[rep % 2], rep % 3 != 0};
      ParamField net(a, 100 + rep);
      Matrix in = random_matrix(rng, 3, 5);
      Matrix w = random_matrix(rng, a.output_dim, 5);
      auto loss = [&](const Eigen::VectorXd& p) {
        ParamField copy = net;
        copy.set_params(p);
        return copy.evaluate(in).cwiseProduct(w).sum();
      };
      Tape t;
      auto g = net.record(t, in, false);
      Var l = t.sum(t.mul(g.output, t.constant(w)));
      Eigen::VectorXd analytic = mpdc::nn::grad_params(net, t, g, l);
      CHECK(oracle::relative_error(analytic, oracle::central_gradient(loss, net.params(), 1e-4)) <=
            1e-5);
    }
  }
}

TEST_CASE("grad_x") {
  SUBCASE("constant field") {
    ParamField f({3, 1, 0, 0, Activation::kTanh, false}, 2);
    f.weight(0).setZero();
    f.bias(0).setConstant(3.0);
    CHECK(mpdc::nn::grad_x(f, Eigen::Vector2d(0.5, -0.2), 0.3).norm() == 0.0);
  }
  SUBCASE("random fields match finite differences") {
    std::mt19937_64 rng(9);
    for (int rep = 0; rep < 20; ++rep) {
      FieldArchitecture a{3, 2, 10, 2, rep % 2 ? Activation::kTanh : Activation::kSoftplus, true};
      ParamField f(a, 300 + rep);
      Eigen::VectorXd x = random_matrix(rng, 2, 1).col(0);
      const double t = 0.37;
      Matrix jac = mpdc::nn::grad_x(f, x, t);
      for (int k = 0; k < 2; ++k) {
        auto comp = [&](const Eigen::VectorXd& p) { return mpdc::nn::forward(f, p, t)[k]; };
        Eigen::VectorXd fd = oracle::central_gradient(comp, x, 1e-4);
        CHECK(oracle::relative_error(jac.row(k).transpose(), fd) <= 1e-5);
      }
    }
  }
  SUBCASE("tangents recorded on the tape agree with grad_x") {
    FieldArchitecture a{3, 2, 12, 3, Activation::kSoftplus, true};
    ParamField f(a, 4);
    Eigen::Vector2d x(0.2, -0.6);
    Tape t;
    auto tg = f.record_with_tangents(t, mpdc::nn::space_time_input(x, 0.4));
    Matrix jac = mpdc::nn::grad_x(f, x, 0.4);
    for (int k = 0; k < 2; ++k) {
      CHECK((t.value(tg.tangents[k]).col(0) - jac.col(k)).norm() <= 1e-12);
    }
  }
}

TEST_CASE("adam_step") {
  SUBCASE("zero gradient leaves params unchanged and decays moments") {
    AdamState s = AdamState::for_params(3, 0.1);
    s.first_moment << 1.0, 2.0, 3.0;
    Eigen::VectorXd p(3);
    p << 1.0, -1.0, 0.5;
    Eigen::VectorXd before = p;
    s.second_moment.setConstant(1e30);  // makes the residual step vanish
    adam_step(s, p, Eigen::VectorXd::Zero(3));
    CHECK((p - before).norm() < 1e-12);
    CHECK(s.first_moment[1] == doctest::Approx(1.8));
    CHECK(s.step == 1);
  }
  SUBCASE("plain zero gradient from zero moments is a no-op") {
    AdamState s = AdamState::for_params(2, 0.1);
    Eigen::VectorXd p = Eigen::Vector2d(3.0, 4.0);
    adam_step(s, p, Eigen::VectorXd::Zero(2));
    CHECK(p == Eigen::VectorXd(Eigen::Vector2d(3.0, 4.0)));
  }
  SUBCASE("single step from zero moments") {
    AdamState s = AdamState::for_params(2, 0.01);
    Eigen::VectorXd p = Eigen::Vector2d(0.0, 0.0);
    Eigen::VectorXd g = Eigen::Vector2d(0.3, -2.0);
    adam_step(s, p, g);
    // m_hat = g, v_hat = g^2, step = lr * g / (|g| + eps).
    CHECK(p[0] == doctest::Approx(-0.01 * 0.3 / (0.3 + 1e-8)).epsilon(1e-12));
    CHECK(p[1] == doctest::Approx(0.01 * 2.0 / (2.0 + 1e-8)).epsilon(1e-12));
  }
  SUBCASE("constant gradient converges to -sign(g) lr") {
    AdamState s = AdamState::for_params(2, 0.05);
    Eigen::VectorXd p = Eigen::Vector2d::Zero();
    Eigen::VectorXd g = Eigen::Vector2d(4.0, -0.001);
    Eigen::VectorXd prev = p;
    for (int i = 0; i < 500; ++i) {
      prev = p;
      adam_step(s, p, g);
    }
    Eigen::VectorXd stepv = p - prev;
    CHECK(stepv[0] == doctest::Approx(-0.05).epsilon(1e-6));
    CHECK(stepv[1] == doctest::Approx(0.05).epsilon(1e-4));
  }
  SUBCASE("errors leave state untouched") {
    AdamState s = AdamState::for_params(2, 0.05);
    Eigen::VectorXd p = Eigen::Vector2d(1.0, 2.0);
    CHECK_THROWS_AS(adam_step(s, p, Eigen::Vector2d(NAN, 0.0)), mpdc::NumericalError);
    CHECK_THROWS_AS(adam_step(s, p, Eigen::VectorXd::Zero(3)), mpdc::ValidationError);
    CHECK(s.step == 0);
    CHECK(p == Eigen::VectorXd(Eigen::Vector2d(1.0, 2.0)));
  }
}

TEST_CASE("lipschitz projection") {
  FieldArchitecture arch{3, 2, 30, 3, Activation::kSoftplus, true};
  ParamField f(arch, 21, {5.0, false});
  f.set_lipschitz_cap(2.0);
  CHECK(f.lipschitz_bound() > f.cap_bound());
  f.project();
  CHECK(f.lipschitz_bound() <= f.cap_bound() * (1.0 + 1e-12));
  Eigen::VectorXd once = f.params();
  f.project();
  CHECK((f.params().array() == once.array()).all());
  for (std::size_t l = 0; l < f.num_layers(); ++l) CHECK(f.weight(l).norm() <= 2.0 + 1e-12);
}
