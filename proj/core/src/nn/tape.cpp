#include "mpdc/nn/tape.hpp"

#include <cmath>
#include <string>

#include "mpdc/errors.hpp"

namespace mpdc::nn {
namespace {

// log(1 + e^x) = max(x, 0) + log(1 + e^{-|x|}), no overflow for large |x|.
Matrix softplus_of(const Matrix& x) {
  return (x.array().max(0.0) + (1.0 + (-x.array().abs()).exp()).log()).matrix();
}

// e^{-x} may overflow to inf, which still gives the right limit 0.
Matrix sigmoid_of(const Matrix& x) { return (1.0 + (-x.array()).exp()).inverse().matrix(); }

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ValidationError(std::string("tape: shape mismatch in ") + op + ": " +
                          std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + " vs " +
                          std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
}

}  // namespace

Var Tape::push(OpKind op, int a, int b, double scalar, Matrix value) {
  Node n;
  n.op = op;
  n.a = a;
  n.b = b;
  n.scalar = scalar;
  n.requires_grad = (a >= 0 && nodes_[a].requires_grad) || (b >= 0 && nodes_[b].requires_grad);
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

void Tape::check_owned(Var v) const {
  if (v.tape != this || v.id < 0 || v.id >= static_cast<int>(nodes_.size())) {
    throw ValidationError("tape: variable does not belong to this tape");
  }
}

const Tape::Node& Tape::node(Var v) const {
  check_owned(v);
  return nodes_[v.id];
}

Var Tape::leaf(Matrix value, bool requires_grad) {
  Node n;
  n.op = OpKind::kLeaf;
  n.requires_grad = requires_grad;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::matmul(Var a, Var b) {
  const Matrix& x = node(a).value;
  const Matrix& y = node(b).value;
  if (x.cols() != y.rows()) {
    throw ValidationError("tape: matmul inner dimensions differ (" + std::to_string(x.cols()) +
                          " vs " + std::to_string(y.rows()) + ")");
  }
  Matrix out = x * y;
  return push(OpKind::kMatMul, a.id, b.id, 0.0, std::move(out));
}

Var Tape::add(Var a, Var b) {
  require_same_shape(node(a).value, node(b).value, "add");
  Matrix out = node(a).value + node(b).value;
  return push(OpKind::kAdd, a.id, b.id, 0.0, std::move(out));
}

Var Tape::sub(Var a, Var b) {
  require_same_shape(node(a).value, node(b).value, "sub");
  Matrix out = node(a).value - node(b).value;
  return push(OpKind::kSub, a.id, b.id, 0.0, std::move(out));
}

Var Tape::mul(Var a, Var b) {
  require_same_shape(node(a).value, node(b).value, "mul");
  Matrix out = node(a).value.cwiseProduct(node(b).value);
  return push(OpKind::kMul, a.id, b.id, 0.0, std::move(out));
}

Var Tape::scale(Var a, double factor) {
  Matrix out = factor * node(a).value;
  return push(OpKind::kScale, a.id, -1, factor, std::move(out));
}

Var Tape::add_broadcast(Var a, Var column) {
  const Matrix& x = node(a).value;
  const Matrix& c = node(column).value;
  if (c.cols() != 1 || c.rows() != x.rows()) {
    throw ValidationError("tape: add_broadcast expects a column vector with matching rows");
  }
  Matrix out = x.colwise() + c.col(0);
  return push(OpKind::kAddBroadcast, a.id, column.id, 0.0, std::move(out));
}

Var Tape::tanh(Var a) {
  Matrix out = node(a).value.array().tanh().matrix();
  return push(OpKind::kTanh, a.id, -1, 0.0, std::move(out));
}

Var Tape::softplus(Var a) {
  Matrix out = softplus_of(node(a).value);
  return push(OpKind::kSoftplus, a.id, -1, 0.0, std::move(out));
}

Var Tape::sigmoid(Var a) {
  Matrix out = sigmoid_of(node(a).value);
  return push(OpKind::kSigmoid, a.id, -1, 0.0, std::move(out));
}

Var Tape::relu(Var a) {
  Matrix out = node(a).value.cwiseMax(0.0);
  return push(OpKind::kRelu, a.id, -1, 0.0, std::move(out));
}

Var Tape::step(Var a) {
  Matrix out = node(a).value.unaryExpr([](double x) { return x > 0.0 ? 1.0 : 0.0; });
  Var v = push(OpKind::kStep, a.id, -1, 0.0, std::move(out));
  nodes_[v.id].requires_grad = false;
  return v;
}

Var Tape::square(Var a) {
  Matrix out = node(a).value.array().square().matrix();
  return push(OpKind::kSquare, a.id, -1, 0.0, std::move(out));
}

Var Tape::col_sum(Var a) {
  Matrix out = node(a).value.colwise().sum();
  return push(OpKind::kColSum, a.id, -1, 0.0, std::move(out));
}

Var Tape::sum(Var a) {
  Matrix out(1, 1);
  out(0, 0) = node(a).value.sum();
  return push(OpKind::kSum, a.id, -1, 0.0, std::move(out));
}

const Matrix& Tape::value(Var v) const { return node(v).value; }

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

OpKind Tape::kind(Var v) const { return node(v).op; }

const Matrix& Tape::grad(Var v) const {
  const Node& n = node(v);
  if (!has_backward_) {
    throw ValidationError("tape: grad() requested before backward()");
  }
  return n.grad;
}

void Tape::backward(Var out) {
  const Node& n = node(out);
  if (n.value.rows() != 1 || n.value.cols() != 1) {
    throw ValidationError("tape: backward() without a seed needs a 1x1 output");
  }
  backward(out, Matrix::Ones(1, 1));
}

void Tape::backward(Var out, const Matrix& seed) {
  check_owned(out);
  require_same_shape(nodes_[out.id].value, seed, "backward seed");
  for (Node& n : nodes_) {
    n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  }
  has_backward_ = true;
  nodes_[out.id].grad = seed;
  for (int i = out.id; i >= 0; --i) {
    if (nodes_[i].requires_grad && nodes_[i].op != OpKind::kLeaf) {
      propagate(i);
    }
  }
}

void Tape::propagate(int index) {
  Node& n = nodes_[index];
  const Matrix& g = n.grad;
  Node* a = n.a >= 0 ? &nodes_[n.a] : nullptr;
  Node* b = n.b >= 0 ? &nodes_[n.b] : nullptr;
  auto wants = [](const Node* p) { return p != nullptr && p->requires_grad; };

  switch (n.op) {
    case OpKind::kLeaf:
    case OpKind::kStep:
      break;
    case OpKind::kMatMul:
      if (wants(a)) a->grad.noalias() += g * b->value.transpose();
      if (wants(b)) b->grad.noalias() += a->value.transpose() * g;
      break;
    case OpKind::kAdd:
      if (wants(a)) a->grad += g;
      if (wants(b)) b->grad += g;
      break;
    case OpKind::kSub:
      if (wants(a)) a->grad += g;
      if (wants(b)) b->grad -= g;
      break;
    case OpKind::kMul:
      if (wants(a)) a->grad += g.cwiseProduct(b->value);
      if (wants(b)) b->grad += g.cwiseProduct(a->value);
      break;
    case OpKind::kScale:
      if (wants(a)) a->grad += n.scalar * g;
      break;
    case OpKind::kAddBroadcast:
      if (wants(a)) a->grad += g;
      if (wants(b)) b->grad.col(0) += g.rowwise().sum();
      break;
    case OpKind::kTanh:
      if (wants(a)) a->grad.array() += g.array() * (1.0 - n.value.array().square());
      break;
    case OpKind::kSoftplus:
      if (wants(a)) a->grad.array() += g.array() * sigmoid_of(a->value).array();
      break;
    case OpKind::kSigmoid:
      if (wants(a)) a->grad.array() += g.array() * n.value.array() * (1.0 - n.value.array());
      break;
    case OpKind::kRelu:
      if (wants(a)) {
        a->grad += g.cwiseProduct(a->value.unaryExpr([](double x) { return x > 0.0 ? 1.0 : 0.0; }));
      }
      break;
    case OpKind::kSquare:
      if (wants(a)) a->grad += 2.0 * g.cwiseProduct(a->value);
      break;
    case OpKind::kColSum:
      if (wants(a)) a->grad.rowwise() += g.row(0);
      break;
    case OpKind::kSum:
      if (wants(a)) a->grad.array() += g(0, 0);
      break;
  }
}

}  // namespace mpdc::nn
