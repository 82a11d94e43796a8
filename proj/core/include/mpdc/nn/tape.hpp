#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

namespace mpdc::nn {

using Matrix = Eigen::MatrixXd;

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; only valid while the
/// owning tape is alive.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool attached() const { return tape != nullptr && id >= 0; }
};

enum class OpKind : std::uint8_t {
  kLeaf,
  kMatMul,
  kAdd,
  kSub,
  kMul,
  kScale,
  kAddBroadcast,  // (m x n) + (m x 1) column vector added to every column
  kTanh,
  kSoftplus,
  kSigmoid,
  kRelu,
  kStep,          // 1[x > 0]; zero derivative
  kSquare,
  kColSum,        // (m x n) -> (1 x n)
  kSum,           // (m x n) -> (1 x 1)
};

/// Reverse-mode automatic differentiation over dense matrices.
///
/// Nodes are appended in evaluation order, so the node index is a valid
/// topological order and the backward sweep is a single reverse pass. The
/// reduction order of every primitive is fixed, which makes replays with
/// identical inputs bit-identical.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Matrix value, bool requires_grad);
  Var constant(Matrix value) { return leaf(std::move(value), false); }

  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double factor);
  Var add_broadcast(Var a, Var column);
  Var tanh(Var a);
  Var softplus(Var a);
  Var sigmoid(Var a);
  Var relu(Var a);
  Var step(Var a);
  Var square(Var a);
  Var col_sum(Var a);
  Var sum(Var a);

  const Matrix& value(Var v) const;
  /// Gradient of the last backward() output with respect to `v`. Nodes that
  /// do not require gradients report an all-zero matrix of their shape.
  const Matrix& grad(Var v) const;
  bool requires_grad(Var v) const;

  /// Seeds d(out)/d(out) = 1 for a 1x1 output and sweeps backwards.
  void backward(Var out);
  /// Vector-Jacobian product: seeds the cotangent of `out` with `seed`.
  void backward(Var out, const Matrix& seed);

  std::size_t size() const { return nodes_.size(); }
  OpKind kind(Var v) const;

 private:
  struct Node {
    OpKind op = OpKind::kLeaf;
    int a = -1;
    int b = -1;
    double scalar = 0.0;
    bool requires_grad = false;
    Matrix value;
    Matrix grad;
  };

  Var push(OpKind op, int a, int b, double scalar, Matrix value);
  const Node& node(Var v) const;
  void check_owned(Var v) const;
  void propagate(int index);

  std::vector<Node> nodes_;
  bool has_backward_ = false;
};

inline Var operator+(Var a, Var b) { return a.tape->add(a, b); }
inline Var operator-(Var a, Var b) { return a.tape->sub(a, b); }
inline Var operator*(Var a, Var b) { return a.tape->mul(a, b); }
inline Var operator*(double s, Var a) { return a.tape->scale(a, s); }

}  // namespace mpdc::nn
