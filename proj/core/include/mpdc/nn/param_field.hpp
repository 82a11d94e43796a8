#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "mpdc/nn/tape.hpp"

namespace mpdc::nn {

enum class Activation { kTanh, kSoftplus, kRelu };

/// Shape of a (residual) multilayer perceptron.
///
/// hidden_layers == 0 gives a single affine map input -> output. Otherwise the
/// first hidden layer lifts the input to `width`, every further hidden layer is
/// h <- h + act(W h + b) when `residual` is set (plain act(W h + b) otherwise),
/// and a final affine layer maps to the output.
struct FieldArchitecture {
  int input_dim = 1;
  int output_dim = 1;
  int width = 100;
  int hidden_layers = 2;
  Activation activation = Activation::kSoftplus;
  bool residual = true;
};

struct FieldInit {
  double gain = 1.0;
  /// Zero the output layer so the field starts identically zero.
  bool zero_output = false;
};

/// Nodes recorded by ParamField::record.
struct FieldGraph {
  Var input;
  Var output;
  std::vector<Var> weights;
  std::vector<Var> biases;
};

/// Value plus forward-mode tangents along every input coordinate, all recorded
/// on a tape so that parameter gradients of derivative expressions are exact.
struct TangentGraph {
  FieldGraph graph;
  std::vector<Var> tangents;  // tangents[k] = d output / d input_k, output_dim x batch
};

/// Differentiable parameterized map R^input_dim -> R^output_dim with a flat
/// parameter vector. Inputs are column-major batches: one column per sample.
class ParamField {
 public:
  ParamField() = default;
  ParamField(const FieldArchitecture& arch, std::uint64_t seed, FieldInit init = {});

  const FieldArchitecture& architecture() const { return arch_; }
  int input_dim() const { return arch_.input_dim; }
  int output_dim() const { return arch_.output_dim; }

  std::size_t num_params() const { return static_cast<std::size_t>(params_.size()); }
  const Eigen::VectorXd& params() const { return params_; }
  void set_params(const Eigen::VectorXd& params);

  std::size_t num_layers() const { return layers_.size(); }
  Eigen::Map<const Matrix> weight(std::size_t layer) const;
  Eigen::Map<Matrix> weight(std::size_t layer);
  Eigen::Map<const Eigen::VectorXd> bias(std::size_t layer) const;
  Eigen::Map<Eigen::VectorXd> bias(std::size_t layer);

  /// Plain batched evaluation, no tape. inputs: input_dim x B.
  Matrix evaluate(const Matrix& inputs) const;

  FieldGraph record(Tape& tape, const Matrix& inputs, bool input_requires_grad) const;
  TangentGraph record_with_tangents(Tape& tape, const Matrix& inputs) const;

  /// Collects d(loss)/d(params) from a tape on which backward() has run.
  Eigen::VectorXd gather_param_grad(const Tape& tape, const FieldGraph& graph) const;

  /// Per-layer Frobenius cap; std::nullopt disables projection.
  void set_lipschitz_cap(std::optional<double> cap) { lipschitz_cap_ = cap; }
  std::optional<double> lipschitz_cap() const { return lipschitz_cap_; }
  /// Rescales every weight matrix whose Frobenius norm exceeds the cap.
  void project();
  /// Product of per-layer Lipschitz bounds (Frobenius norm dominates the
  /// operator norm; residual layers contribute 1 + |W|).
  double lipschitz_bound() const;
  /// The bound lipschitz_bound() would take with every layer at the cap.
  double cap_bound() const;

 private:
  struct Layer {
    int rows = 0;
    int cols = 0;
    std::size_t weight_offset = 0;
    std::size_t bias_offset = 0;
    bool activated = false;
    bool residual = false;
  };

  Var activate(Tape& tape, Var z) const;
  Var activation_slope(Tape& tape, Var z, Var activated) const;

  FieldArchitecture arch_;
  std::vector<Layer> layers_;
  Eigen::VectorXd params_;
  std::optional<double> lipschitz_cap_;
};

/// Stacks x (d) and t into the d+1 network input.
Eigen::VectorXd space_time_input(const Eigen::VectorXd& x, double t);
/// Stacks a d x B batch with per-column times into (d+1) x B.
Matrix space_time_inputs(const Matrix& points, const Eigen::VectorXd& times);
Matrix space_time_inputs(const Matrix& points, double t);

/// Evaluates a field whose input is (x, t). Rejects non-finite input.
Eigen::VectorXd forward(const ParamField& field, const Eigen::VectorXd& x, double t);

/// Gradient of a scalar loss recorded on `tape` with respect to the field's
/// parameters. Throws if `loss` does not live on the tape holding `graph`.
Eigen::VectorXd grad_params(const ParamField& field, Tape& tape, const FieldGraph& graph, Var loss);

/// Spatial Jacobian d output / d x at (x, t); output_dim x d.
Matrix grad_x(const ParamField& field, const Eigen::VectorXd& x, double t);

}  // namespace mpdc::nn
