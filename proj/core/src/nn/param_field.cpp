#include "mpdc/nn/param_field.hpp"

#include <cmath>
#include <limits>
#include <random>
#include <string>

#include "mpdc/errors.hpp"

namespace mpdc::nn {
namespace {


Matrix apply_activation(Activation act, const Matrix& z) {
  switch (act) {
    case Activation::kTanh:
      return z.array().tanh().matrix();
    case Activation::kSoftplus:
      return (z.array().max(0.0) + (1.0 + (-z.array().abs()).exp()).log()).matrix();
    case Activation::kRelu:
      return z.cwiseMax(0.0);
  }
  return z;
}

void require_finite(const Eigen::VectorXd& x, double t) {
  if (!x.allFinite() || !std::isfinite(t)) {
    throw ValidationError("field input is not finite");
  }
}

}  // namespace

ParamField::ParamField(const FieldArchitecture& arch, std::uint64_t seed, FieldInit init)
    : arch_(arch) {
  if (arch.input_dim < 1 || arch.output_dim < 1) {
    throw ValidationError("ParamField: input and output dimensions must be positive");
  }
  if (arch.hidden_layers < 0 || (arch.hidden_layers > 0 && arch.width < 1)) {
    throw ValidationError("ParamField: invalid width/depth");
  }

  std::size_t offset = 0;
  auto add_layer = [&](int rows, int cols, bool activated, bool residual) {
    Layer l;
    l.rows = rows;
    l.cols = cols;
    l.weight_offset = offset;
    offset += static_cast<std::size_t>(rows) * cols;
    l.bias_offset = offset;
    offset += rows;
    l.activated = activated;
    l.residual = residual;
    layers_.push_back(l);
  };

  if (arch.hidden_layers == 0) {
    add_layer(arch.output_dim, arch.input_dim, false, false);
  } else {
    add_layer(arch.width, arch.input_dim, true, false);
    for (int i = 1; i < arch.hidden_layers; ++i) {
      add_layer(arch.width, arch.width, true, arch.residual);
    }
    add_layer(arch.output_dim, arch.width, false, false);
  }

  params_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(offset));
  std::mt19937_64 rng(seed);
  for (std::size_t li = 0; li < layers_.size(); ++li) {
    const Layer& l = layers_[li];
    const bool last = li + 1 == layers_.size();
    if (last && init.zero_output) continue;
    const double bound = init.gain / std::sqrt(static_cast<double>(l.cols));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (int i = 0; i < l.rows * l.cols; ++i) params_[l.weight_offset + i] = dist(rng);
    for (int i = 0; i < l.rows; ++i) params_[l.bias_offset + i] = dist(rng);
  }
}

void ParamField::set_params(const Eigen::VectorXd& params) {
  if (params.size() != params_.size()) {
    throw ValidationError("ParamField::set_params: expected " + std::to_string(params_.size()) +
                          " parameters, got " + std::to_string(params.size()));
  }
  params_ = params;
}

Eigen::Map<const Matrix> ParamField::weight(std::size_t layer) const {
  const Layer& l = layers_.at(layer);
  return {params_.data() + l.weight_offset, l.rows, l.cols};
}

Eigen::Map<Matrix> ParamField::weight(std::size_t layer) {
  const Layer& l = layers_.at(layer);
  return {params_.data() + l.weight_offset, l.rows, l.cols};
}

Eigen::Map<const Eigen::VectorXd> ParamField::bias(std::size_t layer) const {
  const Layer& l = layers_.at(layer);
  return {params_.data() + l.bias_offset, l.rows};
}

Eigen::Map<Eigen::VectorXd> ParamField::bias(std::size_t layer) {
  const Layer& l = layers_.at(layer);
  return {params_.data() + l.bias_offset, l.rows};
}

Matrix ParamField::evaluate(const Matrix& inputs) const {
  if (inputs.rows() != arch_.input_dim) {
    throw ValidationError("ParamField::evaluate: expected " + std::to_string(arch_.input_dim) +
                          " input rows, got " + std::to_string(inputs.rows()));
  }
  Matrix a = inputs;
  for (std::size_t li = 0; li < layers_.size(); ++li) {
    const Layer& l = layers_[li];
    Matrix z = weight(li) * a;
    z.colwise() += bias(li);
    if (!l.activated) {
      a = std::move(z);
    } else if (l.residual) {
      a += apply_activation(arch_.activation, z);
    } else {
      a = apply_activation(arch_.activation, z);
    }
  }
  return a;
}

Var ParamField::activate(Tape& tape, Var z) const {
  switch (arch_.activation) {
    case Activation::kTanh:
      return tape.tanh(z);
    case Activation::kSoftplus:
      return tape.softplus(z);
    case Activation::kRelu:
      return tape.relu(z);
  }
  return z;
}

Var ParamField::activation_slope(Tape& tape, Var z, Var activated) const {
  switch (arch_.activation) {
    case Activation::kTanh: {
      const Matrix& v = tape.value(activated);
      Var one = tape.constant(Matrix::Ones(v.rows(), v.cols()));
      return tape.sub(one, tape.square(activated));
    }
    case Activation::kSoftplus:
      return tape.sigmoid(z);
    case Activation::kRelu:
      return tape.step(z);
  }
  return z;
}

FieldGraph ParamField::record(Tape& tape, const Matrix& inputs, bool input_requires_grad) const {
  if (inputs.rows() != arch_.input_dim) {
    throw ValidationError("ParamField::record: input has wrong number of rows");
  }
  FieldGraph g;
  g.input = tape.leaf(inputs, input_requires_grad);
  Var a = g.input;
  for (std::size_t li = 0; li < layers_.size(); ++li) {
    const Layer& l = layers_[li];
    Var w = tape.leaf(Matrix(weight(li)), true);
    Var b = tape.leaf(Matrix(bias(li)), true);
    g.weights.push_back(w);
    g.biases.push_back(b);
    Var z = tape.add_broadcast(tape.matmul(w, a), b);
    if (!l.activated) {
      a = z;
    } else if (l.residual) {
      a = tape.add(a, activate(tape, z));
    } else {
      a = activate(tape, z);
    }
  }
  g.output = a;
  return g;
}

TangentGraph ParamField::record_with_tangents(Tape& tape, const Matrix& inputs) const {
  if (inputs.rows() != arch_.input_dim) {
    throw ValidationError("ParamField::record_with_tangents: input has wrong number of rows");
  }
  TangentGraph tg;
  FieldGraph& g = tg.graph;
  const Eigen::Index batch = inputs.cols();
  g.input = tape.leaf(inputs, false);
  Var a = g.input;
  std::vector<Var> da;
  for (int k = 0; k < arch_.input_dim; ++k) {
    Matrix e = Matrix::Zero(arch_.input_dim, batch);
    e.row(k).setOnes();
    da.push_back(tape.constant(std::move(e)));
  }

  for (std::size_t li = 0; li < layers_.size(); ++li) {
    const Layer& l = layers_[li];
    Var w = tape.leaf(Matrix(weight(li)), true);
    Var b = tape.leaf(Matrix(bias(li)), true);
    g.weights.push_back(w);
    g.biases.push_back(b);
    Var z = tape.add_broadcast(tape.matmul(w, a), b);
    std::vector<Var> dz;
    dz.reserve(da.size());
    for (Var t : da) dz.push_back(tape.matmul(w, t));

    if (!l.activated) {
      a = z;
      da = std::move(dz);
      continue;
    }
    Var h = activate(tape, z);
    Var slope = activation_slope(tape, z, h);
    for (std::size_t k = 0; k < da.size(); ++k) {
      Var dh = tape.mul(slope, dz[k]);
      da[k] = l.residual ? tape.add(da[k], dh) : dh;
    }
    a = l.residual ? tape.add(a, h) : h;
  }
  g.output = a;
  tg.tangents = std::move(da);
  return tg;
}

Eigen::VectorXd ParamField::gather_param_grad(const Tape& tape, const FieldGraph& graph) const {
  if (graph.weights.size() != layers_.size()) {
    throw ValidationError("gather_param_grad: graph does not match this field");
  }
  Eigen::VectorXd out(params_.size());
  for (std::size_t li = 0; li < layers_.size(); ++li) {
    const Layer& l = layers_[li];
    const Matrix& gw = tape.grad(graph.weights[li]);
    const Matrix& gb = tape.grad(graph.biases[li]);
    Eigen::Map<Matrix>(out.data() + l.weight_offset, l.rows, l.cols) = gw;
    out.segment(static_cast<Eigen::Index>(l.bias_offset), l.rows) = gb.col(0);
  }
  return out;
}

void ParamField::project() {
  if (!lipschitz_cap_) return;
  const double cap = *lipschitz_cap_;
  for (std::size_t li = 0; li < layers_.size(); ++li) {
    auto w = weight(li);
    const double norm = w.norm();
    // Rescaling can land an ulp above the cap; the slack keeps projection idempotent.
    if (norm > cap * (1.0 + 1e-12)) w *= cap / norm;
  }
}

double ParamField::lipschitz_bound() const {
  // tanh, softplus and relu are all 1-Lipschitz.
  double bound = 1.0;
  for (std::size_t li = 0; li < layers_.size(); ++li) {
    const double norm = weight(li).norm();
    bound *= layers_[li].residual ? 1.0 + norm : norm;
  }
  return bound;
}

double ParamField::cap_bound() const {
  if (!lipschitz_cap_) return std::numeric_limits<double>::infinity();
  double bound = 1.0;
  for (const Layer& l : layers_) bound *= l.residual ? 1.0 + *lipschitz_cap_ : *lipschitz_cap_;
  return bound;
}

Eigen::VectorXd space_time_input(const Eigen::VectorXd& x, double t) {
  Eigen::VectorXd in(x.size() + 1);
  in.head(x.size()) = x;
  in[x.size()] = t;
  return in;
}

Matrix space_time_inputs(const Matrix& points, const Eigen::VectorXd& times) {
  if (times.size() != points.cols()) {
    throw ValidationError("space_time_inputs: one time per column required");
  }
  Matrix in(points.rows() + 1, points.cols());
  in.topRows(points.rows()) = points;
  in.row(points.rows()) = times.transpose();
  return in;
}

Matrix space_time_inputs(const Matrix& points, double t) {
  Matrix in(points.rows() + 1, points.cols());
  in.topRows(points.rows()) = points;
  in.row(points.rows()).setConstant(t);
  return in;
}

Eigen::VectorXd forward(const ParamField& field, const Eigen::VectorXd& x, double t) {
  require_finite(x, t);
  if (x.size() + 1 != field.input_dim()) {
    throw ValidationError("forward: point dimension does not match the field");
  }
  return field.evaluate(space_time_input(x, t)).col(0);
}

Eigen::VectorXd grad_params(const ParamField& field, Tape& tape, const FieldGraph& graph, Var loss) {
  if (!loss.attached() || loss.tape != &tape || graph.output.tape != &tape) {
    throw ValidationError("grad_params: loss is not recorded on the field's tape");
  }
  tape.backward(loss);
  return field.gather_param_grad(tape, graph);
}

Matrix grad_x(const ParamField& field, const Eigen::VectorXd& x, double t) {
  require_finite(x, t);
  if (x.size() + 1 != field.input_dim()) {
    throw ValidationError("grad_x: point dimension does not match the field");
  }
  const int out = field.output_dim();
  Matrix jac(out, x.size());
  Tape tape;
  FieldGraph g = field.record(tape, space_time_input(x, t), true);
  for (int k = 0; k < out; ++k) {
    Matrix seed = Matrix::Zero(out, 1);
    seed(k, 0) = 1.0;
    tape.backward(g.output, seed);
    jac.row(k) = tape.grad(g.input).col(0).head(x.size()).transpose();
  }
  return jac;
}

}  // namespace mpdc::nn
