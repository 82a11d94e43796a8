#include "mpdc/field.hpp"

#include <string>

#include "mpdc/errors.hpp"

namespace mpdc {

Matrix VectorField::eval_at(const Matrix& points, std::span<const double> times) const {
  if (static_cast<Eigen::Index>(times.size()) != points.cols()) {
    throw ValidationError("eval_at: one time per column required");
  }
  Matrix out(dim(), points.cols());
  for (Eigen::Index i = 0; i < points.cols(); ++i) {
    out.col(i) = eval(points.col(i), times[static_cast<std::size_t>(i)]).col(0);
  }
  return out;
}

Matrix ScaledIdentityField::eval(const Matrix& points, double t) const {
  return coefficient_(t) * points;
}

Matrix ScaledIdentityField::vjp(const Matrix& /*points*/, double t, const Matrix& cotangent,
                                Vector* /*param_grad*/) const {
  return coefficient_(t) * cotangent;
}

Matrix LinearParamField::eval(const Matrix& points, double /*t*/) const { return theta_ * points; }

Matrix LinearParamField::vjp(const Matrix& points, double /*t*/, const Matrix& cotangent,
                             Vector* param_grad) const {
  if (param_grad != nullptr) {
    if (param_grad->size() != 1) throw ValidationError("LinearParamField: gradient must have size 1");
    (*param_grad)[0] += cotangent.cwiseProduct(points).sum();
  }
  return theta_ * cotangent;
}

Matrix FunctionField::eval(const Matrix& points, double t) const {
  Matrix out(dim_, points.cols());
  for (Eigen::Index i = 0; i < points.cols(); ++i) out.col(i) = value_(points.col(i), t);
  return out;
}

Matrix FunctionField::vjp(const Matrix& points, double t, const Matrix& cotangent,
                          Vector* /*param_grad*/) const {
  Matrix out(dim_, points.cols());
  for (Eigen::Index i = 0; i < points.cols(); ++i) {
    out.col(i) = vjp_(points.col(i), t, cotangent.col(i));
  }
  return out;
}

ControlField::ControlField(nn::ParamField net, std::shared_ptr<const VectorField> base)
    : net_(std::move(net)), base_(std::move(base)) {
  if (net_.input_dim() != net_.output_dim() + 1) {
    throw ValidationError("ControlField: network must map R^{d+1} to R^d");
  }
  if (base_ && base_->dim() != net_.output_dim()) {
    throw ValidationError("ControlField: base field dimension differs from the network");
  }
}

Matrix ControlField::eval(const Matrix& points, double t) const {
  Matrix out = net_.evaluate(nn::space_time_inputs(points, t));
  if (base_) out += base_->eval(points, t);
  return out;
}

Matrix ControlField::eval_at(const Matrix& points, std::span<const double> times) const {
  Vector tv = Eigen::Map<const Vector>(times.data(), static_cast<Eigen::Index>(times.size()));
  Matrix out = net_.evaluate(nn::space_time_inputs(points, tv));
  if (base_) out += base_->eval_at(points, times);
  return out;
}

Matrix ControlField::vjp(const Matrix& points, double t, const Matrix& cotangent,
                         Vector* param_grad) const {
  nn::Tape tape;
  nn::FieldGraph g = net_.record(tape, nn::space_time_inputs(points, t), true);
  tape.backward(g.output, cotangent);
  Matrix x_bar = tape.grad(g.input).topRows(points.rows());
  if (param_grad != nullptr) {
    if (param_grad->size() != static_cast<Eigen::Index>(net_.num_params())) {
      throw ValidationError("ControlField::vjp: gradient buffer has wrong size");
    }
    *param_grad += net_.gather_param_grad(tape, g);
  }
  if (base_) x_bar += base_->vjp(points, t, cotangent, nullptr);
  return x_bar;
}

std::shared_ptr<const VectorField> zero_field(int dim) {
  return std::make_shared<ScaledIdentityField>(dim, [](double) { return 0.0; });
}

ControlField make_control(int dim, const nn::FieldArchitecture& hidden, std::uint64_t seed,
                          bool zero_output, std::shared_ptr<const VectorField> base) {
  nn::FieldArchitecture arch = hidden;
  arch.input_dim = dim + 1;
  arch.output_dim = dim;
  nn::FieldInit init;
  init.zero_output = zero_output;
  return ControlField(nn::ParamField(arch, seed, init), std::move(base));
}

}  // namespace mpdc
