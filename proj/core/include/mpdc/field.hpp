#pragma once

#include <functional>
#include <memory>
#include <span>

#include <Eigen/Dense>

#include "mpdc/nn/param_field.hpp"

namespace mpdc {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// A time-dependent vector field u(x, t) on R^d evaluated over batches.
/// Batches are d x N with one column per point.
class VectorField {
 public:
  virtual ~VectorField() = default;

  virtual int dim() const = 0;
  virtual Matrix eval(const Matrix& points, double t) const = 0;
  /// Per-column times. The default evaluates column by column.
  virtual Matrix eval_at(const Matrix& points, std::span<const double> times) const;

  /// Vector-Jacobian product at (points, t): returns J_x^T cotangent per
  /// column and, when `param_grad` is non-null, adds J_params^T cotangent
  /// summed over columns.
  virtual Matrix vjp(const Matrix& points, double t, const Matrix& cotangent,
                     Vector* param_grad) const = 0;

  virtual std::size_t num_params() const { return 0; }
};

/// u(x, t) = c(t) x.
class ScaledIdentityField final : public VectorField {
 public:
  ScaledIdentityField(int dim, std::function<double(double)> coefficient)
      : dim_(dim), coefficient_(std::move(coefficient)) {}

  int dim() const override { return dim_; }
  Matrix eval(const Matrix& points, double t) const override;
  Matrix vjp(const Matrix& points, double t, const Matrix& cotangent,
             Vector* param_grad) const override;

 private:
  int dim_;
  std::function<double(double)> coefficient_;
};

/// u(x, t) = theta x with theta a single trainable parameter.
class LinearParamField final : public VectorField {
 public:
  LinearParamField(int dim, double theta) : dim_(dim), theta_(theta) {}

  int dim() const override { return dim_; }
  double theta() const { return theta_; }
  void set_theta(double theta) { theta_ = theta; }
  Matrix eval(const Matrix& points, double t) const override;
  Matrix vjp(const Matrix& points, double t, const Matrix& cotangent,
             Vector* param_grad) const override;
  std::size_t num_params() const override { return 1; }

 private:
  int dim_;
  double theta_;
};

/// Field given by callables: value and the transposed Jacobian applied to a
/// cotangent, both for a single point.
class FunctionField final : public VectorField {
 public:
  using ValueFn = std::function<Vector(const Vector& x, double t)>;
  using VjpFn = std::function<Vector(const Vector& x, double t, const Vector& cotangent)>;

  FunctionField(int dim, ValueFn value, VjpFn vjp)
      : dim_(dim), value_(std::move(value)), vjp_(std::move(vjp)) {}

  int dim() const override { return dim_; }
  Matrix eval(const Matrix& points, double t) const override;
  Matrix vjp(const Matrix& points, double t, const Matrix& cotangent,
             Vector* param_grad) const override;

 private:
  int dim_;
  ValueFn value_;
  VjpFn vjp_;
};

/// The trainable control: a network on (x, t) plus an optional fixed analytic
/// base field, u = base + net. Copies are independent parameter snapshots; the
/// base is shared and immutable.
class ControlField final : public VectorField {
 public:
  ControlField() = default;
  explicit ControlField(nn::ParamField net, std::shared_ptr<const VectorField> base = nullptr);

  int dim() const override { return net_.output_dim(); }
  Matrix eval(const Matrix& points, double t) const override;
  Matrix eval_at(const Matrix& points, std::span<const double> times) const override;
  Matrix vjp(const Matrix& points, double t, const Matrix& cotangent,
             Vector* param_grad) const override;
  std::size_t num_params() const override { return net_.num_params(); }

  const nn::ParamField& net() const { return net_; }
  nn::ParamField& net() { return net_; }
  const Vector& params() const { return net_.params(); }
  void set_params(const Vector& p) { net_.set_params(p); }
  const std::shared_ptr<const VectorField>& base() const { return base_; }

 private:
  nn::ParamField net_;
  std::shared_ptr<const VectorField> base_;
};

std::shared_ptr<const VectorField> zero_field(int dim);

/// A control network on R^d x [0, T] with output R^d.
ControlField make_control(int dim, const nn::FieldArchitecture& hidden, std::uint64_t seed,
                          bool zero_output, std::shared_ptr<const VectorField> base = nullptr);

}  // namespace mpdc
