#pragma once

// Analytic gradients of a single MoE layer with respect to its router and
// expert weights, plus a central-difference checker.
//
// Layer objective:  mean_{t,c} (y_tc - target_tc)^2 + alpha * N * sum_i f_i P_i
//
// f_i (top-1 counts) is a stop-gradient quantity and the top-k selection is
// treated as fixed under infinitesimal perturbation. Attention sits upstream
// of every trained parameter, so no gradient flows through it.

#include <optional>
#include <string>
#include <vector>

#include "d2m/nanomodel.hpp"

namespace d2m::nano {

struct MoeGradients {
  Matrix router;                // d x N
  std::vector<GluMlp> experts;  // same shapes as the layer's experts
};

struct MoeLoss {
  double task = 0.0;
  double balance = 0.0;
  [[nodiscard]] double total() const { return task + balance; }
};

// Evaluates the objective. `frozen_fractions` pins f_i (used by finite
// differences); when absent f_i comes from the current routing.
[[nodiscard]] MoeLoss moe_layer_loss(const MoELayer& layer, const Matrix& x, const Matrix& target,
                                     double alpha,
                                     const std::vector<double>* frozen_fractions = nullptr);

// Backward pass for an arbitrary upstream gradient dL/dy (T x d) plus the
// balance term with weight alpha. Uses a forward result computed on the same
// layer and input.
[[nodiscard]] MoeGradients moe_layer_backward(const MoELayer& layer, const MoeForwardResult& fwd,
                                              const Matrix& output_grad, double alpha);

// Convenience: forward + backward for the mean-squared objective.
struct MoeLossAndGradients {
  MoeLoss loss;
  MoeGradients grads;
  MoeForwardResult forward;
};
[[nodiscard]] MoeLossAndGradients moe_layer_gradients(const MoELayer& layer, const Matrix& x,
                                                      const Matrix& target, double alpha);

struct TensorCheck {
  std::string name;
  double max_abs_error = 0.0;
  double max_abs_gradient = 0.0;
  double relative_error = 0.0;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::vector<TensorCheck> tensors;
};

// Compares analytic gradients of (mean-squared output + balance loss, with
// alpha = layer.config.aux_loss_weight and a zero target) against central
// differences. A tensor's relative error is max|analytic - numeric| divided
// by max(max|numeric|, max|analytic|), or the absolute error when both
// vanish. Step must lie in [1e-7, 1e-4]. Throws NonFiniteGradient.
[[nodiscard]] GradCheckReport grad_check(const MoELayer& layer, const Matrix& x, double step);

}  // namespace d2m::nano
