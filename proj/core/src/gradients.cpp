#include "d2m/gradients.hpp"

#include <algorithm>
#include <cmath>

#include "d2m/error.hpp"

namespace d2m::nano {

namespace {

double silu_grad(double v) {
  const double s = 1.0 / (1.0 + std::exp(-v));
  return s * (1.0 + v * (1.0 - s));
}

// Objective evaluated from a cached routing input h. Selection comes from
// `frozen` when given, otherwise from the current router.
MoeLoss loss_from_h(const MoELayer& layer, const Matrix& h, const Matrix& target, double alpha,
                    const RoutingRecord* frozen, const std::vector<double>* frozen_fractions) {
  RoutingRecord rec = route(layer.router, h, layer.config, layer.top_k);
  if (frozen) {
    for (std::size_t t = 0; t < rec.num_tokens(); ++t) {
      rec.selected[t] = frozen->selected[t];
      double mass = 0.0;
      for (std::size_t i = 0; i < rec.selected[t].size(); ++i) {
        rec.gates[t][i] = rec.probabilities(static_cast<Eigen::Index>(t), rec.selected[t][i]);
        mass += rec.gates[t][i];
      }
      if (layer.config.renormalize_top_k) {
        for (double& g : rec.gates[t]) g /= mass;
      }
    }
  }
  const Matrix u = rms_norm(h, layer.mlp_norm);
  Matrix y = h;
  for (std::size_t t = 0; t < rec.num_tokens(); ++t) {
    const Matrix ut = u.row(static_cast<Eigen::Index>(t));
    for (std::size_t i = 0; i < rec.selected[t].size(); ++i) {
      y.row(static_cast<Eigen::Index>(t)) +=
          rec.gates[t][i] * mlp_apply(layer.experts[rec.selected[t][i]], ut);
    }
  }
  MoeLoss loss;
  loss.task = (y - target).squaredNorm() / static_cast<double>(y.size());
  const std::vector<double> f = frozen_fractions ? *frozen_fractions : top1_fractions(rec);
  const RowVector P = rec.probabilities.colwise().mean();
  double dot = 0.0;
  for (std::uint32_t i = 0; i < rec.num_experts; ++i) dot += f[i] * P(i);
  loss.balance = alpha * static_cast<double>(rec.num_experts) * dot;
  return loss;
}

template <typename Fn>
void for_each_parameter_tensor(MoELayer& layer, MoeGradients& grads, Fn&& fn) {
  fn(std::string("router"), layer.router, grads.router);
  for (std::size_t j = 0; j < layer.experts.size(); ++j) {
    const std::string prefix = "expert." + std::to_string(j + 1) + ".";
    fn(prefix + "up", layer.experts[j].up, grads.experts[j].up);
    fn(prefix + "gate", layer.experts[j].gate, grads.experts[j].gate);
    fn(prefix + "down", layer.experts[j].down, grads.experts[j].down);
  }
}

}  // namespace

MoeLoss moe_layer_loss(const MoELayer& layer, const Matrix& x, const Matrix& target, double alpha,
                       const std::vector<double>* frozen_fractions) {
  const Matrix h = x + attention_apply(layer.attn, rms_norm(x, layer.attn_norm));
  return loss_from_h(layer, h, target, alpha, nullptr, frozen_fractions);
}

MoeGradients moe_layer_backward(const MoELayer& layer, const MoeForwardResult& fwd,
                                const Matrix& output_grad, double alpha) {
  const RoutingRecord& rec = fwd.routing;
  const std::uint32_t N = layer.num_experts();
  const auto T = static_cast<Eigen::Index>(rec.num_tokens());
  if (output_grad.rows() != T || output_grad.cols() != fwd.h.cols()) {
    fail(ErrorCode::DimensionMismatch, "output gradient must be T x d");
  }

  MoeGradients g;
  g.router = Matrix::Zero(layer.router.rows(), layer.router.cols());
  g.experts.reserve(N);
  for (const GluMlp& e : layer.experts) {
    g.experts.push_back(GluMlp{Matrix::Zero(e.up.rows(), e.up.cols()),
                               Matrix::Zero(e.gate.rows(), e.gate.cols()),
                               Matrix::Zero(e.down.rows(), e.down.cols())});
  }

  const Matrix u = rms_norm(fwd.h, layer.mlp_norm);
  Matrix dp = Matrix::Zero(T, N);

  // Expert branch, gathered per expert.
  std::vector<std::vector<std::pair<Eigen::Index, std::size_t>>> assigned(N);
  for (Eigen::Index t = 0; t < T; ++t) {
    for (std::size_t i = 0; i < rec.selected[t].size(); ++i) {
      assigned[rec.selected[t][i]].emplace_back(t, i);
    }
  }
  std::vector<std::vector<double>> dgate(T);
  for (Eigen::Index t = 0; t < T; ++t) dgate[t].assign(rec.selected[t].size(), 0.0);

  for (std::uint32_t j = 0; j < N; ++j) {
    const auto& rows = assigned[j];
    if (rows.empty()) continue;
    const GluMlp& e = layer.experts[j];
    const auto R = static_cast<Eigen::Index>(rows.size());
    Matrix ub(R, u.cols());
    Matrix dyb(R, u.cols());
    for (Eigen::Index r = 0; r < R; ++r) {
      ub.row(r) = u.row(rows[r].first);
      dyb.row(r) = output_grad.row(rows[r].first);
    }
    const Matrix a = ub * e.up;
    const Matrix b = ub * e.gate;
    const Matrix s = a.unaryExpr([](double v) { return silu(v); });
    const Matrix c = s.cwiseProduct(b);
    const Matrix m = c * e.down;

    Matrix dm(R, u.cols());
    for (Eigen::Index r = 0; r < R; ++r) {
      const auto [t, i] = rows[r];
      dgate[t][i] = dyb.row(r).dot(m.row(r));
      dm.row(r) = rec.gates[t][i] * dyb.row(r);
    }
    g.experts[j].down = c.transpose() * dm;
    const Matrix dc = dm * e.down.transpose();
    const Matrix db = dc.cwiseProduct(s);
    const Matrix da = dc.cwiseProduct(b).cwiseProduct(a.unaryExpr(&silu_grad));
    g.experts[j].up = ub.transpose() * da;
    g.experts[j].gate = ub.transpose() * db;
  }

  // Gates -> probabilities.
  for (Eigen::Index t = 0; t < T; ++t) {
    const auto& sel = rec.selected[t];
    if (layer.config.renormalize_top_k) {
      double mass = 0.0;
      double weighted = 0.0;
      for (std::size_t i = 0; i < sel.size(); ++i) {
        mass += rec.probabilities(t, sel[i]);
        weighted += dgate[t][i] * rec.gates[t][i];
      }
      for (std::size_t i = 0; i < sel.size(); ++i) {
        dp(t, sel[i]) += (dgate[t][i] - weighted) / mass;
      }
    } else {
      for (std::size_t i = 0; i < sel.size(); ++i) dp(t, sel[i]) += dgate[t][i];
    }
  }

  // Balance term: d/dp_ti of alpha*N*sum_i f_i * mean_t p_ti.
  if (alpha != 0.0) {
    const std::vector<double> f = top1_fractions(rec);
    const double coef = alpha * static_cast<double>(N) / static_cast<double>(T);
    for (std::uint32_t i = 0; i < N; ++i) dp.col(i).array() += coef * f[i];
  }

  // Softmax backward, then z = h W_r / tau.
  Matrix dz(T, N);
  for (Eigen::Index t = 0; t < T; ++t) {
    const auto p = rec.probabilities.row(t);
    const double inner = p.dot(dp.row(t));
    dz.row(t) = p.cwiseProduct((dp.row(t).array() - inner).matrix());
  }
  g.router = fwd.h.transpose() * dz / layer.config.temperature;
  return g;
}

MoeLossAndGradients moe_layer_gradients(const MoELayer& layer, const Matrix& x,
                                        const Matrix& target, double alpha) {
  MoeLossAndGradients out;
  out.forward = moe_forward(layer, x);
  const Matrix& y = out.forward.y;
  if (target.rows() != y.rows() || target.cols() != y.cols()) {
    fail(ErrorCode::DimensionMismatch, "target must be T x d");
  }
  out.loss.task = (y - target).squaredNorm() / static_cast<double>(y.size());
  const std::span<const RoutingRecord> recs(&out.forward.routing, 1);
  out.loss.balance = load_balance_loss(recs, alpha);
  const Matrix dy = 2.0 * (y - target) / static_cast<double>(y.size());
  out.grads = moe_layer_backward(layer, out.forward, dy, alpha);
  return out;
}

GradCheckReport grad_check(const MoELayer& layer, const Matrix& x, double step) {
  if (!(step >= 1e-7 && step <= 1e-4)) {
    fail(ErrorCode::InvalidArgument, "grad_check step must lie in [1e-7, 1e-4]");
  }
  const double alpha = layer.config.aux_loss_weight;
  const Matrix target = Matrix::Zero(x.rows(), x.cols());
  MoeLossAndGradients analytic = moe_layer_gradients(layer, x, target, alpha);
  const RoutingRecord frozen = analytic.forward.routing;
  const std::vector<double> f = top1_fractions(frozen);
  const Matrix h = analytic.forward.h;

  MoELayer probe = layer;
  GradCheckReport report;
  for_each_parameter_tensor(probe, analytic.grads, [&](const std::string& name, Matrix& param,
                                                       const Matrix& grad) {
    if (!grad.allFinite()) fail(ErrorCode::NonFiniteGradient, name);
    TensorCheck check;
    check.name = name;
    double max_numeric = 0.0;
    for (Eigen::Index i = 0; i < param.size(); ++i) {
      const double saved = param.data()[i];
      param.data()[i] = saved + step;
      const double up = loss_from_h(probe, h, target, alpha, &frozen, &f).total();
      param.data()[i] = saved - step;
      const double down = loss_from_h(probe, h, target, alpha, &frozen, &f).total();
      param.data()[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      if (!std::isfinite(numeric)) fail(ErrorCode::NonFiniteGradient, name + " (numeric)");
      check.max_abs_error = std::max(check.max_abs_error, std::abs(numeric - grad.data()[i]));
      max_numeric = std::max(max_numeric, std::abs(numeric));
      check.max_abs_gradient = std::max(check.max_abs_gradient, std::abs(grad.data()[i]));
    }
    const double scale = std::max(max_numeric, check.max_abs_gradient);
    check.relative_error = scale > 0.0 ? check.max_abs_error / scale : check.max_abs_error;
    report.max_relative_error = std::max(report.max_relative_error, check.relative_error);
    report.tensors.push_back(std::move(check));
  });
  return report;
}

}  // namespace d2m::nano
