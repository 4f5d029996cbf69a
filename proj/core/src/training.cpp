#include "d2m/training.hpp"

#include <cmath>
#include <iomanip>
#include <ostream>
#include <random>

#include "d2m/error.hpp"
#include "d2m/gradients.hpp"

namespace d2m::nano {

namespace {

void sgd(Matrix& param, const Matrix& grad, double lr) { param.noalias() -= lr * grad; }

}  // namespace

TrainLog train_toy(Model& model, const TrainOptions& options) {
  std::vector<std::size_t> moe_layers;
  std::uint32_t N = 0;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    if (const auto* m = std::get_if<MoELayer>(&model.layers[i])) {
      if (N != 0 && m->num_experts() != N) {
        fail(ErrorCode::InvalidArgument, "MoE layers disagree on the expert count");
      }
      N = m->num_experts();
      moe_layers.push_back(i);
    }
  }
  if (moe_layers.empty()) fail(ErrorCode::InvalidArgument, "model has no MoE layer to train");
  if (options.seq_len == 0) fail(ErrorCode::InvalidArgument, "seq_len must be positive");
  if (!std::isfinite(options.lr) || !std::isfinite(options.alpha) || options.alpha < 0.0) {
    fail(ErrorCode::InvalidArgument, "lr must be finite and alpha finite, non-negative");
  }

  // One fixed token stream for the whole run (full-batch descent).
  std::mt19937_64 rng(options.seed);
  std::uniform_int_distribution<std::uint32_t> pick(0, model.shape.vocab_size - 1);
  std::vector<std::uint32_t> tokens(options.seq_len);
  for (auto& t : tokens) t = pick(rng);
  const Matrix input = embed_tokens(model, tokens);
  Matrix target(input.rows(), input.cols());
  for (Eigen::Index t = 0; t < input.rows(); ++t) {
    const double rms =
        std::sqrt(input.row(t).squaredNorm() / static_cast<double>(input.cols()) + kNormEps);
    target.row(t) = input.row(t) / rms;
  }

  TrainLog log;
  log.num_experts = N;
  log.steps.reserve(options.steps);
  std::vector<MoeForwardResult> cache(model.layers.size());
  for (std::uint32_t step = 1; step <= options.steps; ++step) {
    Matrix x = input;
    std::vector<RoutingRecord> records;
    try {
      for (std::size_t i = 0; i < model.layers.size(); ++i) {
        if (const auto* dense = std::get_if<DenseLayer>(&model.layers[i])) {
          x = dense_layer_forward(*dense, x);
        } else {
          cache[i] = moe_forward(std::get<MoELayer>(model.layers[i]), x);
          x = cache[i].y;
          records.push_back(cache[i].routing);
        }
      }
    } catch (const Error& e) {
      if (e.code() != ErrorCode::NonFiniteActivation) throw;
      fail(ErrorCode::DivergenceDetected, "step " + std::to_string(step) + ": " + e.what());
    }
    const Matrix residual = x - target;
    TrainStep entry;
    entry.step = step;
    entry.task_loss = residual.squaredNorm() / static_cast<double>(residual.size());
    entry.lb_loss = load_balance_loss(records, options.alpha);
    if (!std::isfinite(entry.task_loss) || !std::isfinite(entry.lb_loss)) {
      fail(ErrorCode::DivergenceDetected, "non-finite loss at step " + std::to_string(step));
    }
    entry.loads.assign(N, 0.0);
    for (const RoutingRecord& rec : records) {
      const std::vector<double> f = top1_fractions(rec);
      for (std::uint32_t j = 0; j < N; ++j) entry.loads[j] += f[j] / records.size();
    }
    log.steps.push_back(std::move(entry));

    if (step == options.steps) {
      for (std::size_t i : moe_layers) {
        LayerAssignments a;
        a.layer = static_cast<LayerIndex>(i + 1);
        a.num_experts = N;
        for (std::size_t t = 0; t < cache[i].routing.num_tokens(); ++t) {
          a.top1.push_back(cache[i].routing.top1(t));
        }
        log.final_routing.push_back(std::move(a));
      }
    }

    if (options.lr == 0.0) continue;
    const Matrix dx = 2.0 * residual / static_cast<double>(residual.size());
    for (std::size_t i : moe_layers) {
      auto& layer = std::get<MoELayer>(model.layers[i]);
      const MoeGradients g = moe_layer_backward(layer, cache[i], dx, options.alpha);
      sgd(layer.router, g.router, options.lr);
      for (std::uint32_t j = 0; j < N; ++j) {
        sgd(layer.experts[j].up, g.experts[j].up, options.lr);
        sgd(layer.experts[j].gate, g.experts[j].gate, options.lr);
        sgd(layer.experts[j].down, g.experts[j].down, options.lr);
      }
    }
  }
  return log;
}

void write_train_log_csv(const TrainLog& log, std::ostream& out) {
  out << "step,task_loss,lb_loss";
  for (std::uint32_t j = 1; j <= log.num_experts; ++j) out << ",load_e" << j;
  out << '\n';
  out << std::setprecision(17);
  for (const TrainStep& s : log.steps) {
    out << s.step << ',' << s.task_loss << ',' << s.lb_loss;
    for (double v : s.loads) out << ',' << v;
    out << '\n';
  }
}

void write_routing_csv(const std::vector<LayerAssignments>& routing, std::ostream& out) {
  out << "layer,token,expert\n";
  for (const LayerAssignments& a : routing) {
    for (std::size_t t = 0; t < a.top1.size(); ++t) {
      out << a.layer << ',' << t << ',' << (a.top1[t] + 1) << '\n';
    }
  }
}

}  // namespace d2m::nano
