#pragma once

// Toy training harness for fused models: plain SGD on router and expert
// weights of every MoE layer; attention, norms, embeddings and dense MLPs
// stay frozen.
//
// Task ("copy"): each step draws seq_len tokens uniformly from the
// vocabulary; the final residual state must reproduce the token's
// embedding rescaled to unit RMS. Task loss is the mean squared error over
// tokens and channels. Each MoE layer receives dL/dx_final as its output
// gradient (later layers are treated as identity on the residual path, since
// no backward pass runs through attention).

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "d2m/nanomodel.hpp"

namespace d2m::nano {

struct TrainOptions {
  std::uint32_t steps = 500;
  double lr = 0.5;
  double alpha = 1e-3;
  std::uint64_t seed = 0;
  std::uint32_t seq_len = 128;
};

struct TrainStep {
  std::uint32_t step = 0;
  double task_loss = 0.0;
  double lb_loss = 0.0;
  std::vector<double> loads;  // top-1 fractions, averaged over MoE layers
};

// Per-layer routing of the final training step.
struct LayerAssignments {
  LayerIndex layer = 0;
  std::uint32_t num_experts = 0;
  std::vector<std::uint32_t> top1;  // 0-based expert per token
};

struct TrainLog {
  std::uint32_t num_experts = 0;
  std::vector<TrainStep> steps;
  std::vector<LayerAssignments> final_routing;
};

// Mutates `model` in place. Throws InvalidArgument when the model has no MoE
// layer or MoE layers disagree on N, DivergenceDetected on a non-finite loss.
TrainLog train_toy(Model& model, const TrainOptions& options);

// CSV: step,task_loss,lb_loss,load_e1,...,load_eN (17 significant digits).
void write_train_log_csv(const TrainLog& log, std::ostream& out);

// CSV: layer,token,expert with 1-based layer and expert indices.
void write_routing_csv(const std::vector<LayerAssignments>& routing, std::ostream& out);

}  // namespace d2m::nano
