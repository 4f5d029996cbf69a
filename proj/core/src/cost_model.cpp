#include "d2m/cost_model.hpp"

#include "d2m/error.hpp"

namespace d2m::cost {

namespace {

double active_experts(const ModelShape& shape) {
  return shape.moe ? static_cast<double>(shape.moe->top_k) : 1.0;
}

double gqa(const ModelShape& shape) { return static_cast<double>(gqa_ratio(shape)); }

struct LayerCounts {
  std::uint64_t total = 0;
  std::uint64_t active = 0;
};

LayerCounts layer_parameters(const ModelShape& s, std::uint32_t experts) {
  const std::uint64_t d = s.hidden_dim;
  const std::uint64_t attention =
      (static_cast<std::uint64_t>(s.num_heads) + 2ull * s.num_kv_heads) * s.head_dim * d + d * d;
  const std::uint64_t fixed = attention + 2ull * s.head_dim + 2ull * d;
  const std::uint64_t mlp = 3ull * d * s.mlp_dim;
  if (experts == 0) return {fixed + mlp, fixed + mlp};
  const std::uint64_t k = s.moe->top_k;
  return {fixed + experts * d + experts * mlp, fixed + experts * d + k * mlp};
}

LayerCounts model_parameters(const ModelShape& shape) {
  validate_shape(shape);
  const std::uint64_t embed = static_cast<std::uint64_t>(shape.vocab_size) * shape.hidden_dim;
  LayerCounts counts;
  counts.total = counts.active = embed * (shape.tied_embedding ? 1 : 2) + shape.hidden_dim;
  for (LayerIndex l = 1; l <= shape.num_layers; ++l) {
    const LayerCounts c = layer_parameters(shape, shape.experts_in_layer(l));
    counts.total += c.total;
    counts.active += c.active;
  }
  return counts;
}

}  // namespace

std::string_view to_string(Boundedness b) noexcept {
  return b == Boundedness::ComputeBound ? "compute-bound" : "memory-bound";
}

double expansion_ratio(const ModelShape& shape) {
  validate_shape(shape);
  return active_experts(shape) * static_cast<double>(shape.mlp_dim) /
         static_cast<double>(shape.hidden_dim);
}

double compute_coefficient(const ModelShape& shape) {
  return 4.0 + 4.0 / gqa(shape) + 6.0 * expansion_ratio(shape);
}

double decode_traffic_coefficient(const ModelShape& shape) {
  return 2.0 + 2.0 / gqa(shape) + 3.0 * expansion_ratio(shape);
}

double mean_context_length(const Workload& wl) {
  return static_cast<double>(wl.prompt_len) + (static_cast<double>(wl.gen_len) + 1.0) / 2.0;
}

double prefill_latency(const ModelShape& shape, const HardwareProfile& hw, const Workload& wl) {
  validate_hardware(hw);
  const double d = shape.hidden_dim;
  return static_cast<double>(shape.num_layers) * static_cast<double>(wl.prompt_len) * d * d *
         compute_coefficient(shape) / hw.peak_flops;
}

double decode_latency(const ModelShape& shape, const HardwareProfile& hw, const Workload& wl) {
  validate_hardware(hw);
  const double d = shape.hidden_dim;
  const double weights = decode_traffic_coefficient(shape) * d * d * hw.weight_bytes;
  const double kv = 2.0 * mean_context_length(wl) * d * hw.kv_bytes / gqa(shape);
  return static_cast<double>(shape.num_layers) * static_cast<double>(wl.gen_len) *
         (weights + kv) / hw.mem_bandwidth;
}

LatencyBreakdown total_latency(const ModelShape& shape, const HardwareProfile& hw,
                               const Workload& wl) {
  LatencyBreakdown b;
  b.prefill_s = prefill_latency(shape, hw, wl);
  b.decode_s = decode_latency(shape, hw, wl);
  b.total_s = b.prefill_s + b.decode_s;
  return b;
}

MemoryFootprint static_memory(const ModelShape& shape, double bytes_per_param) {
  MemoryFootprint m;
  m.parameters = model_parameters(shape).total;
  m.bytes = static_cast<double>(m.parameters) * bytes_per_param;
  return m;
}

std::uint64_t active_params(const ModelShape& shape) { return model_parameters(shape).active; }

Evaluation evaluate(const std::string& config_id, const ModelShape& shape,
                    const HardwareProfile& hw, const Workload& wl) {
  Evaluation e;
  e.config_id = config_id;
  e.shape = shape;
  e.latency = total_latency(shape, hw, wl);
  e.memory = static_memory(shape, hw.weight_bytes);
  e.params_active = active_params(shape);
  return e;
}

nlohmann::json to_json(const Evaluation& e) {
  return nlohmann::json{
      {"config_id", e.config_id},
      {"L", e.shape.num_layers},
      {"N", e.shape.moe ? e.shape.moe->num_experts : 1u},
      {"k", e.shape.moe ? e.shape.moe->top_k : 1u},
      {"prefill_s", e.latency.prefill_s},
      {"decode_s", e.latency.decode_s},
      {"total_s", e.latency.total_s},
      {"params_total", e.memory.parameters},
      {"params_active", e.params_active},
      {"bytes", e.memory.bytes},
  };
}

}  // namespace d2m::cost
