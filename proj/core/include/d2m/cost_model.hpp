#pragma once

// First-principles Roofline latency for decoder layers and static parameter
// memory.
//
//   r       = k * d_mid / d                      (k = 1 for dense layers)
//   xi_F    = 4 + 4/gqa + 6r
//   xi_W    = 2 + 2/gqa + 3r
//   S_bar   = S_in + (S_out + 1)/2
//   T_pre   = L * S_in * d^2 * xi_F / pi_H
//   T_dec   = L * S_out * (xi_W * d^2 * b_w + 2 * S_bar * d * b_kv / gqa) / beta_H
//
// Static memory counts weights only:
//   M = V d + sum_layers((n_h + 2 n_kv) d_h d + d^2 + 2 d_h + 2 d
//                        + N d + 3 N d d_mid) + d
// with the router term dropped and N = 1 for dense layers.

#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "d2m/config.hpp"

namespace d2m::cost {

enum class Boundedness { ComputeBound, MemoryBound };

[[nodiscard]] std::string_view to_string(Boundedness b) noexcept;

struct LatencyBreakdown {
  double prefill_s = 0.0;
  double decode_s = 0.0;
  double total_s = 0.0;
  Boundedness prefill_bound = Boundedness::ComputeBound;
  Boundedness decode_bound = Boundedness::MemoryBound;
};

struct MemoryFootprint {
  std::uint64_t parameters = 0;
  double bytes = 0.0;
  [[nodiscard]] double gigabytes() const { return bytes / 1e9; }
};

[[nodiscard]] double expansion_ratio(const ModelShape& shape);
[[nodiscard]] double compute_coefficient(const ModelShape& shape);
[[nodiscard]] double decode_traffic_coefficient(const ModelShape& shape);
[[nodiscard]] double mean_context_length(const Workload& wl);

// Workloads with S_in = 0 or S_out = 0 give zero for that phase.
[[nodiscard]] double prefill_latency(const ModelShape& shape, const HardwareProfile& hw,
                                     const Workload& wl);
[[nodiscard]] double decode_latency(const ModelShape& shape, const HardwareProfile& hw,
                                    const Workload& wl);
[[nodiscard]] LatencyBreakdown total_latency(const ModelShape& shape, const HardwareProfile& hw,
                                             const Workload& wl);

// Untied models add a second V x d block for the LM head.
[[nodiscard]] MemoryFootprint static_memory(const ModelShape& shape, double bytes_per_param = 2.0);
// Same accounting with k experts per MoE layer instead of N (router kept).
[[nodiscard]] std::uint64_t active_params(const ModelShape& shape);

struct Evaluation {
  std::string config_id;
  ModelShape shape;
  LatencyBreakdown latency;
  MemoryFootprint memory;
  std::uint64_t params_active = 0;
};

[[nodiscard]] Evaluation evaluate(const std::string& config_id, const ModelShape& shape,
                                  const HardwareProfile& hw, const Workload& wl);

// {config_id, L, N, k, prefill_s, decode_s, total_s, params_total,
//  params_active, bytes}
[[nodiscard]] nlohmann::json to_json(const Evaluation& e);

}  // namespace d2m::cost
