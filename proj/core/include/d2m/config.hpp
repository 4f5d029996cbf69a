#pragma once

// Shared domain types: model dimensions, hardware and workload profiles,
// search thresholds, router settings and the fusion plan produced by the
// redundancy search. Layer indices are 1-based everywhere, including files.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace d2m {

using LayerIndex = std::uint32_t;

struct MoEShape {
  std::uint32_t num_experts = 1;           // N
  std::uint32_t top_k = 1;                 // k
  std::uint32_t base_copies = 1;           // K
  std::uint32_t supplementary_copies = 1;  // M

  friend bool operator==(const MoEShape&, const MoEShape&) = default;
};

struct ModelShape {
  std::uint32_t num_layers = 0;    // L
  std::uint32_t hidden_dim = 0;    // d
  std::uint32_t mlp_dim = 0;       // d_mid
  std::uint32_t num_heads = 0;     // n_h
  std::uint32_t num_kv_heads = 0;  // n_kv
  std::uint32_t head_dim = 0;      // d_h
  std::uint32_t vocab_size = 0;    // V
  bool tied_embedding = true;
  std::optional<MoEShape> moe;
  // Per-layer expert counts for heterogeneous (fused) models; 0 marks a dense
  // layer. Empty means "every layer is MoE with moe->num_experts" when moe is
  // set, and "every layer dense" otherwise.
  std::vector<std::uint32_t> layer_experts;

  // Number of experts in layer `layer` (1-based); 0 for a dense MLP layer.
  [[nodiscard]] std::uint32_t experts_in_layer(LayerIndex layer) const;
  [[nodiscard]] bool is_moe() const noexcept { return moe.has_value(); }

  friend bool operator==(const ModelShape&, const ModelShape&) = default;
};

struct HardwareProfile {
  double peak_flops = 0.0;     // pi_H, FLOP/s
  double mem_bandwidth = 0.0;  // beta_H, bytes/s
  double weight_bytes = 2.0;   // b_w
  double kv_bytes = 2.0;       // b_kv

  friend bool operator==(const HardwareProfile&, const HardwareProfile&) = default;
};

struct Workload {
  std::uint32_t batch = 1;
  std::uint32_t prompt_len = 1000;  // S_in
  std::uint32_t gen_len = 50;       // S_out

  friend bool operator==(const Workload&, const Workload&) = default;
};

struct SearchThresholds {
  double cos_threshold = 0.05;   // delta
  double norm_tolerance = 0.1;   // epsilon
  double score_penalty = 1.0;    // lambda
  std::vector<std::uint32_t> block_sizes{1, 2, 3};

  friend bool operator==(const SearchThresholds&, const SearchThresholds&) = default;
};

struct RouterConfig {
  double temperature = 1.0;
  double aux_loss_weight = 1e-3;
  bool renormalize_top_k = false;

  friend bool operator==(const RouterConfig&, const RouterConfig&) = default;
};

struct FusedBlock {
  LayerIndex base = 0;
  std::vector<LayerIndex> redundant;  // base+1 .. base+n, ascending

  friend bool operator==(const FusedBlock&, const FusedBlock&) = default;
};

struct FusionPlan {
  std::uint32_t num_layers = 0;
  std::vector<LayerIndex> keep;   // ascending
  std::vector<LayerIndex> prune;  // ascending
  std::vector<FusedBlock> blocks; // acceptance order

  friend bool operator==(const FusionPlan&, const FusionPlan&) = default;
};

struct RunConfig {
  ModelShape model;
  HardwareProfile hardware;
  Workload workload;
  SearchThresholds thresholds;
  RouterConfig router;
};

// Validation. Each returns its argument unchanged or throws d2m::Error.
const ModelShape& validate_shape(const ModelShape& shape);
const HardwareProfile& validate_hardware(const HardwareProfile& hw);
const Workload& validate_workload(const Workload& wl);
const SearchThresholds& validate_thresholds(const SearchThresholds& th);
const RouterConfig& validate_router(const RouterConfig& rc);
// Checks coverage, disjointness and contiguity in O(L).
const FusionPlan& validate_plan(const FusionPlan& plan);

[[nodiscard]] std::uint32_t gqa_ratio(const ModelShape& shape);

// Qwen2.5-0.5B decoder dimensions (dense, tied embedding).
[[nodiscard]] ModelShape qwen25_05b_shape();
// Jetson Thor-U limits: 350 TFLOPS FP16, 273 GB/s.
[[nodiscard]] HardwareProfile thor_u_profile();

// Builds a plan from a block list, deriving keep/prune sets; validates.
[[nodiscard]] FusionPlan make_plan(std::uint32_t num_layers, std::vector<FusedBlock> blocks);

void to_json(nlohmann::json& j, const MoEShape& v);
void from_json(const nlohmann::json& j, MoEShape& v);
void to_json(nlohmann::json& j, const ModelShape& v);
void from_json(const nlohmann::json& j, ModelShape& v);
void to_json(nlohmann::json& j, const HardwareProfile& v);
void from_json(const nlohmann::json& j, HardwareProfile& v);
void to_json(nlohmann::json& j, const Workload& v);
void from_json(const nlohmann::json& j, Workload& v);
void to_json(nlohmann::json& j, const SearchThresholds& v);
void from_json(const nlohmann::json& j, SearchThresholds& v);
void to_json(nlohmann::json& j, const RouterConfig& v);
void from_json(const nlohmann::json& j, RouterConfig& v);
void to_json(nlohmann::json& j, const FusionPlan& v);
void from_json(const nlohmann::json& j, FusionPlan& v);

// Parses the run configuration document. Unknown keys at any level are
// rejected with ErrorCode::InvalidConfig; `model` is required, the other
// sections fall back to defaults.
[[nodiscard]] RunConfig parse_run_config(const nlohmann::json& doc);
[[nodiscard]] RunConfig load_run_config(const std::string& path);
[[nodiscard]] nlohmann::json run_config_to_json(const RunConfig& cfg);

}  // namespace d2m
