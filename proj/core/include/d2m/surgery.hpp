#pragma once

// Layer-Fusion Upcycling: every block (base l*, redundant l*+1..l*+n*) of a
// fusion plan collapses into one MoE layer at the base position. The base
// layer keeps its attention, input norm and MLP norm; its expert pool holds
// K copies of the base MLP followed by M copies of each redundant layer's
// MLP (N = K + n* M). Redundant layers' attention and norms are dropped and
// routers start at zero.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "d2m/config.hpp"
#include "d2m/linalg.hpp"
#include "d2m/nanomodel.hpp"
#include "d2m/weights.hpp"

namespace d2m {

using nano::ExpertSource;

// Fused-layer index (1-based, post-fusion numbering) -> expert sources.
using ExpertProvenance = std::map<LayerIndex, std::vector<ExpertSource>>;

struct FusionOptions {
  std::uint32_t base_copies = 1;           // K
  std::uint32_t supplementary_copies = 1;  // M
  std::uint32_t top_k = 1;                 // k
  std::uint64_t router_init_seed = 0;      // unused: routers are zero-initialized
};

struct FusedModel {
  WeightContainer weights;
  ExpertProvenance provenance;
};

// Throws PlanModelMismatch when the plan does not describe a dense model with
// the same depth, MissingTensor when the input lacks a tensor.
[[nodiscard]] FusedModel fuse(const WeightContainer& dense, const FusionPlan& plan,
                              const FusionOptions& options);

// Original layer index of each fused layer, in order (== plan.keep).
[[nodiscard]] std::vector<LayerIndex> fused_layer_sources(const FusionPlan& plan);

struct VerificationCheck {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct VerificationReport {
  std::vector<VerificationCheck> checks;
  [[nodiscard]] bool passed() const;
  [[nodiscard]] const VerificationCheck* first_failure() const;
};

// Runs every check and reports each one.
[[nodiscard]] VerificationReport inspect_fusion(const WeightContainer& dense,
                                                const WeightContainer& fused,
                                                const FusionPlan& plan,
                                                const ExpertProvenance& provenance);

// inspect_fusion, throwing VerificationFailure on the first failing check.
VerificationReport verify_fusion(const WeightContainer& dense, const WeightContainer& fused,
                                 const FusionPlan& plan, const ExpertProvenance& provenance);

// Dense model with every block's redundant layers deleted and all other
// layers unchanged.
[[nodiscard]] WeightContainer prune_reference(const WeightContainer& dense,
                                              const FusionPlan& plan);

// Runs the fused model with each MoE layer forced to its first base-copy
// expert at gate 1 and compares every layer output against the pruned dense
// reference. Returns the maximum absolute deviation.
[[nodiscard]] double functional_equivalence_check(const WeightContainer& dense,
                                                  const WeightContainer& fused,
                                                  const FusionPlan& plan,
                                                  const ExpertProvenance& provenance,
                                                  const Matrix& probe);

// Closed-form parameter count of fuse()'s output:
//   dense - sum_blocks(attention + both norms of redundant layers)
//         + sum_blocks((N - 1 - n*) * MLP + N * d)
[[nodiscard]] std::size_t expected_fused_parameter_count(const ModelShape& dense,
                                                         const FusionPlan& plan,
                                                         const FusionOptions& options);

nlohmann::json provenance_to_json(const ExpertProvenance& provenance);
ExpertProvenance provenance_from_json(const nlohmann::json& j);

}  // namespace d2m
