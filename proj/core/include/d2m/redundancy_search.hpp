#pragma once

// Global scoring-based redundant block search and its threshold sweep.
//
// A block (l, n) proposes that layers l+1..l+n are redundant copies of base
// layer l. It is valid when every offset k in 1..n satisfies
//   S_out[l,l+k] > 1 - delta,  S_mlp[l,l+k] > 1 - delta,  D_norm[l,l+k] < eps
// and scores (1/n) sum_k [ (S_out + S_mlp)/2 - lambda * D_norm ].
// Valid blocks are sorted by score (descending; ties: smaller l, then smaller
// n) and accepted greedily whenever none of layers l..l+n is occupied yet.

#include <cstdint>
#include <iosfwd>
#include <vector>

#include "d2m/config.hpp"
#include "d2m/similarity.hpp"

namespace d2m {

struct CandidateBlock {
  double score = 0.0;
  LayerIndex base = 0;
  std::uint32_t size = 0;

  friend bool operator==(const CandidateBlock&, const CandidateBlock&) = default;
};

// Throws IndexOutOfRange unless 1 <= l, n >= 1 and l + n <= L.
[[nodiscard]] bool is_valid_block(const SimilarityMatrices& m, LayerIndex l, std::uint32_t n,
                                  double delta, double epsilon);
[[nodiscard]] double block_score(const SimilarityMatrices& m, LayerIndex l, std::uint32_t n,
                                 double lambda);

// Phase 1: all valid blocks, in sorted acceptance order.
[[nodiscard]] std::vector<CandidateBlock> enumerate_candidates(const SimilarityMatrices& m,
                                                               const SearchThresholds& th);

[[nodiscard]] FusionPlan search(const SimilarityMatrices& m, const SearchThresholds& th);

struct SweepCell {
  double delta = 0.0;
  double epsilon = 0.0;
  std::uint32_t pruned_count = 0;
  FusionPlan plan;
};

struct SweepResult {
  std::uint32_t num_layers = 0;
  std::vector<double> deltas;
  std::vector<double> epsilons;
  std::vector<SweepCell> cells;  // delta-major: cells[i * epsilons.size() + j]

  [[nodiscard]] const SweepCell& at(std::size_t delta_index, std::size_t epsilon_index) const {
    return cells.at(delta_index * epsilons.size() + epsilon_index);
  }
};

// Grid values may include 0 (which admits no block). Throws InvalidArgument on
// empty grids or values outside [0, 1).
[[nodiscard]] SweepResult threshold_sweep(const SimilarityMatrices& m,
                                          const std::vector<double>& deltas,
                                          const std::vector<double>& epsilons, double lambda,
                                          const std::vector<std::uint32_t>& block_sizes,
                                          unsigned jobs = 1);

// CSV: delta,epsilon,pruned_count (delta-major order).
void write_sweep_csv(const SweepResult& sweep, std::ostream& out);

struct DepthSelection {
  double delta = 0.0;
  double epsilon = 0.0;
  FusionPlan plan;
};

// Smallest delta (then smallest epsilon) whose plan keeps exactly
// `target_kept` layers. Throws DepthUnreachable.
[[nodiscard]] DepthSelection plan_from_depth(const SweepResult& sweep, std::uint32_t target_kept);

}  // namespace d2m
