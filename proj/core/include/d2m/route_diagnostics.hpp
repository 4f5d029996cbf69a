#pragma once

// Winner-takes-all routing diagnostics over per-layer top-1 expert loads.

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "d2m/config.hpp"
#include "d2m/nanomodel.hpp"

namespace d2m::diag {

struct LayerLoadProfile {
  LayerIndex layer = 0;
  std::vector<double> loads;  // p_1..p_N, sums to 1
  std::uint32_t winner = 0;   // 0-based argmax, ties to the smaller index

  [[nodiscard]] std::uint32_t num_experts() const {
    return static_cast<std::uint32_t>(loads.size());
  }
};

// Throws EmptyAssignments when `assignments` is empty, IndexOutOfRange when an
// expert index (0-based) is >= num_experts.
[[nodiscard]] LayerLoadProfile load_profile(std::span<const std::uint32_t> assignments,
                                            std::uint32_t num_experts, LayerIndex layer = 1);
[[nodiscard]] LayerLoadProfile load_profile(const nano::RoutingRecord& record,
                                            LayerIndex layer = 1);
// From precomputed fractions; renormalizes nothing, validates the sum.
[[nodiscard]] LayerLoadProfile profile_from_loads(std::vector<double> loads, LayerIndex layer = 1);

struct WtaSummary {
  std::uint32_t num_experts = 0;
  std::vector<double> thresholds;          // e.g. {0.5, 0.4}
  double mean_top_load = 0.0;
  std::vector<std::uint32_t> layers_above;  // aligned with thresholds
  double mean_top_uniform_ratio = 0.0;      // mean(top * N)
  double mean_top_bottom_gap = 0.0;
  double mean_entropy = 0.0;                // natural log, 0 ln 0 := 0
  std::vector<double> top_loads;            // per layer, for plotting
  std::vector<LayerIndex> layers;
  std::vector<std::uint32_t> winners;
};

// Throws InvalidArgument for an empty list or mixed expert counts.
[[nodiscard]] WtaSummary wta_metrics(const std::vector<LayerLoadProfile>& profiles,
                                     std::vector<double> thresholds = {0.5, 0.4});

[[nodiscard]] double entropy(const std::vector<double>& loads);

struct RunComparison {
  double mean_top_load = 0.0;
  std::vector<std::int64_t> layers_above;
  double mean_top_uniform_ratio = 0.0;
  double mean_top_bottom_gap = 0.0;
  double mean_entropy = 0.0;
  std::vector<double> per_layer_top_load;  // a - b
};

// Deltas a - b. Throws LayerCountMismatch.
[[nodiscard]] RunComparison compare_runs(const WtaSummary& a, const WtaSummary& b);

// Six metric rows: metric,value.
void write_summary_csv(const WtaSummary& s, std::ostream& out);
// layer,winner,top_load,load_e1..load_eN
void write_layer_csv(const std::vector<LayerLoadProfile>& profiles, std::ostream& out);

// Reads either a routing log (header layer,token,expert; 1-based indices) or
// a training log (header step,task_loss,lb_loss,load_e1..; the final row
// becomes one profile). num_experts = 0 infers N from the data.
[[nodiscard]] std::vector<LayerLoadProfile> read_routing_csv(std::istream& in,
                                                             std::uint32_t num_experts = 0);

}  // namespace d2m::diag
