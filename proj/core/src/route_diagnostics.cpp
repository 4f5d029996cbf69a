#include "d2m/route_diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

#include "d2m/error.hpp"

namespace d2m::diag {

namespace {

std::uint32_t argmax_first(const std::vector<double>& v) {
  return static_cast<std::uint32_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  return cells;
}

std::uint64_t parse_count(const std::string& cell, std::size_t row) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(cell, &used);
    if (used != cell.size() || v < 0) throw std::invalid_argument(cell);
    return static_cast<std::uint64_t>(v);
  } catch (const std::exception&) {
    fail(ErrorCode::InvalidArgument, "row " + std::to_string(row) + ": bad integer '" + cell + "'");
  }
}

}  // namespace

LayerLoadProfile load_profile(std::span<const std::uint32_t> assignments,
                              std::uint32_t num_experts, LayerIndex layer) {
  if (assignments.empty()) fail(ErrorCode::EmptyAssignments, "no token assignments");
  if (num_experts == 0) fail(ErrorCode::InvalidArgument, "num_experts must be positive");
  std::vector<std::size_t> counts(num_experts, 0);
  for (std::uint32_t e : assignments) {
    if (e >= num_experts) {
      fail(ErrorCode::IndexOutOfRange, "expert " + std::to_string(e) + " >= N");
    }
    ++counts[e];
  }
  LayerLoadProfile p;
  p.layer = layer;
  p.loads.resize(num_experts);
  for (std::uint32_t i = 0; i < num_experts; ++i) {
    p.loads[i] = static_cast<double>(counts[i]) / static_cast<double>(assignments.size());
  }
  p.winner = argmax_first(p.loads);
  return p;
}

LayerLoadProfile load_profile(const nano::RoutingRecord& record, LayerIndex layer) {
  std::vector<std::uint32_t> top1;
  top1.reserve(record.num_tokens());
  for (std::size_t t = 0; t < record.num_tokens(); ++t) top1.push_back(record.top1(t));
  return load_profile(top1, record.num_experts, layer);
}

LayerLoadProfile profile_from_loads(std::vector<double> loads, LayerIndex layer) {
  if (loads.empty()) fail(ErrorCode::EmptyAssignments, "empty load vector");
  double sum = 0.0;
  for (double v : loads) {
    if (!(v >= 0.0)) fail(ErrorCode::InvalidArgument, "loads must be non-negative");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    fail(ErrorCode::InvalidArgument, "loads must sum to 1 (got " + std::to_string(sum) + ")");
  }
  LayerLoadProfile p;
  p.layer = layer;
  p.winner = argmax_first(loads);
  p.loads = std::move(loads);
  return p;
}

double entropy(const std::vector<double>& loads) {
  double h = 0.0;
  for (double p : loads) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

WtaSummary wta_metrics(const std::vector<LayerLoadProfile>& profiles,
                       std::vector<double> thresholds) {
  if (profiles.empty()) fail(ErrorCode::InvalidArgument, "no layer profiles");
  WtaSummary s;
  s.num_experts = profiles.front().num_experts();
  s.thresholds = std::move(thresholds);
  s.layers_above.assign(s.thresholds.size(), 0);
  const double n_layers = static_cast<double>(profiles.size());
  for (const LayerLoadProfile& p : profiles) {
    if (p.num_experts() != s.num_experts) {
      fail(ErrorCode::InvalidArgument, "profiles disagree on the expert count");
    }
    const auto [lo, hi] = std::minmax_element(p.loads.begin(), p.loads.end());
    const double top = *hi;
    s.mean_top_load += top / n_layers;
    s.mean_top_uniform_ratio += top * s.num_experts / n_layers;
    s.mean_top_bottom_gap += (top - *lo) / n_layers;
    s.mean_entropy += entropy(p.loads) / n_layers;
    for (std::size_t i = 0; i < s.thresholds.size(); ++i) {
      if (top > s.thresholds[i]) ++s.layers_above[i];
    }
    s.top_loads.push_back(top);
    s.layers.push_back(p.layer);
    s.winners.push_back(p.winner);
  }
  return s;
}

RunComparison compare_runs(const WtaSummary& a, const WtaSummary& b) {
  if (a.top_loads.size() != b.top_loads.size()) {
    fail(ErrorCode::LayerCountMismatch, std::to_string(a.top_loads.size()) + " vs " +
                                            std::to_string(b.top_loads.size()) + " layers");
  }
  if (a.thresholds != b.thresholds) {
    fail(ErrorCode::InvalidArgument, "summaries use different thresholds");
  }
  RunComparison c;
  c.mean_top_load = a.mean_top_load - b.mean_top_load;
  for (std::size_t i = 0; i < a.layers_above.size(); ++i) {
    c.layers_above.push_back(static_cast<std::int64_t>(a.layers_above[i]) -
                             static_cast<std::int64_t>(b.layers_above[i]));
  }
  c.mean_top_uniform_ratio = a.mean_top_uniform_ratio - b.mean_top_uniform_ratio;
  c.mean_top_bottom_gap = a.mean_top_bottom_gap - b.mean_top_bottom_gap;
  c.mean_entropy = a.mean_entropy - b.mean_entropy;
  for (std::size_t l = 0; l < a.top_loads.size(); ++l) {
    c.per_layer_top_load.push_back(a.top_loads[l] - b.top_loads[l]);
  }
  return c;
}

void write_summary_csv(const WtaSummary& s, std::ostream& out) {
  out << "metric,value\n" << std::setprecision(9);
  out << "mean_top_expert_load," << s.mean_top_load << '\n';
  for (std::size_t i = 0; i < s.thresholds.size(); ++i) {
    out << "layers_top_gt_" << std::lround(s.thresholds[i] * 100) << "pct," << s.layers_above[i]
        << '\n';
  }
  out << "mean_top_uniform_ratio," << s.mean_top_uniform_ratio << '\n';
  out << "mean_top_bottom_gap," << s.mean_top_bottom_gap << '\n';
  out << "mean_entropy," << s.mean_entropy << '\n';
}

void write_layer_csv(const std::vector<LayerLoadProfile>& profiles, std::ostream& out) {
  const std::uint32_t N = profiles.empty() ? 0 : profiles.front().num_experts();
  out << "layer,winner,top_load";
  for (std::uint32_t j = 1; j <= N; ++j) out << ",load_e" << j;
  out << '\n' << std::setprecision(9);
  for (const LayerLoadProfile& p : profiles) {
    out << p.layer << ',' << (p.winner + 1) << ',' << p.loads[p.winner];
    for (double v : p.loads) out << ',' << v;
    out << '\n';
  }
}

std::vector<LayerLoadProfile> read_routing_csv(std::istream& in, std::uint32_t num_experts) {
  std::string line;
  if (!std::getline(in, line)) fail(ErrorCode::EmptyAssignments, "routing CSV is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const std::vector<std::string> header = split(line);

  if (header.size() >= 4 && header[0] == "step" && header[1] == "task_loss" &&
      header[2] == "lb_loss") {
    const auto N = static_cast<std::uint32_t>(header.size() - 3);
    if (num_experts != 0 && num_experts != N) {
      fail(ErrorCode::InvalidArgument, "training log has " + std::to_string(N) + " experts");
    }
    std::string last;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) last = line;
    }
    if (last.empty()) fail(ErrorCode::EmptyAssignments, "training log has no steps");
    const std::vector<std::string> cells = split(last);
    if (cells.size() != header.size()) fail(ErrorCode::InvalidArgument, "ragged training log row");
    std::vector<double> loads;
    for (std::size_t i = 3; i < cells.size(); ++i) loads.push_back(std::stod(cells[i]));
    // Averaged fractions carry print rounding; renormalize to unit mass.
    double sum = 0.0;
    for (double v : loads) sum += v;
    if (!(sum > 0.0)) fail(ErrorCode::InvalidArgument, "training log loads sum to zero");
    for (double& v : loads) v /= sum;
    return {profile_from_loads(std::move(loads), 1)};
  }

  if (header != std::vector<std::string>{"layer", "token", "expert"}) {
    fail(ErrorCode::InvalidArgument,
         "routing CSV header must be 'layer,token,expert' or a training log header");
  }
  std::map<LayerIndex, std::vector<std::uint32_t>> per_layer;
  std::uint32_t max_expert = 0;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::vector<std::string> cells = split(line);
    if (cells.size() != 3) fail(ErrorCode::InvalidArgument, "row " + std::to_string(row) + " malformed");
    const auto layer = static_cast<LayerIndex>(parse_count(cells[0], row));
    const auto expert = static_cast<std::uint32_t>(parse_count(cells[2], row));
    if (layer == 0 || expert == 0) {
      fail(ErrorCode::IndexOutOfRange, "row " + std::to_string(row) + ": indices are 1-based");
    }
    max_expert = std::max(max_expert, expert);
    per_layer[layer].push_back(expert - 1);
  }
  if (per_layer.empty()) fail(ErrorCode::EmptyAssignments, "routing CSV has no assignments");
  const std::uint32_t N = num_experts != 0 ? num_experts : max_expert;
  std::vector<LayerLoadProfile> out;
  for (const auto& [layer, assignments] : per_layer) {
    out.push_back(load_profile(assignments, N, layer));
  }
  return out;
}

}  // namespace d2m::diag
