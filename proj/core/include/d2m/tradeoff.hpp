#pragma once

// Hardware-aware reward, penalty-exponent calibration and Pareto filtering.
//
//   reward = S * (LaT / LaT_base)^w
//
// With w < 0 slower candidates are penalized. calibrate_w picks w so that a
// latency increase by `factor` paired with a score gain by `gain` leaves the
// reward unchanged: factor^w * gain = 1.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace d2m::tradeoff {

struct CandidateEvaluation {
  std::string config_id;
  std::uint32_t depth = 0;
  double latency_ms = 0.0;
  double score = 0.0;
  std::optional<double> reward;
};

// Throws NonPositiveLatency.
[[nodiscard]] double reward(double score, double latency_ms, double base_latency_ms, double w);

// Throws DegenerateCalibration when factor == 1, InvalidArgument when
// factor <= 0 or gain <= 0.
[[nodiscard]] double calibrate_w(double latency_factor, double relative_gain);

struct Ranking {
  std::vector<CandidateEvaluation> candidates;  // input order, rewards filled
  std::size_t best = 0;                         // index into candidates
};

// Ties on reward go to the lower latency, then to the earlier candidate.
// Throws InvalidArgument on an empty list.
[[nodiscard]] Ranking evaluate_candidates(std::vector<CandidateEvaluation> candidates,
                                          double base_latency_ms, double w);

struct Point {
  double latency = 0.0;
  double score = 0.0;
  friend bool operator==(const Point&, const Point&) = default;
};

// Points not dominated by any other (latency <= and score >= with one strict),
// sorted by latency ascending (score descending on latency ties).
[[nodiscard]] std::vector<Point> pareto_frontier(const std::vector<Point>& points);
// Same filter applied to candidates; order as above.
[[nodiscard]] std::vector<CandidateEvaluation> pareto_frontier(
    const std::vector<CandidateEvaluation>& candidates);

// CSV: config_id,depth,latency_ms,score,reward. Rewards are printed with two
// decimals; a missing reward is an empty field.
[[nodiscard]] std::vector<CandidateEvaluation> read_candidates_csv(std::istream& in);
void write_candidates_csv(const std::vector<CandidateEvaluation>& candidates, std::ostream& out);

}  // namespace d2m::tradeoff
