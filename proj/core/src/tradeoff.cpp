#include "d2m/tradeoff.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>

#include "d2m/error.hpp"

namespace d2m::tradeoff {

namespace {

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

double parse_number(const std::string& cell, const char* what, std::size_t row) {
  try {
    std::size_t used = 0;
    const double v = std::stod(cell, &used);
    if (used != cell.size()) throw std::invalid_argument(cell);
    return v;
  } catch (const std::exception&) {
    fail(ErrorCode::InvalidArgument, std::string("row ") + std::to_string(row) + ": bad " + what +
                                         " '" + cell + "'");
  }
}

bool dominates(const Point& q, const Point& p) {
  return q.latency <= p.latency && q.score >= p.score &&
         (q.latency < p.latency || q.score > p.score);
}

}  // namespace

double reward(double score, double latency_ms, double base_latency_ms, double w) {
  if (!(latency_ms > 0.0) || !(base_latency_ms > 0.0)) {
    fail(ErrorCode::NonPositiveLatency, "latencies must be positive");
  }
  return score * std::pow(latency_ms / base_latency_ms, w);
}

double calibrate_w(double latency_factor, double relative_gain) {
  if (!(latency_factor > 0.0) || !(relative_gain > 0.0)) {
    fail(ErrorCode::InvalidArgument, "latency factor and gain must be positive");
  }
  if (latency_factor == 1.0) {
    fail(ErrorCode::DegenerateCalibration, "latency factor of 1 leaves w undetermined");
  }
  return -std::log(relative_gain) / std::log(latency_factor);
}

Ranking evaluate_candidates(std::vector<CandidateEvaluation> candidates, double base_latency_ms,
                            double w) {
  if (candidates.empty()) fail(ErrorCode::InvalidArgument, "no candidates to evaluate");
  Ranking r;
  for (CandidateEvaluation& c : candidates) {
    if (c.score < 0.0) fail(ErrorCode::InvalidArgument, "negative score for " + c.config_id);
    c.reward = reward(c.score, c.latency_ms, base_latency_ms, w);
  }
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    const auto& a = candidates[i];
    const auto& b = candidates[r.best];
    if (*a.reward > *b.reward || (*a.reward == *b.reward && a.latency_ms < b.latency_ms)) {
      r.best = i;
    }
  }
  r.candidates = std::move(candidates);
  return r;
}

std::vector<Point> pareto_frontier(const std::vector<Point>& points) {
  // Sweep by latency ascending, score descending: a point survives iff its
  // score beats every earlier point with strictly smaller latency, and ties
  // the best score seen so far only when it is an exact duplicate.
  std::vector<Point> sorted = points;
  std::sort(sorted.begin(), sorted.end(), [](const Point& a, const Point& b) {
    return a.latency != b.latency ? a.latency < b.latency : a.score > b.score;
  });
  std::vector<Point> front;
  for (const Point& p : sorted) {
    if (front.empty() || p.score > front.back().score || p == front.back()) {
      front.push_back(p);
    }
  }
  return front;
}

std::vector<CandidateEvaluation> pareto_frontier(
    const std::vector<CandidateEvaluation>& candidates) {
  std::vector<CandidateEvaluation> out;
  for (const CandidateEvaluation& c : candidates) {
    const Point p{c.latency_ms, c.score};
    const bool dominated = std::any_of(candidates.begin(), candidates.end(), [&](const auto& q) {
      return dominates(Point{q.latency_ms, q.score}, p);
    });
    if (!dominated) out.push_back(c);
  }
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    return a.latency_ms != b.latency_ms ? a.latency_ms < b.latency_ms : a.score > b.score;
  });
  return out;
}

std::vector<CandidateEvaluation> read_candidates_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) fail(ErrorCode::InvalidArgument, "candidate CSV is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const std::vector<std::string> header = split(line);
  const std::vector<std::string> expected{"config_id", "depth", "latency_ms", "score"};
  if (header.size() < 4 || !std::equal(expected.begin(), expected.end(), header.begin()) ||
      (header.size() == 5 && header[4] != "reward") || header.size() > 5) {
    fail(ErrorCode::InvalidArgument,
         "candidate CSV header must be config_id,depth,latency_ms,score[,reward]");
  }
  std::vector<CandidateEvaluation> out;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::vector<std::string> cells = split(line);
    if (cells.size() < 4 || cells.size() > header.size()) {
      fail(ErrorCode::InvalidArgument, "row " + std::to_string(row) + " has " +
                                           std::to_string(cells.size()) + " fields");
    }
    CandidateEvaluation c;
    c.config_id = cells[0];
    const double depth = parse_number(cells[1], "depth", row);
    if (depth < 0 || depth != std::floor(depth)) {
      fail(ErrorCode::InvalidArgument, "row " + std::to_string(row) + ": depth must be a count");
    }
    c.depth = static_cast<std::uint32_t>(depth);
    c.latency_ms = parse_number(cells[2], "latency_ms", row);
    c.score = parse_number(cells[3], "score", row);
    if (cells.size() == 5 && !cells[4].empty()) c.reward = parse_number(cells[4], "reward", row);
    if (!(c.latency_ms > 0.0)) {
      fail(ErrorCode::NonPositiveLatency, "row " + std::to_string(row) + ": latency must be > 0");
    }
    out.push_back(std::move(c));
  }
  if (out.empty()) fail(ErrorCode::InvalidArgument, "candidate CSV has no data rows");
  return out;
}

void write_candidates_csv(const std::vector<CandidateEvaluation>& candidates, std::ostream& out) {
  out << "config_id,depth,latency_ms,score,reward\n";
  for (const CandidateEvaluation& c : candidates) {
    out << c.config_id << ',' << c.depth << ',' << std::setprecision(10) << c.latency_ms << ','
        << c.score << ',';
    if (c.reward) out << std::fixed << std::setprecision(2) << *c.reward << std::defaultfloat;
    out << '\n';
  }
}

}  // namespace d2m::tradeoff
