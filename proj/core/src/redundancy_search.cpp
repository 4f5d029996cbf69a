#include "d2m/redundancy_search.hpp"

#include <algorithm>
#include <iomanip>
#include <ostream>

#include "d2m/error.hpp"
#include "d2m/parallel.hpp"

namespace d2m {

namespace {

void check_block_range(const SimilarityMatrices& m, LayerIndex l, std::uint32_t n) {
  const std::uint32_t L = m.num_layers();
  if (l == 0 || n == 0 || l + n > L) {
    fail(ErrorCode::IndexOutOfRange, "block (l=" + std::to_string(l) + ", n=" +
                                         std::to_string(n) + ") outside L=" + std::to_string(L));
  }
}

bool candidate_before(const CandidateBlock& a, const CandidateBlock& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.base != b.base) return a.base < b.base;
  return a.size < b.size;
}

FusionPlan search_unchecked(const SimilarityMatrices& m, const SearchThresholds& th) {
  const std::uint32_t L = m.num_layers();
  const std::vector<CandidateBlock> candidates = enumerate_candidates(m, th);
  std::vector<bool> occupied(L + 1, false);
  std::vector<FusedBlock> blocks;
  for (const CandidateBlock& c : candidates) {
    bool free = true;
    for (LayerIndex i = c.base; i <= c.base + c.size; ++i) free = free && !occupied[i];
    if (!free) continue;
    FusedBlock b;
    b.base = c.base;
    for (LayerIndex i = c.base; i <= c.base + c.size; ++i) {
      occupied[i] = true;
      if (i > c.base) b.redundant.push_back(i);
    }
    blocks.push_back(std::move(b));
  }
  return make_plan(L, std::move(blocks));
}

}  // namespace

bool is_valid_block(const SimilarityMatrices& m, LayerIndex l, std::uint32_t n, double delta,
                    double epsilon) {
  check_block_range(m, l, n);
  for (std::uint32_t k = 1; k <= n; ++k) {
    if (!(m.out(l, l + k) > 1.0 - delta && m.mlp(l, l + k) > 1.0 - delta &&
          m.norm(l, l + k) < epsilon)) {
      return false;
    }
  }
  return true;
}

double block_score(const SimilarityMatrices& m, LayerIndex l, std::uint32_t n, double lambda) {
  check_block_range(m, l, n);
  double sum = 0.0;
  for (std::uint32_t k = 1; k <= n; ++k) {
    sum += (m.out(l, l + k) + m.mlp(l, l + k)) / 2.0 - lambda * m.norm(l, l + k);
  }
  return sum / static_cast<double>(n);
}

std::vector<CandidateBlock> enumerate_candidates(const SimilarityMatrices& m,
                                                 const SearchThresholds& th) {
  validate_matrices(m);
  const std::uint32_t L = m.num_layers();
  std::vector<std::uint32_t> sizes = th.block_sizes;
  std::sort(sizes.begin(), sizes.end());
  sizes.erase(std::unique(sizes.begin(), sizes.end()), sizes.end());
  std::vector<CandidateBlock> out;
  for (LayerIndex l = 1; l <= L; ++l) {
    for (std::uint32_t n : sizes) {
      if (n == 0 || l + n > L) continue;
      if (is_valid_block(m, l, n, th.cos_threshold, th.norm_tolerance)) {
        out.push_back({block_score(m, l, n, th.score_penalty), l, n});
      }
    }
  }
  std::sort(out.begin(), out.end(), candidate_before);
  return out;
}

FusionPlan search(const SimilarityMatrices& m, const SearchThresholds& th) {
  validate_thresholds(th);
  return search_unchecked(m, th);
}

SweepResult threshold_sweep(const SimilarityMatrices& m, const std::vector<double>& deltas,
                            const std::vector<double>& epsilons, double lambda,
                            const std::vector<std::uint32_t>& block_sizes, unsigned jobs) {
  if (deltas.empty() || epsilons.empty()) {
    fail(ErrorCode::InvalidArgument, "sweep grids must be non-empty");
  }
  for (const auto* grid : {&deltas, &epsilons}) {
    for (double v : *grid) {
      if (!(v >= 0.0 && v < 1.0)) fail(ErrorCode::InvalidArgument, "sweep values must lie in [0,1)");
    }
  }
  if (block_sizes.empty()) fail(ErrorCode::InvalidArgument, "block_sizes must be non-empty");
  validate_matrices(m);

  SweepResult result;
  result.num_layers = m.num_layers();
  result.deltas = deltas;
  result.epsilons = epsilons;
  result.cells.resize(deltas.size() * epsilons.size());
  parallel_for(result.cells.size(), jobs, [&](std::size_t idx) {
    SweepCell& cell = result.cells[idx];
    cell.delta = deltas[idx / epsilons.size()];
    cell.epsilon = epsilons[idx % epsilons.size()];
    SearchThresholds th;
    th.cos_threshold = cell.delta;
    th.norm_tolerance = cell.epsilon;
    th.score_penalty = lambda;
    th.block_sizes = block_sizes;
    cell.plan = search_unchecked(m, th);
    cell.pruned_count = static_cast<std::uint32_t>(cell.plan.prune.size());
  });
  return result;
}

void write_sweep_csv(const SweepResult& sweep, std::ostream& out) {
  out << "delta,epsilon,pruned_count\n" << std::setprecision(9);
  for (const SweepCell& c : sweep.cells) {
    out << c.delta << ',' << c.epsilon << ',' << c.pruned_count << '\n';
  }
}

DepthSelection plan_from_depth(const SweepResult& sweep, std::uint32_t target_kept) {
  const SweepCell* best = nullptr;
  for (const SweepCell& c : sweep.cells) {
    if (sweep.num_layers - c.pruned_count != target_kept) continue;
    if (!best || c.delta < best->delta || (c.delta == best->delta && c.epsilon < best->epsilon)) {
      best = &c;
    }
  }
  if (!best) {
    fail(ErrorCode::DepthUnreachable, "no sweep cell keeps exactly " +
                                          std::to_string(target_kept) + " of " +
                                          std::to_string(sweep.num_layers) + " layers");
  }
  return {best->delta, best->epsilon, best->plan};
}

}  // namespace d2m
