#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "d2m/config.hpp"
#include "d2m/nanomodel.hpp"
#include "d2m/similarity.hpp"
#include "d2m/surgery.hpp"
#include "d2m/tradeoff.hpp"
#include "d2m/weights.hpp"

namespace fixture {

// d=16, d_mid=32, 4 query heads over 2 KV heads of width 4, V=32.
d2m::ModelShape toy_shape(std::uint32_t layers);

d2m::Matrix gaussian(Eigen::Index rows, Eigen::Index cols, double scale, std::mt19937_64& rng);

// Dense toy model with weights at the given scale (norm scales jittered
// around 1 so that copying the wrong norm is observable).
d2m::WeightContainer dense_model(std::uint32_t layers, std::uint64_t seed, double scale = 0.3);

// A single MoE layer with random attention, experts and router.
d2m::nano::MoELayer random_moe_layer(std::uint32_t num_experts, std::uint32_t top_k,
                                     std::uint64_t seed, bool renormalize = false);

// Random symmetric similarity triple with values concentrated near the
// validity thresholds so that searches produce non-trivial plans.
d2m::SimilarityMatrices random_matrices(std::uint32_t layers, std::mt19937_64& rng);

// Published depth candidates: depth, latency (ms), average score.
std::vector<d2m::tradeoff::CandidateEvaluation> depth_candidates();
inline constexpr double kBaseLatencyMs = 195.87;
inline const std::vector<double> kExpectedRewards{31.54, 40.70, 44.00, 48.12, 47.79, 47.74};

// Toy training fixture: L=4 dense model fused 4 -> 3 (block 2+3), K=2, M=2.
d2m::FusedModel training_fixture(std::uint64_t seed);

// Fresh scratch directory under the system temp dir.
std::string temp_dir(const std::string& tag);

// D2M-WEIGHTS bytes written without validation, for malformed-input tests.
std::string raw_weights(const d2m::WeightContainer& c, std::uint32_t version = 1);

}  // namespace fixture
