#include <gtest/gtest.h>

#include "d2m/cost_model.hpp"
#include "d2m/error.hpp"
#include "d2m/surgery.hpp"
#include "fixtures.hpp"

using namespace d2m;
using namespace d2m::cost;

namespace {

ModelShape moe_shape(std::uint32_t L, std::uint32_t N, std::uint32_t k = 1) {
  ModelShape s = qwen25_05b_shape();
  s.num_layers = L;
  s.moe = MoEShape{N, k, 1, 1};
  return s;
}

}  // namespace

TEST(Roofline, ExpansionRatio) {
  const ModelShape dense = qwen25_05b_shape();
  EXPECT_NEAR(expansion_ratio(dense), 5.4286, 1e-4);
  EXPECT_EQ(expansion_ratio(moe_shape(24, 6)), expansion_ratio(dense));
  EXPECT_EQ(expansion_ratio(moe_shape(24, 6, 2)), 2 * expansion_ratio(dense));
}

TEST(Roofline, CalculatorValues) {
  // xi_F = 4 + 4/7 + 6 * 4864/896 = 37.142857...
  const ModelShape s = qwen25_05b_shape();
  EXPECT_NEAR(compute_coefficient(s), 37.142857142857, 1e-9);
  EXPECT_NEAR(decode_traffic_coefficient(s), 18.571428571429, 1e-9);
  const Workload wl;
  EXPECT_EQ(mean_context_length(wl), 1025.5);
  const double pre = prefill_latency(s, thor_u_profile(), wl);
  const double dec = decode_latency(s, thor_u_profile(), wl);
  // 24 * 1000 * 896^2 * 37.142857 / 350e12
  EXPECT_NEAR(pre, 24.0 * 1000 * 896 * 896 * (4 + 4.0 / 7 + 6 * 4864.0 / 896) / 350e12, 1e-15);
  EXPECT_NEAR(pre * 1e3, 2.05, 2.05 * 0.005);
  const double per_token = (2 + 2.0 / 7 + 3 * 4864.0 / 896) * 896 * 896 * 2 +
                           2 * 1025.5 * 896 * 2 / 7.0;
  EXPECT_NEAR(dec, 24 * 50 * per_token / 273e9, 1e-12);
  EXPECT_NEAR(dec * 1e3, 133.4, 133.4 * 0.005);
  const LatencyBreakdown t = total_latency(s, thor_u_profile(), wl);
  EXPECT_NEAR(t.total_s * 1e3, 135.4, 135.4 * 0.005);
  EXPECT_EQ(t.prefill_bound, Boundedness::ComputeBound);
  EXPECT_EQ(t.decode_bound, Boundedness::MemoryBound);
}

TEST(Roofline, EdgeWorkloadsAndScaling) {
  const ModelShape s = qwen25_05b_shape();
  const HardwareProfile hw = thor_u_profile();
  Workload wl;
  wl.prompt_len = 0;
  EXPECT_EQ(prefill_latency(s, hw, wl), 0.0);
  wl = Workload{};
  wl.gen_len = 0;
  EXPECT_EQ(decode_latency(s, hw, wl), 0.0);

  HardwareProfile half = hw;
  half.mem_bandwidth /= 2;
  EXPECT_DOUBLE_EQ(decode_latency(s, half, {}), 2 * decode_latency(s, hw, {}));
  ModelShape twice = s;
  twice.num_layers = 48;
  EXPECT_DOUBLE_EQ(prefill_latency(twice, hw, {}), 2 * prefill_latency(s, hw, {}));
}

TEST(Roofline, AffineInDepthAndFlatInExperts) {
  const HardwareProfile hw = thor_u_profile();
  const double per_layer = total_latency(moe_shape(1, 6), hw, {}).total_s;
  for (std::uint32_t L = 1; L <= 24; ++L) {
    EXPECT_NEAR(total_latency(moe_shape(L, 6), hw, {}).total_s / L, per_layer, per_layer * 1e-15);
  }
  const double ref = total_latency(moe_shape(19, 2), hw, {}).total_s;
  for (std::uint32_t N : {6u, 10u, 60u}) {
    EXPECT_EQ(total_latency(moe_shape(19, N), hw, {}).total_s, ref);
  }
  EXPECT_LT(total_latency(moe_shape(19, 6), hw, {}).total_s,
            total_latency(qwen25_05b_shape(), hw, {}).total_s);
}

TEST(Memory, PaperFootprints) {
  const MemoryFootprint m6 = static_memory(moe_shape(19, 6));
  EXPECT_NEAR(static_cast<double>(m6.parameters), 1.66e9, 1.66e9 * 0.006);
  EXPECT_NEAR(m6.gigabytes(), 3.32, 0.01);
  EXPECT_NEAR(static_memory(moe_shape(19, 10)).gigabytes(), 5.31, 0.01);
  EXPECT_NEAR(static_cast<double>(active_params(moe_shape(19, 6))), 0.42e9, 0.01e9);
  EXPECT_NEAR(static_cast<double>(active_params(qwen25_05b_shape())), 0.50e9, 0.01e9);
}

TEST(Memory, HandFormula) {
  const std::uint64_t V = 151936, d = 896, dm = 4864, dh = 64;
  const std::uint64_t per_layer = (14 + 2 * 2) * dh * d + d * d + 2 * dh + 2 * d + 6 * d +
                                  3 * 6 * d * dm;
  EXPECT_EQ(static_memory(moe_shape(19, 6)).parameters, V * d + 19 * per_layer + d);
  EXPECT_EQ(static_memory(moe_shape(19, 6)).parameters, 1661624576u);
}

TEST(Memory, AffineInExpertsAndFullActivation) {
  const std::uint64_t m2 = static_memory(moe_shape(19, 2)).parameters;
  const std::uint64_t m3 = static_memory(moe_shape(19, 3)).parameters;
  const std::uint64_t m4 = static_memory(moe_shape(19, 4)).parameters;
  EXPECT_GT(m3, m2);
  EXPECT_EQ(m4 - m3, m3 - m2);
  EXPECT_EQ(active_params(moe_shape(19, 4, 4)), static_memory(moe_shape(19, 4)).parameters);
}

TEST(Memory, ZeroExpertsRejected) {
  try {
    (void)static_memory(moe_shape(19, 0));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InvalidShape);
  }
}

TEST(Memory, MatchesTensorSizes) {
  const WeightContainer dense = fixture::dense_model(6, 1);
  EXPECT_EQ(static_memory(dense.shape).parameters, dense.parameter_count());
  FusionOptions o;
  o.base_copies = 2;
  o.supplementary_copies = 2;
  const FusedModel f = fuse(dense, make_plan(6, {FusedBlock{2, {3, 4}}}), o);
  EXPECT_EQ(static_memory(f.weights.shape).parameters, f.weights.parameter_count());
  ModelShape untied = fixture::toy_shape(2);
  untied.tied_embedding = false;
  untied.moe = MoEShape{3, 1, 1, 1};
  EXPECT_EQ(static_memory(untied).parameters, init_weights(untied, 0).parameter_count());
}

TEST(Evaluate, JsonFields) {
  const Evaluation e = evaluate("L19N6", moe_shape(19, 6), thor_u_profile(), {});
  const nlohmann::json j = to_json(e);
  EXPECT_EQ(j.at("config_id"), "L19N6");
  EXPECT_EQ(j.at("L"), 19);
  EXPECT_EQ(j.at("N"), 6);
  EXPECT_EQ(j.at("k"), 1);
  EXPECT_NEAR(j.at("bytes").get<double>(), 3.32e9, 0.01e9);
  EXPECT_DOUBLE_EQ(j.at("total_s").get<double>(),
                   j.at("prefill_s").get<double>() + j.at("decode_s").get<double>());
}
