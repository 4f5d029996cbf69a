#include <gtest/gtest.h>

#include "d2m/config.hpp"
#include "d2m/error.hpp"

using namespace d2m;
using nlohmann::json;

namespace {

template <typename Fn>
ErrorCode code_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected d2m::Error";
  return ErrorCode::InvalidArgument;
}

}  // namespace

TEST(Config, QwenShapeIsValid) {
  const ModelShape s = qwen25_05b_shape();
  EXPECT_EQ(s.num_layers, 24u);
  EXPECT_EQ(s.hidden_dim, 896u);
  EXPECT_EQ(s.mlp_dim, 4864u);
  EXPECT_EQ(s.num_heads, 14u);
  EXPECT_EQ(s.num_kv_heads, 2u);
  EXPECT_EQ(s.head_dim, 64u);
  EXPECT_EQ(s.vocab_size, 151936u);
  EXPECT_TRUE(s.tied_embedding);
  EXPECT_EQ(validate_shape(s), s);
  EXPECT_EQ(validate_shape(validate_shape(s)), s);
}

TEST(Config, GqaMustBeIntegral) {
  ModelShape s = qwen25_05b_shape();
  s.num_kv_heads = 3;
  EXPECT_EQ(code_of([&] { (void)validate_shape(s); }), ErrorCode::InvalidShape);
}

TEST(Config, TopKBoundedByExperts) {
  ModelShape s = qwen25_05b_shape();
  s.moe = MoEShape{6, 7, 1, 1};
  EXPECT_EQ(code_of([&] { (void)validate_shape(s); }), ErrorCode::InvalidShape);
  s.moe = MoEShape{6, 1, 1, 1};
  EXPECT_NO_THROW((void)validate_shape(s));
}

TEST(Config, ZeroCountsRejected) {
  ModelShape s = qwen25_05b_shape();
  s.mlp_dim = 0;
  EXPECT_EQ(code_of([&] { (void)validate_shape(s); }), ErrorCode::InvalidShape);
}

TEST(Config, GqaRatio) {
  ModelShape s = qwen25_05b_shape();
  EXPECT_EQ(gqa_ratio(s), 7u);
  s.num_heads = 8;
  s.num_kv_heads = 8;
  EXPECT_EQ(gqa_ratio(s), 1u);
  s.num_heads = 32;
  EXPECT_EQ(gqa_ratio(s), 4u);
}

TEST(Config, Defaults) {
  const RouterConfig rc;
  EXPECT_EQ(rc.temperature, 1.0);
  EXPECT_EQ(rc.aux_loss_weight, 1e-3);
  EXPECT_FALSE(rc.renormalize_top_k);
  const Workload wl;
  EXPECT_EQ(wl.prompt_len, 1000u);
  EXPECT_EQ(wl.gen_len, 50u);
  const HardwareProfile hw = thor_u_profile();
  EXPECT_EQ(hw.peak_flops, 350e12);
  EXPECT_EQ(hw.mem_bandwidth, 273e9);
  EXPECT_EQ(hw.weight_bytes, 2.0);
  EXPECT_EQ(hw.kv_bytes, 2.0);
  const SearchThresholds th;
  EXPECT_EQ(th.block_sizes, (std::vector<std::uint32_t>{1, 2, 3}));
  EXPECT_EQ(th.score_penalty, 1.0);
}

TEST(Config, ThresholdsOpenInterval) {
  SearchThresholds th;
  for (double bad : {0.0, 1.0, -0.1, 1.5}) {
    th.cos_threshold = bad;
    EXPECT_EQ(code_of([&] { (void)validate_thresholds(th); }), ErrorCode::InvalidConfig) << bad;
  }
  th.cos_threshold = 0.05;
  th.norm_tolerance = 1.0;
  EXPECT_EQ(code_of([&] { (void)validate_thresholds(th); }), ErrorCode::InvalidConfig);
  th.norm_tolerance = 0.1;
  th.block_sizes.clear();
  EXPECT_EQ(code_of([&] { (void)validate_thresholds(th); }), ErrorCode::InvalidConfig);
}

TEST(Config, HardwareAndWorkloadValidation) {
  HardwareProfile hw = thor_u_profile();
  hw.mem_bandwidth = 0;
  EXPECT_EQ(code_of([&] { (void)validate_hardware(hw); }), ErrorCode::InvalidConfig);
  Workload wl;
  wl.gen_len = 0;
  EXPECT_EQ(code_of([&] { (void)validate_workload(wl); }), ErrorCode::InvalidConfig);
}

TEST(Config, MakePlanDerivesKeepAndPrune) {
  const FusionPlan p = make_plan(8, {FusedBlock{2, {3, 4}}, FusedBlock{6, {7}}});
  EXPECT_EQ(p.keep, (std::vector<LayerIndex>{1, 2, 5, 6, 8}));
  EXPECT_EQ(p.prune, (std::vector<LayerIndex>{3, 4, 7}));
  EXPECT_EQ(p.num_layers, 8u);
}

TEST(Config, PlanInvariantsRejected) {
  // Non-contiguous redundant run.
  EXPECT_EQ(code_of([] { (void)make_plan(6, {FusedBlock{2, {4}}}); }), ErrorCode::InvalidPlan);
  // Overlapping blocks.
  EXPECT_EQ(code_of([] { (void)make_plan(6, {FusedBlock{1, {2}}, FusedBlock{2, {3}}}); }),
            ErrorCode::InvalidPlan);
  // Out of range.
  EXPECT_EQ(code_of([] { (void)make_plan(3, {FusedBlock{3, {4}}}); }), ErrorCode::InvalidPlan);

  FusionPlan p = make_plan(4, {FusedBlock{1, {2}}});
  p.keep.push_back(2);
  EXPECT_EQ(code_of([&] { (void)validate_plan(p); }), ErrorCode::InvalidPlan);
  p = make_plan(4, {FusedBlock{1, {2}}});
  p.keep.pop_back();
  EXPECT_EQ(code_of([&] { (void)validate_plan(p); }), ErrorCode::InvalidPlan);
}

TEST(Config, RunConfigRoundTrip) {
  RunConfig cfg;
  cfg.model = qwen25_05b_shape();
  cfg.model.moe = MoEShape{6, 1, 1, 1};
  cfg.hardware = thor_u_profile();
  cfg.thresholds.cos_threshold = 0.07;
  cfg.router.temperature = 2.0;
  const json j = run_config_to_json(cfg);
  const RunConfig back = parse_run_config(j);
  EXPECT_EQ(back.model, cfg.model);
  EXPECT_EQ(back.hardware, cfg.hardware);
  EXPECT_EQ(back.workload, cfg.workload);
  EXPECT_EQ(back.thresholds, cfg.thresholds);
  EXPECT_EQ(back.router, cfg.router);
}

TEST(Config, RunConfigRejectsUnknownKeys) {
  json j = run_config_to_json(RunConfig{qwen25_05b_shape(), thor_u_profile(), {}, {}, {}});
  j["extra"] = 1;
  EXPECT_EQ(code_of([&] { (void)parse_run_config(j); }), ErrorCode::InvalidConfig);
  j.erase("extra");
  j["model"]["hidden"] = 896;
  EXPECT_EQ(code_of([&] { (void)parse_run_config(j); }), ErrorCode::InvalidConfig);
  j["model"].erase("hidden");
  j["workload"]["gen_len"] = -5;
  EXPECT_EQ(code_of([&] { (void)parse_run_config(j); }), ErrorCode::InvalidConfig);
}

TEST(Config, RunConfigRequiresModelAndDefaultsHardware) {
  EXPECT_EQ(code_of([] { (void)parse_run_config(json::object()); }), ErrorCode::InvalidConfig);
  json j;
  j["model"] = qwen25_05b_shape();
  const RunConfig cfg = parse_run_config(j);
  EXPECT_EQ(cfg.hardware, thor_u_profile());
  EXPECT_EQ(cfg.workload, Workload{});
}

TEST(Config, PlanJsonRoundTrip) {
  const FusionPlan p = make_plan(7, {FusedBlock{5, {6, 7}}, FusedBlock{1, {2}}});
  const json j = p;
  EXPECT_EQ(j.at("blocks").size(), 2u);
  EXPECT_EQ(j.get<FusionPlan>(), p);
}
