#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "d2m/error.hpp"
#include "d2m/route_diagnostics.hpp"
#include "d2m/training.hpp"
#include "fixtures.hpp"

using namespace d2m;
using namespace d2m::diag;

TEST(LoadProfile, OneHotAndUniform) {
  const std::vector<std::uint32_t> all3(10, 2);
  const LayerLoadProfile p = load_profile(all3, 6);
  EXPECT_EQ(p.loads, (std::vector<double>{0, 0, 1, 0, 0, 0}));
  EXPECT_EQ(p.winner, 2u);
  const std::vector<std::uint32_t> each{0, 1, 2, 3, 4, 5};
  const LayerLoadProfile u = load_profile(each, 6);
  for (double v : u.loads) EXPECT_DOUBLE_EQ(v, 1.0 / 6);
  EXPECT_EQ(u.winner, 0u);
}

TEST(LoadProfile, MatchesHandTally) {
  std::mt19937_64 rng(6);
  std::vector<std::uint32_t> a(1000);
  int tally[6] = {};
  for (auto& e : a) {
    e = static_cast<std::uint32_t>(rng() % 6);
    ++tally[e];
  }
  const LayerLoadProfile p = load_profile(a, 6);
  for (int i = 0; i < 6; ++i) EXPECT_EQ(p.loads[i], tally[i] / 1000.0);
}

TEST(LoadProfile, Errors) {
  try {
    (void)load_profile(std::vector<std::uint32_t>{}, 4);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyAssignments);
  }
  EXPECT_THROW((void)load_profile(std::vector<std::uint32_t>{4}, 4), Error);
  EXPECT_THROW((void)profile_from_loads({0.5, 0.6}), Error);
}

TEST(Wta, TopUniformRatioIdentity) {
  // A profile whose top load is 0.480 over six experts.
  const LayerLoadProfile p = profile_from_loads({0.48, 0.2, 0.12, 0.1, 0.06, 0.04});
  const WtaSummary s = wta_metrics({p});
  EXPECT_DOUBLE_EQ(s.mean_top_load, 0.48);
  EXPECT_NEAR(s.mean_top_uniform_ratio, 2.88, 1e-12);
  EXPECT_NEAR(s.mean_top_bottom_gap, 0.44, 1e-12);
  EXPECT_EQ(s.layers_above, (std::vector<std::uint32_t>{0, 1}));
}

TEST(Wta, UniformAndOneHotBounds) {
  const std::vector<double> uniform(6, 1.0 / 6);
  const WtaSummary u = wta_metrics({profile_from_loads(uniform), profile_from_loads(uniform)});
  EXPECT_NEAR(u.mean_entropy, std::log(6.0), 1e-12);
  EXPECT_NEAR(u.mean_top_bottom_gap, 0.0, 1e-15);
  EXPECT_NEAR(u.mean_top_uniform_ratio, 1.0, 1e-12);
  EXPECT_EQ(u.layers_above, (std::vector<std::uint32_t>{0, 0}));
  const WtaSummary h = wta_metrics({profile_from_loads({0, 1, 0, 0, 0, 0})});
  EXPECT_EQ(h.mean_entropy, 0.0);
  EXPECT_EQ(h.mean_top_load, 1.0);
  EXPECT_EQ(h.mean_top_bottom_gap, 1.0);
  EXPECT_EQ(h.mean_top_uniform_ratio, 6.0);
}

TEST(Wta, RandomProfilesRespectBoundsAndRelabeling) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0, 1);
  for (int i = 0; i < 100; ++i) {
    std::vector<double> p(6);
    double s = 0;
    for (double& v : p) s += (v = u(rng));
    for (double& v : p) v /= s;
    const WtaSummary a = wta_metrics({profile_from_loads(p)});
    EXPECT_GE(a.mean_entropy, 0.0);
    EXPECT_LE(a.mean_entropy, std::log(6.0) + 1e-12);
    EXPECT_GE(a.mean_top_uniform_ratio, 1.0 - 1e-12);
    EXPECT_LE(a.mean_top_uniform_ratio, 6.0);
    std::shuffle(p.begin(), p.end(), rng);
    const WtaSummary b = wta_metrics({profile_from_loads(p)});
    EXPECT_NEAR(a.mean_entropy, b.mean_entropy, 1e-12);
    EXPECT_EQ(a.mean_top_load, b.mean_top_load);
  }
}

TEST(Compare, DeltasAndMismatch) {
  const WtaSummary a = wta_metrics({profile_from_loads({0.7, 0.3}), profile_from_loads({0.5, 0.5})});
  const RunComparison zero = compare_runs(a, a);
  EXPECT_EQ(zero.mean_top_load, 0.0);
  EXPECT_EQ(zero.per_layer_top_load, (std::vector<double>{0, 0}));
  const WtaSummary b = wta_metrics({profile_from_loads({0.6, 0.4}), profile_from_loads({0.9, 0.1})});
  const RunComparison d = compare_runs(a, b);
  EXPECT_NEAR(d.per_layer_top_load[0], 0.1, 1e-15);
  EXPECT_NEAR(d.per_layer_top_load[1], -0.4, 1e-15);
  EXPECT_EQ(d.layers_above, (std::vector<std::int64_t>{-1, 0}));
  try {
    (void)compare_runs(a, wta_metrics({profile_from_loads({1, 0})}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::LayerCountMismatch);
  }
}

TEST(Csv, SummaryHasSixRows) {
  const WtaSummary s = wta_metrics({profile_from_loads({0.48, 0.52})});
  std::ostringstream out;
  write_summary_csv(s, out);
  std::istringstream in(out.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "metric,value");
  std::vector<std::string> names;
  while (std::getline(in, line)) names.push_back(line.substr(0, line.find(',')));
  EXPECT_EQ(names, (std::vector<std::string>{"mean_top_expert_load", "layers_top_gt_50pct",
                                             "layers_top_gt_40pct", "mean_top_uniform_ratio",
                                             "mean_top_bottom_gap", "mean_entropy"}));
}

TEST(Csv, ReadsRoutingLogAndTrainingLog) {
  std::istringstream routing("layer,token,expert\n1,0,2\n1,1,2\n1,2,1\n3,0,4\n");
  const auto p = read_routing_csv(routing, 4);
  ASSERT_EQ(p.size(), 2u);
  EXPECT_EQ(p[0].layer, 1u);
  EXPECT_NEAR(p[0].loads[1], 2.0 / 3, 1e-15);
  EXPECT_EQ(p[1].loads[3], 1.0);

  nano::Model m = nano::model_from_weights(fixture::training_fixture(1).weights);
  nano::TrainOptions o;
  o.steps = 3;
  const nano::TrainLog log = nano::train_toy(m, o);
  std::stringstream csv;
  nano::write_train_log_csv(log, csv);
  const auto q = read_routing_csv(csv);
  ASSERT_EQ(q.size(), 1u);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(q[0].loads[j], log.steps.back().loads[j], 1e-12);

  std::istringstream bad("a,b,c\n");
  EXPECT_THROW((void)read_routing_csv(bad), Error);
  std::istringstream zero_based("layer,token,expert\n1,0,0\n");
  EXPECT_THROW((void)read_routing_csv(zero_based), Error);
}
