// Acceptance suite: one PASS/FAIL line per criterion.
#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "d2m/cost_model.hpp"
#include "d2m/error.hpp"
#include "d2m/gradients.hpp"
#include "d2m/redundancy_search.hpp"
#include "d2m/route_diagnostics.hpp"
#include "d2m/similarity.hpp"
#include "d2m/surgery.hpp"
#include "d2m/trace_io.hpp"
#include "d2m/tradeoff.hpp"
#include "d2m/training.hpp"
#include "d2m/weights.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace d2m;

namespace {

// Collects failed expectations; the first one is reported.
class Checks {
 public:
  void expect(bool ok, const std::string& what) {
    if (!ok) failures_.push_back(what);
  }
  void near(double got, double want, double tol, const std::string& what) {
    std::ostringstream s;
    s << what << ": got " << got << ", want " << want << " +- " << tol;
    expect(std::abs(got - want) <= tol, s.str());
  }
  [[nodiscard]] const std::vector<std::string>& failures() const { return failures_; }

 private:
  std::vector<std::string> failures_;
};

ModelShape qwen_moe(std::uint32_t L, std::uint32_t N, std::uint32_t k = 1) {
  ModelShape s = qwen25_05b_shape();
  s.num_layers = L;
  s.moe = MoEShape{N, k, 1, 1};
  return s;
}

void reward_reproduction(Checks& c) {
  const auto r = tradeoff::evaluate_candidates(fixture::depth_candidates(), fixture::kBaseLatencyMs, -0.15);
  for (std::size_t i = 0; i < r.candidates.size(); ++i) {
    c.near(*r.candidates[i].reward, fixture::kExpectedRewards[i], 0.02,
           "reward of " + r.candidates[i].config_id);
  }
  c.expect(r.candidates.size() == 6, "six rows");
  c.expect(r.candidates[r.best].depth == 19, "argmax depth is 19");
}

void calibration(Checks& c) {
  const double w = tradeoff::calibrate_w(2, 1.11);
  c.expect(w >= -0.1516 && w <= -0.1496, "calibrate_w(2, 1.11) in [-0.1516, -0.1496]");
  c.near(w, -std::log(1.11) / std::log(2.0), 1e-12, "closed form");
}

void memory_formula(Checks& c) {
  const auto m6 = cost::static_memory(qwen_moe(19, 6));
  c.near(static_cast<double>(m6.parameters), 1.66e9, 1.66e9 * 0.006, "params L19 N6");
  c.near(m6.gigabytes(), 3.32, 0.01, "GB L19 N6");
  c.near(cost::static_memory(qwen_moe(19, 10)).gigabytes(), 5.31, 0.01, "GB L19 N10");
  c.near(static_cast<double>(cost::active_params(qwen_moe(19, 6))), 0.42e9, 0.01e9, "active MoE");
  c.near(static_cast<double>(cost::active_params(qwen25_05b_shape())), 0.50e9, 0.01e9,
         "active dense");
  // Hand count: V d + L (attention + norms + router + N experts) + final norm.
  const std::uint64_t V = 151936, d = 896, dm = 4864, dh = 64;
  const std::uint64_t layer = 18 * dh * d + d * d + 2 * dh + 2 * d + 6 * d + 18 * d * dm;
  c.expect(m6.parameters == V * d + 19 * layer + d, "matches hand count");
}

void roofline(Checks& c) {
  const ModelShape s = qwen25_05b_shape();
  const HardwareProfile hw = thor_u_profile();
  const Workload wl;
  // Calculator evaluation of the prefill and decode formulas.
  const double xi_f = 4 + 4.0 / 7 + 6 * 4864.0 / 896;
  const double pre = 24.0 * 1000 * 896 * 896 * xi_f / 350e12;
  const double xi_w = 2 + 2.0 / 7 + 3 * 4864.0 / 896;
  const double dec = 24.0 * 50 * (xi_w * 896 * 896 * 2 + 2 * 1025.5 * 896 * 2 / 7.0) / 273e9;
  const double got_pre = cost::prefill_latency(s, hw, wl);
  const double got_dec = cost::decode_latency(s, hw, wl);
  c.near(got_pre, pre, pre * 0.005, "prefill vs calculator");
  c.near(got_dec, dec, dec * 0.005, "decode vs calculator");
  c.near(got_pre * 1e3, 2.05, 2.05 * 0.005, "T_pre ms");
  c.near(got_dec * 1e3, 133.4, 133.4 * 0.005, "T_dec ms");

  const double per_layer = cost::total_latency(qwen_moe(1, 6), hw, wl).total_s;
  for (std::uint32_t L = 1; L <= 24; ++L) {
    c.near(cost::total_latency(qwen_moe(L, 6), hw, wl).total_s, L * per_layer,
           L * per_layer * 1e-14, "affine in L, L=" + std::to_string(L));
  }
  const double ref = cost::total_latency(qwen_moe(19, 2), hw, wl).total_s;
  for (std::uint32_t N : {6u, 10u, 60u}) {
    c.expect(cost::total_latency(qwen_moe(19, N), hw, wl).total_s == ref,
             "bit-identical latency at N=" + std::to_string(N));
  }
  c.expect(cost::total_latency(qwen_moe(19, 6), hw, wl).total_s <
               cost::total_latency(qwen_moe(24, 6), hw, wl).total_s,
           "T(19) < T(24)");
}

void search_correctness(Checks& c) {
  std::mt19937_64 rng(2025);
  std::uniform_real_distribution<double> th(0.02, 0.2);
  for (int i = 0; i < 200; ++i) {
    const auto L = static_cast<std::uint32_t>(2 + rng() % 9);
    const SimilarityMatrices m = fixture::random_matrices(L, rng);
    SearchThresholds t;
    t.cos_threshold = th(rng);
    t.norm_tolerance = th(rng);
    t.block_sizes = {1, 2, 3};
    const FusionPlan plan = search(m, t);
    try {
      validate_plan(plan);
    } catch (const Error& e) {
      c.expect(false, "plan invariants, case " + std::to_string(i) + ": " + e.what());
    }
    const auto want = oracle::greedy_blocks(oracle::to_grid(m.s_out), oracle::to_grid(m.s_mlp),
                                            oracle::to_grid(m.delta_norm), t.cos_threshold,
                                            t.norm_tolerance, t.score_penalty, t.block_sizes);
    bool same = plan.blocks.size() == want.size();
    for (std::size_t b = 0; same && b < want.size(); ++b) {
      same = plan.blocks[b].base == want[b].first && plan.blocks[b].redundant.size() == want[b].second;
    }
    c.expect(same, "reference simulation, case " + std::to_string(i));
  }

  const std::vector<double> deltas{0.0, 0.005, 0.01, 0.02, 0.03, 0.05, 0.08, 0.12};
  const std::vector<double> eps{0.0, 0.05, 0.1, 0.2, 0.3, 0.5};
  const std::vector<SimilarityMatrices> fixtures{
      build_matrices(synth_trace(24, 64, 32,
                                 {{13, 1, .45}, {15, 1, .4}, {16, 1, .35}, {17, 1, .3},
                                  {18, 1, .25}, {19, 1, .2}, {20, 1, .15}, {21, 1, .12},
                                  {22, 1, .1}, {23, 1, .08}},
                                 2024)),
      build_matrices(synth_trace(6, 32, 16, {{2, 1, 0.0}}, 1)),
      build_matrices(synth_trace(12, 32, 16, {{3, 2, 0.05}, {8, 1, 0.2}}, 9))};
  for (std::size_t f = 0; f < fixtures.size(); ++f) {
    const SweepResult s = threshold_sweep(fixtures[f], deltas, eps, 1.0, {1, 2, 3}, 4);
    for (std::size_t i = 0; i < deltas.size(); ++i) {
      for (std::size_t j = 0; j < eps.size(); ++j) {
        const std::string where = "fixture " + std::to_string(f) + " cell " +
                                  std::to_string(i) + "," + std::to_string(j);
        if (i + 1 < deltas.size()) {
          c.expect(s.at(i, j).pruned_count <= s.at(i + 1, j).pruned_count, "monotone delta " + where);
        }
        if (j + 1 < eps.size()) {
          c.expect(s.at(i, j).pruned_count <= s.at(i, j + 1).pruned_count, "monotone eps " + where);
        }
      }
    }
  }
}

void similarity_oracle(Checks& c) {
  std::mt19937_64 rng(606);
  for (int i = 0; i < 50; ++i) {
    const auto L = static_cast<std::uint32_t>(2 + rng() % 6);
    const auto T = static_cast<std::uint32_t>(1 + rng() % 12);
    const auto d = static_cast<std::uint32_t>(2 + rng() % 10);
    const ActivationTrace t = synth_trace(L, T, d, {}, rng());
    const SimilarityMatrices m = build_matrices(t);
    const oracle::SimTriple want = oracle::similarity(t);
    const double err = std::max({oracle::max_abs_diff(want.s_out, m.s_out),
                                 oracle::max_abs_diff(want.s_mlp, m.s_mlp),
                                 oracle::max_abs_diff(want.d_norm, m.delta_norm)});
    c.expect(err < 1e-9, "naive loop agreement, trace " + std::to_string(i));
  }
  const SimilarityMatrices dup = build_matrices(synth_trace(4, 8, 6, {{2, 1, 0.0}}, 3));
  c.expect(dup.out(2, 3) == 1.0 && dup.mlp(2, 3) == 1.0 && dup.norm(2, 3) == 0.0,
           "duplicate layer gives 1/1/0");
  std::mt19937_64 r2(3);
  const Matrix b = fixture::gaussian(4, 6, 1, r2);
  c.expect(norm_mismatch(2.0 * b, b) == 1.0, "scaling asymmetry 1.0");
  c.expect(norm_mismatch(b, 2.0 * b) == 0.5, "scaling asymmetry 0.5");
}

void fusion_equivalence(Checks& c) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const WeightContainer dense = fixture::dense_model(6, seed);
    const FusionPlan plan = make_plan(6, {FusedBlock{1, {2}}, FusedBlock{4, {5, 6}}});
    FusionOptions o;
    o.base_copies = 1 + seed % 4;
    o.supplementary_copies = 1 + seed % 2;
    const FusedModel f = fuse(dense, plan, o);
    std::mt19937_64 rng(seed);
    const double dev =
        functional_equivalence_check(dense, f.weights, plan, f.provenance,
                                     fixture::gaussian(5, 16, 1, rng));
    c.expect(dev < 1e-12, "equivalence deviation, seed " + std::to_string(seed));
    c.expect(inspect_fusion(dense, f.weights, plan, f.provenance).passed(),
             "verify passes, seed " + std::to_string(seed));
    c.expect(f.weights.parameter_count() == expected_fused_parameter_count(dense.shape, plan, o),
             "parameter accounting, seed " + std::to_string(seed));
    if (seed % 5 != 0) continue;
    for (const auto& [name, t] : f.weights.tensors) {
      WeightContainer bad = f.weights;
      bad.at(name).data.back() += 0.25;
      c.expect(!inspect_fusion(dense, bad, plan, f.provenance).passed(),
               "tampering detected: " + name);
    }
  }
}

nano::MoELayer grad_layer(std::uint32_t N, std::uint32_t k, std::uint64_t seed) {
  ModelShape s;
  s.num_layers = 1;
  s.hidden_dim = 8;
  s.mlp_dim = 16;
  s.num_heads = 2;
  s.num_kv_heads = 1;
  s.head_dim = 4;
  s.vocab_size = 4;
  s.moe = MoEShape{N, k, 1, 1};
  WeightContainer w = init_weights(s, seed, 0.3);
  std::mt19937_64 rng(seed);
  w.at("layer.1.router") = Tensor::from_matrix(fixture::gaussian(8, N, 0.7, rng));
  RouterConfig rc;
  rc.aux_loss_weight = 0.05;
  return nano::moe_layer_from_weights(w, 1, rc);
}

void gradient_correctness(Checks& c) {
  for (std::uint64_t i = 0; i < 10; ++i) {
    const auto N = static_cast<std::uint32_t>(2 + i % 4);
    const std::uint32_t k = i % 3 == 2 ? 2 : 1;
    const nano::MoELayer layer = grad_layer(N, k, 100 + i);
    std::mt19937_64 rng(200 + i);
    const nano::GradCheckReport r = nano::grad_check(layer, fixture::gaussian(6, 8, 1, rng), 1e-5);
    c.expect(r.max_relative_error < 1e-6,
             "grad check layer " + std::to_string(i) + ": " + std::to_string(r.max_relative_error));
    bool router = false, expert = false;
    for (const auto& t : r.tensors) {
      router = router || t.name == "router";
      expert = expert || t.name.rfind("expert.", 0) == 0;
    }
    c.expect(router && expert, "router and expert tensors covered");
  }
  // Three tokens at k=1 leave at least one of four experts idle.
  const nano::MoELayer layer = grad_layer(4, 1, 5);
  std::mt19937_64 rng(6);
  const Matrix x = fixture::gaussian(3, 8, 1, rng);
  const auto g = nano::moe_layer_gradients(layer, x, Matrix::Zero(3, 8), 0.0);
  std::vector<bool> used(4, false);
  for (Eigen::Index t = 0; t < 3; ++t) used[g.forward.routing.top1(t)] = true;
  for (std::uint32_t j = 0; j < 4; ++j) {
    if (used[j]) continue;
    const auto& e = g.grads.experts[j];
    c.expect(e.gate.isZero(0) && e.up.isZero(0) && e.down.isZero(0),
             "zero gradient on idle expert " + std::to_string(j));
  }
}

void routing_health(Checks& c) {
  nano::TrainOptions o;  // 500 steps, alpha 1e-3, seed 0
  nano::Model with = nano::model_from_weights(fixture::training_fixture(0).weights);
  const nano::TrainLog a = nano::train_toy(with, o);
  o.alpha = 0.0;
  nano::Model without = nano::model_from_weights(fixture::training_fixture(0).weights);
  const nano::TrainLog b = nano::train_toy(without, o);
  c.expect(a.steps.size() == 500, "500 logged steps");
  for (const auto& s : a.steps) {
    c.expect(std::isfinite(s.task_loss) && std::isfinite(s.lb_loss),
             "finite loss at step " + std::to_string(s.step));
  }
  const auto profiles = [](const nano::TrainLog& log) {
    std::vector<diag::LayerLoadProfile> out;
    for (const auto& r : log.final_routing) {
      out.push_back(diag::load_profile(r.top1, r.num_experts, r.layer));
    }
    return out;
  };
  const auto pa = profiles(a);
  for (const auto& p : pa) {
    for (double v : p.loads) c.expect(v >= 0.02, "final per-expert load >= 0.02: " + std::to_string(v));
  }
  const double top_a = diag::wta_metrics(pa).mean_top_load;
  const double top_b = diag::wta_metrics(profiles(b)).mean_top_load;
  c.expect(top_a < top_b, "balance loss lowers mean top load: " + std::to_string(top_a) +
                              " vs " + std::to_string(top_b));

  const auto t9 = diag::wta_metrics({diag::profile_from_loads({0.48, 0.2, 0.12, 0.1, 0.06, 0.04})});
  c.near(t9.mean_top_uniform_ratio, 2.88, 1e-12, "0.480 * 6 = 2.88");
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0, 1);
  for (int i = 0; i < 100; ++i) {
    std::vector<double> p(6);
    double s = 0;
    for (double& v : p) s += (v = u(rng));
    for (double& v : p) v /= s;
    const double h = diag::wta_metrics({diag::profile_from_loads(p)}).mean_entropy;
    c.expect(h >= 0 && h <= std::log(6.0) + 1e-12, "entropy within [0, ln 6]");
  }
  const auto one_hot = diag::wta_metrics({diag::profile_from_loads({0, 0, 1, 0, 0, 0})});
  c.expect(one_hot.mean_entropy == 0.0, "one-hot entropy 0");
  const auto uniform = diag::wta_metrics({diag::profile_from_loads(std::vector<double>(6, 1.0 / 6))});
  c.near(uniform.mean_entropy, std::log(6.0), 1e-12, "uniform entropy ln 6");
}

template <typename F>
ErrorCode read_code(const std::string& bytes, F&& reader) {
  std::istringstream in(bytes);
  try {
    (void)reader(in);
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::InvalidArgument;
}

void format_round_trips(Checks& c) {
  std::mt19937_64 rng(1010);
  for (int i = 0; i < 100; ++i) {
    const auto L = static_cast<std::uint32_t>(1 + rng() % 5);
    const auto T = static_cast<std::uint32_t>(1 + rng() % 9);
    const auto d = static_cast<std::uint32_t>(1 + rng() % 9);
    const ActivationTrace t = synth_trace(L, T, d, {}, rng());
    std::stringstream io;
    write_trace(t, io);
    const std::string bytes = io.str();
    const ActivationTrace back = read_trace(io);
    c.expect(back == t, "trace round trip " + std::to_string(i));
    std::ostringstream again;
    write_trace(back, again);
    c.expect(again.str() == bytes, "trace bytes stable " + std::to_string(i));
  }
  for (int i = 0; i < 100; ++i) {
    ModelShape s = fixture::toy_shape(static_cast<std::uint32_t>(1 + rng() % 3));
    if (rng() % 2) s.moe = MoEShape{static_cast<std::uint32_t>(1 + rng() % 4), 1, 1, 1};
    s.tied_embedding = rng() % 2;
    const WeightContainer w = init_weights(s, rng());
    std::stringstream io;
    write_weights(w, io);
    const std::string bytes = io.str();
    const WeightContainer back = read_weights(io);
    c.expect(back == w, "weights round trip " + std::to_string(i));
    std::ostringstream again;
    write_weights(back, again);
    c.expect(again.str() == bytes, "weights bytes stable " + std::to_string(i));
  }

  const auto trace_reader = [](std::istream& in) { return read_trace(in); };
  const auto weights_reader = [](std::istream& in) { return read_weights(in); };
  std::ostringstream t;
  write_trace(synth_trace(2, 3, 4, {}, 1), t);
  std::string tb = t.str();
  c.expect(read_code("XXXX" + tb.substr(4), trace_reader) == ErrorCode::BadMagic, "trace BadMagic");
  c.expect(read_code(tb.substr(0, tb.size() - 3), trace_reader) == ErrorCode::TruncatedPayload,
           "trace TruncatedPayload");
  std::string zero_d = tb;
  zero_d.replace(16, 4, std::string(4, '\0'));
  c.expect(read_code(zero_d, trace_reader) == ErrorCode::DimensionMismatch,
           "trace DimensionMismatch");

  WeightContainer w = init_weights(fixture::toy_shape(1), 3);
  std::ostringstream wo;
  write_weights(w, wo);
  const std::string wb = wo.str();
  c.expect(read_code("XXXX" + wb.substr(4), weights_reader) == ErrorCode::BadMagic,
           "weights BadMagic");
  c.expect(read_code(wb.substr(0, wb.size() - 1), weights_reader) == ErrorCode::TruncatedPayload,
           "weights TruncatedPayload");
  WeightContainer missing = w;
  missing.tensors.erase("layer.1.attn.q");
  c.expect(read_code(fixture::raw_weights(missing), weights_reader) == ErrorCode::MissingTensor,
           "weights MissingTensor");
  WeightContainer wrong = w;
  wrong.at("layer.1.mlp.up") = Tensor({16, 31});
  c.expect(read_code(fixture::raw_weights(wrong), weights_reader) == ErrorCode::DimensionMismatch,
           "weights DimensionMismatch");
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<void(Checks&)>>> criteria{
      {"Reward reproduction (six depth candidates, argmax L=19)", reward_reproduction},
      {"Calibration w from (2, 1.11)", calibration},
      {"Memory formula (1.66e9 / 3.32 GB / 5.31 GB, active params)", memory_formula},
      {"Roofline fidelity (2.05 ms / 133.4 ms, affine in L, flat in N)", roofline},
      {"Search correctness (200 random cases vs reference, monotone sweeps)", search_correctness},
      {"Similarity oracle (50 traces vs naive loop, identities)", similarity_oracle},
      {"Fusion equivalence (20 fixtures, tamper detection, accounting)", fusion_equivalence},
      {"Gradient correctness (10 layers, idle experts)", gradient_correctness},
      {"Routing health (toy training, WTA identities)", routing_health},
      {"Format round-trips (100 traces, 100 weight files, error taxonomy)", format_round_trips},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Checks c;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      criteria[i].second(c);
    } catch (const std::exception& e) {
      c.expect(false, std::string("unexpected exception: ") + e.what());
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool ok = c.failures().empty();
    failed += ok ? 0 : 1;
    std::cout << (ok ? "PASS" : "FAIL") << "  criterion " << (i + 1) << ": "
              << criteria[i].first << "  (" << std::fixed << std::setprecision(2) << secs
              << " s)";
    if (!ok) {
      std::cout << "  [" << c.failures().size() << " failed; first: " << c.failures().front()
                << "]";
    }
    std::cout << '\n';
  }
  std::cout << (failed == 0 ? "ALL CRITERIA PASSED" : std::to_string(failed) + " CRITERIA FAILED")
            << '\n';
  return failed == 0 ? 0 : 1;
}
