// d2m: command-line driver for the dense-to-MoE toolkit.
#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "d2m/config.hpp"
#include "d2m/cost_model.hpp"
#include "d2m/error.hpp"
#include "d2m/nanomodel.hpp"
#include "d2m/redundancy_search.hpp"
#include "d2m/route_diagnostics.hpp"
#include "d2m/similarity.hpp"
#include "d2m/surgery.hpp"
#include "d2m/trace_io.hpp"
#include "d2m/tradeoff.hpp"
#include "d2m/training.hpp"
#include "d2m/weights.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;
constexpr int kExitInternal = 4;

// Thrown for bad user input detected by the driver itself.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require_file(const std::string& path) {
  if (!fs::is_regular_file(path)) throw UsageError("input file not found: " + path);
}

std::ofstream open_out(const std::string& path) {
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  std::ofstream out(path, std::ios::binary);
  if (!out) d2m::fail(d2m::ErrorCode::IoFailure, "cannot open '" + path + "' for writing");
  return out;
}

std::ifstream open_in(const std::string& path) {
  require_file(path);
  std::ifstream in(path, std::ios::binary);
  if (!in) d2m::fail(d2m::ErrorCode::IoFailure, "cannot open '" + path + "'");
  return in;
}

void write_json(const json& j, const std::string& path) {
  std::ofstream out = open_out(path);
  out << j.dump(2) << '\n';
  if (!out) d2m::fail(d2m::ErrorCode::IoFailure, "failed writing '" + path + "'");
}

json read_json(const std::string& path) {
  std::ifstream in = open_in(path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError("malformed JSON in " + path + ": " + e.what());
  }
}

// SHA-256 of the file bytes, hex encoded.
std::string file_hash(const std::string& path) {
  std::ifstream in = open_in(path);
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256 init failed");
  }
  std::vector<char> buf(1 << 16);
  while (in.read(buf.data(), static_cast<std::streamsize>(buf.size())) || in.gcount() > 0) {
    EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &len);
  std::ostringstream s;
  for (unsigned int i = 0; i < len; ++i) {
    s << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  }
  return s.str();
}

std::string fixed4(double v) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(4) << v;
  return s.str();
}

std::string fmt(double v, int precision = 6) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

// ---- presets ---------------------------------------------------------------

d2m::ModelShape toy_preset() {
  d2m::ModelShape s;
  s.num_layers = 8;
  s.hidden_dim = 32;
  s.mlp_dim = 64;
  s.num_heads = 4;
  s.num_kv_heads = 2;
  s.head_dim = 8;
  s.vocab_size = 64;
  return s;
}

d2m::ModelShape preset(const std::string& name) {
  if (name == "toy") return toy_preset();
  if (name == "qwen2.5-0.5b") return d2m::qwen25_05b_shape();
  throw UsageError("unknown preset '" + name + "' (expected toy or qwen2.5-0.5b)");
}

std::vector<d2m::RedundancySpec> parse_redundancy(const std::vector<std::string>& items) {
  std::vector<d2m::RedundancySpec> out;
  for (const std::string& item : items) {
    d2m::RedundancySpec r;
    char c1 = 0, c2 = 0;
    std::istringstream s(item);
    if (!(s >> r.base >> c1 >> r.offset >> c2 >> r.noise_scale) || c1 != ':' || c2 != ':' ||
        !(s >> std::ws).eof()) {
      throw UsageError("bad --redundant '" + item + "' (expected base:offset:noise)");
    }
    out.push_back(r);
  }
  return out;
}

// ---- stages ----------------------------------------------------------------

struct SynthArgs {
  std::uint32_t layers = 24, seq_len = 64, dim = 32;
  std::vector<std::string> redundant;
  std::uint64_t seed = 0;
  std::string out;
};

void cmd_synth_trace(const SynthArgs& a) {
  const d2m::ActivationTrace t =
      d2m::synth_trace(a.layers, a.seq_len, a.dim, parse_redundancy(a.redundant), a.seed);
  d2m::write_trace_file(t, a.out);
  std::cout << "wrote " << a.out << " (L=" << a.layers << ", T=" << a.seq_len << ", d=" << a.dim
            << ")\n";
}

struct InitArgs {
  std::string preset = "toy", config, out;
  std::uint32_t layers = 0;
  std::uint64_t seed = 0;
  double stddev = 0.02;
};

void cmd_init_model(const InitArgs& a) {
  d2m::ModelShape shape = a.config.empty() ? preset(a.preset)
                                           : d2m::load_run_config(a.config).model;
  if (a.layers != 0) shape.num_layers = a.layers;
  const d2m::WeightContainer w = d2m::init_weights(shape, a.seed, a.stddev);
  d2m::write_weights_file(w, a.out);
  std::cout << "wrote " << a.out << " (" << w.parameter_count() << " parameters)\n";
}

struct TraceArgs {
  std::string model, out;
  std::uint32_t seq_len = 64;
  std::uint64_t seed = 0;
};

void cmd_trace(const TraceArgs& a) {
  require_file(a.model);
  const d2m::WeightContainer w = d2m::read_weights_file(a.model);
  const d2m::nano::Model m = d2m::nano::model_from_weights(w);
  std::mt19937_64 rng(a.seed);
  std::uniform_int_distribution<std::uint32_t> tok(0, w.shape.vocab_size - 1);
  std::vector<std::uint32_t> tokens(a.seq_len);
  for (auto& t : tokens) t = tok(rng);
  const d2m::nano::ForwardResult r = d2m::nano::forward(m, d2m::nano::embed_tokens(m, tokens));
  d2m::write_trace_file(r.trace, a.out);
  std::cout << "wrote " << a.out << " (L=" << r.trace.num_layers << ", T=" << a.seq_len << ")\n";
}

struct AnalyzeArgs {
  std::string trace, out_dir;
  unsigned jobs = 1;
};

void cmd_analyze(const AnalyzeArgs& a) {
  require_file(a.trace);
  const d2m::ActivationTrace t = d2m::read_trace_file(a.trace);
  const d2m::SimilarityMatrices m = d2m::build_matrices(t, a.jobs);
  fs::create_directories(a.out_dir);
  d2m::export_heatmap(m, a.out_dir);
  d2m::write_matrices_file(m, (fs::path(a.out_dir) / "matrices.bin").string());
  std::cout << "wrote heatmaps and matrices.bin for " << m.num_layers() << " layers to "
            << a.out_dir << '\n';
}

struct SearchArgs {
  std::string matrices, out;
  double delta = 0.05, epsilon = 0.1, lambda = 1.0;
  std::vector<std::uint32_t> block_sizes{1, 2, 3};
  std::vector<double> sweep_deltas, sweep_epsilons;
  std::uint32_t target_kept = 0;
  unsigned jobs = 1;
};

void cmd_search(const SearchArgs& a) {
  require_file(a.matrices);
  const d2m::SimilarityMatrices m = d2m::read_matrices_file(a.matrices);
  const bool sweep = !a.sweep_deltas.empty() || !a.sweep_epsilons.empty();
  if (sweep != (!a.sweep_deltas.empty() && !a.sweep_epsilons.empty())) {
    throw UsageError("--sweep-deltas and --sweep-epsilons must be given together");
  }
  if (a.target_kept != 0 && !sweep) throw UsageError("--target-kept requires sweep grids");
  if (!sweep) {
    d2m::SearchThresholds th;
    th.cos_threshold = a.delta;
    th.norm_tolerance = a.epsilon;
    th.score_penalty = a.lambda;
    th.block_sizes = a.block_sizes;
    d2m::validate_thresholds(th);
    const d2m::FusionPlan plan = d2m::search(m, th);
    write_json(json(plan), a.out);
    std::cout << "kept " << plan.keep.size() << " of " << plan.num_layers << " layers; wrote "
              << a.out << '\n';
    return;
  }
  const d2m::SweepResult s =
      d2m::threshold_sweep(m, a.sweep_deltas, a.sweep_epsilons, a.lambda, a.block_sizes, a.jobs);
  if (a.target_kept == 0) {
    std::ofstream out = open_out(a.out);
    d2m::write_sweep_csv(s, out);
    std::cout << "wrote " << s.cells.size() << " sweep cells to " << a.out << '\n';
    return;
  }
  const d2m::DepthSelection sel = d2m::plan_from_depth(s, a.target_kept);
  write_json(json(sel.plan), a.out);
  std::cout << "delta=" << fmt(sel.delta) << " epsilon=" << fmt(sel.epsilon) << " kept "
            << sel.plan.keep.size() << "; wrote " << a.out << '\n';
}

struct FuseArgs {
  std::string model, plan, out, provenance;
  std::uint32_t base_copies = 4, supp_copies = 2, top_k = 1;
};

void cmd_fuse(const FuseArgs& a) {
  require_file(a.model);
  const d2m::WeightContainer dense = d2m::read_weights_file(a.model);
  d2m::FusionPlan plan;
  try {
    plan = read_json(a.plan).get<d2m::FusionPlan>();
  } catch (const json::exception& e) {
    throw UsageError("malformed plan " + a.plan + ": " + e.what());
  }
  d2m::FusionOptions o;
  o.base_copies = a.base_copies;
  o.supplementary_copies = a.supp_copies;
  o.top_k = a.top_k;
  const d2m::FusedModel f = d2m::fuse(dense, plan, o);
  d2m::verify_fusion(dense, f.weights, plan, f.provenance);
  d2m::write_weights_file(f.weights, a.out);
  const std::string prov = a.provenance.empty() ? a.out + ".provenance.json" : a.provenance;
  write_json(d2m::provenance_to_json(f.provenance), prov);
  std::cout << "wrote " << a.out << " (" << f.weights.parameter_count()
            << " parameters, verified) and " << prov << '\n';
}

struct EstimateArgs {
  std::string config, out;
  std::vector<std::uint32_t> layers, experts;
  std::uint32_t top_k = 1;
};

json cmd_estimate(const EstimateArgs& a) {
  const d2m::RunConfig cfg = d2m::load_run_config(a.config);
  std::vector<d2m::cost::Evaluation> evals;
  if (a.layers.empty() && a.experts.empty()) {
    evals.push_back(d2m::cost::evaluate("config", cfg.model, cfg.hardware, cfg.workload));
  } else {
    const std::vector<std::uint32_t> Ls =
        a.layers.empty() ? std::vector<std::uint32_t>{cfg.model.num_layers} : a.layers;
    for (std::uint32_t L : Ls) {
      if (a.experts.empty()) {
        d2m::ModelShape s = cfg.model;
        s.num_layers = L;
        s.layer_experts.clear();
        evals.push_back(d2m::cost::evaluate("L" + std::to_string(L), s, cfg.hardware, cfg.workload));
        continue;
      }
      for (std::uint32_t N : a.experts) {
        d2m::ModelShape s = cfg.model;
        s.num_layers = L;
        s.layer_experts.clear();
        s.moe = d2m::MoEShape{N, a.top_k, 1, 1};
        evals.push_back(d2m::cost::evaluate("L" + std::to_string(L) + "N" + std::to_string(N), s,
                                            cfg.hardware, cfg.workload));
      }
    }
  }
  json j = json::array();
  for (const auto& e : evals) j.push_back(d2m::cost::to_json(e));
  if (j.size() == 1) j = j[0];
  if (a.out.empty()) {
    std::cout << j.dump(2) << '\n';
  } else {
    write_json(j, a.out);
    std::cout << "wrote " << evals.size() << " evaluation(s) to " << a.out << '\n';
  }
  return j;
}

struct ParetoArgs {
  std::string candidates, out, frontier;
  double base_latency = 0.0;
  std::optional<double> w;
  std::vector<double> calibrate;
};

void cmd_pareto(const ParetoArgs& a) {
  double w = 0.0;
  if (a.w && !a.calibrate.empty()) throw UsageError("give either --w or --calibrate, not both");
  if (a.w) {
    w = *a.w;
  } else if (a.calibrate.size() == 2) {
    w = d2m::tradeoff::calibrate_w(a.calibrate[0], a.calibrate[1]);
  } else {
    throw UsageError("one of --w or --calibrate FACTOR GAIN is required");
  }
  std::ifstream in = open_in(a.candidates);
  const d2m::tradeoff::Ranking r = d2m::tradeoff::evaluate_candidates(
      d2m::tradeoff::read_candidates_csv(in), a.base_latency, w);
  {
    std::ofstream out = open_out(a.out);
    out << "# w=" << fixed4(w) << " base_latency_ms=" << fmt(a.base_latency) << '\n';
    d2m::tradeoff::write_candidates_csv(r.candidates, out);
  }
  const std::string frontier_path = a.frontier.empty() ? a.out + ".frontier.csv" : a.frontier;
  {
    std::ofstream out = open_out(frontier_path);
    d2m::tradeoff::write_candidates_csv(d2m::tradeoff::pareto_frontier(r.candidates), out);
  }
  const auto& best = r.candidates[r.best];
  std::cout << "w=" << fixed4(w) << '\n'
            << "best=" << best.config_id << " depth=" << best.depth
            << " reward=" << fmt(*best.reward) << '\n';
}

struct DiagnoseArgs {
  std::string log, out, layers_out;
  std::uint32_t experts = 0;
};

void cmd_diagnose(const DiagnoseArgs& a) {
  std::ifstream in = open_in(a.log);
  const auto profiles = d2m::diag::read_routing_csv(in, a.experts);
  const d2m::diag::WtaSummary s = d2m::diag::wta_metrics(profiles);
  {
    std::ofstream out = open_out(a.out);
    d2m::diag::write_summary_csv(s, out);
  }
  if (!a.layers_out.empty()) {
    std::ofstream out = open_out(a.layers_out);
    d2m::diag::write_layer_csv(profiles, out);
  }
  std::cout << "mean_top_expert_load=" << fmt(s.mean_top_load)
            << " mean_entropy=" << fmt(s.mean_entropy) << "; wrote " << a.out << '\n';
}

struct TrainArgs {
  std::string model, log, out_model, routing;
  d2m::nano::TrainOptions opts;
};

void cmd_train_toy(const TrainArgs& a) {
  require_file(a.model);
  const d2m::WeightContainer w = d2m::read_weights_file(a.model);
  d2m::RouterConfig rc;
  rc.aux_loss_weight = a.opts.alpha;
  d2m::nano::Model m = d2m::nano::model_from_weights(w, rc);
  const d2m::nano::TrainLog log = d2m::nano::train_toy(m, a.opts);
  {
    std::ofstream out = open_out(a.log);
    d2m::nano::write_train_log_csv(log, out);
  }
  if (!a.routing.empty()) {
    std::ofstream out = open_out(a.routing);
    d2m::nano::write_routing_csv(log.final_routing, out);
  }
  if (!a.out_model.empty()) d2m::write_weights_file(d2m::nano::model_to_weights(m), a.out_model);
  const auto& last = log.steps.back();
  std::cout << "step " << last.step << " task_loss=" << fmt(last.task_loss)
            << " lb_loss=" << fmt(last.lb_loss) << "; wrote " << a.log << '\n';
}

// ---- pipeline --------------------------------------------------------------

class Manifest {
 public:
  explicit Manifest(fs::path dir) : dir_(std::move(dir)) {}

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  // Checks that every input exists and still has the hash recorded when produced.
  void begin(const std::string& stage, const std::vector<std::string>& inputs) {
    json& s = stages_[stage];
    s["inputs"] = json::object();
    for (const std::string& in : inputs) {
      const std::string p = path(in);
      if (!fs::is_regular_file(p)) d2m::fail(d2m::ErrorCode::IoFailure, stage + ": missing " + in);
      const std::string h = file_hash(p);
      auto it = hashes_.find(in);
      if (it != hashes_.end() && it->second != h) {
        throw std::logic_error(stage + ": input " + in + " changed since it was produced");
      }
      s["inputs"][in] = h;
    }
    order_.push_back(stage);
  }

  void produced(const std::string& stage, const std::vector<std::string>& outputs) {
    json& s = stages_[stage];
    s["outputs"] = json::object();
    for (const std::string& out : outputs) {
      const std::string h = file_hash(path(out));
      hashes_[out] = h;
      s["outputs"][out] = h;
    }
  }

  void write(const json& config) const {
    json j;
    j["config"] = config;
    j["stages"] = json::array();
    for (const std::string& name : order_) {
      json s = stages_.at(name);
      s["name"] = name;
      j["stages"].push_back(s);
    }
    write_json(j, path("manifest.json"));
  }

 private:
  fs::path dir_;
  std::map<std::string, json> stages_;
  std::map<std::string, std::string> hashes_;
  std::vector<std::string> order_;
};

struct PipelineArgs {
  std::string out_dir;
  std::uint64_t seed = 0;
  std::uint32_t layers = 8, base_copies = 2, supp_copies = 2, steps = 200;
  double delta = 0.05, epsilon = 0.1;
  unsigned jobs = 1;
};

void cmd_pipeline(const PipelineArgs& a) {
  fs::create_directories(a.out_dir);
  Manifest mf(a.out_dir);
  json config = {{"seed", a.seed},         {"layers", a.layers}, {"base_copies", a.base_copies},
                 {"supp_copies", a.supp_copies}, {"steps", a.steps}, {"delta", a.delta},
                 {"epsilon", a.epsilon}};

  mf.begin("init-model", {});
  d2m::ModelShape shape = toy_preset();
  shape.num_layers = a.layers;
  cmd_init_model({"toy", "", mf.path("dense.d2mw"), a.layers, a.seed, 0.02});
  mf.produced("init-model", {"dense.d2mw"});

  mf.begin("trace", {"dense.d2mw"});
  cmd_trace({mf.path("dense.d2mw"), mf.path("trace.d2mt"), 64, a.seed});
  mf.produced("trace", {"trace.d2mt"});

  mf.begin("analyze", {"trace.d2mt"});
  cmd_analyze({mf.path("trace.d2mt"), mf.path("analysis"), a.jobs});
  mf.produced("analyze", {"analysis/matrices.bin", "analysis/s_out.csv", "analysis/s_mlp.csv",
                          "analysis/delta_norm.csv"});

  mf.begin("search", {"analysis/matrices.bin"});
  SearchArgs sa;
  sa.matrices = mf.path("analysis/matrices.bin");
  sa.out = mf.path("plan.json");
  sa.delta = a.delta;
  sa.epsilon = a.epsilon;
  cmd_search(sa);
  mf.produced("search", {"plan.json"});

  mf.begin("fuse", {"dense.d2mw", "plan.json"});
  cmd_fuse({mf.path("dense.d2mw"), mf.path("plan.json"), mf.path("fused.d2mw"),
            mf.path("provenance.json"), a.base_copies, a.supp_copies, 1});
  mf.produced("fuse", {"fused.d2mw", "provenance.json"});

  mf.begin("estimate", {"fused.d2mw"});
  {
    d2m::RunConfig rc;
    rc.model = d2m::read_weights_file(mf.path("fused.d2mw")).shape;
    rc.hardware = d2m::thor_u_profile();
    write_json(d2m::run_config_to_json(rc), mf.path("estimate_config.json"));
    cmd_estimate({mf.path("estimate_config.json"), mf.path("estimate.json"), {}, {}, 1});
  }
  mf.produced("estimate", {"estimate_config.json", "estimate.json"});

  const bool has_moe = d2m::read_weights_file(mf.path("fused.d2mw")).shape.is_moe();
  if (has_moe) {
    mf.begin("train-toy", {"fused.d2mw"});
    TrainArgs ta;
    ta.model = mf.path("fused.d2mw");
    ta.log = mf.path("train_log.csv");
    ta.out_model = mf.path("trained.d2mw");
    ta.routing = mf.path("routing.csv");
    ta.opts.steps = a.steps;
    ta.opts.seed = a.seed;
    cmd_train_toy(ta);
    mf.produced("train-toy", {"train_log.csv", "trained.d2mw", "routing.csv"});

    mf.begin("diagnose", {"routing.csv"});
    cmd_diagnose({mf.path("routing.csv"), mf.path("wta_summary.csv"), mf.path("wta_layers.csv"), 0});
    mf.produced("diagnose", {"wta_summary.csv", "wta_layers.csv"});
  } else {
    std::cout << "plan fused no layers; skipping train-toy and diagnose\n";
  }
  mf.write(config);
  std::cout << "wrote " << mf.path("manifest.json") << '\n';
}

int exit_code_for(d2m::ErrorCode code) {
  switch (code) {
    case d2m::ErrorCode::IoFailure:
      return kExitIo;
    case d2m::ErrorCode::VerificationFailure:
    case d2m::ErrorCode::NonFiniteGradient:
      return kExitInternal;
    default:
      return kExitUsage;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"d2m: dense-to-MoE layer surgery toolkit"};
  app.require_subcommand(1);
  std::function<void()> action;

  SynthArgs synth;
  auto* c = app.add_subcommand("synth-trace", "Write a synthetic activation trace");
  c->add_option("--layers", synth.layers, "number of layers")->capture_default_str();
  c->add_option("--seq-len", synth.seq_len, "tokens per layer")->capture_default_str();
  c->add_option("--dim", synth.dim, "hidden size")->capture_default_str();
  c->add_option("--redundant", synth.redundant, "base:offset:noise, repeatable");
  c->add_option("--seed", synth.seed)->capture_default_str();
  c->add_option("-o,--out", synth.out, "output trace")->required();
  c->callback([&] { action = [&] { cmd_synth_trace(synth); }; });

  InitArgs init;
  c = app.add_subcommand("init-model", "Write a randomly initialized dense model");
  c->add_option("--preset", init.preset, "toy or qwen2.5-0.5b")->capture_default_str();
  c->add_option("--config", init.config, "run config JSON (model section)");
  c->add_option("--layers", init.layers, "override depth");
  c->add_option("--std", init.stddev, "init standard deviation")->capture_default_str();
  c->add_option("--seed", init.seed)->capture_default_str();
  c->add_option("-o,--out", init.out, "output weights")->required();
  c->callback([&] { action = [&] { cmd_init_model(init); }; });

  TraceArgs trace;
  c = app.add_subcommand("trace", "Run a model on seeded random tokens and dump activations");
  c->add_option("--model", trace.model)->required();
  c->add_option("--seq-len", trace.seq_len)->capture_default_str();
  c->add_option("--seed", trace.seed)->capture_default_str();
  c->add_option("-o,--out", trace.out)->required();
  c->callback([&] { action = [&] { cmd_trace(trace); }; });

  AnalyzeArgs analyze;
  c = app.add_subcommand("analyze", "Build similarity matrices and heatmap CSVs from a trace");
  c->add_option("trace", analyze.trace)->required();
  c->add_option("--out", analyze.out_dir, "output directory")->required();
  c->add_option("--jobs", analyze.jobs)->capture_default_str();
  c->callback([&] { action = [&] { cmd_analyze(analyze); }; });

  SearchArgs search;
  c = app.add_subcommand("search", "Greedy redundancy search, threshold sweep or depth targeting");
  c->add_option("matrices", search.matrices, "matrices.bin from analyze")->required();
  c->add_option("--delta", search.delta)->capture_default_str();
  c->add_option("--epsilon", search.epsilon)->capture_default_str();
  c->add_option("--lambda", search.lambda)->capture_default_str();
  c->add_option("--block-sizes", search.block_sizes)->delimiter(',')->capture_default_str();
  c->add_option("--sweep-deltas", search.sweep_deltas)->delimiter(',');
  c->add_option("--sweep-epsilons", search.sweep_epsilons)->delimiter(',');
  c->add_option("--target-kept", search.target_kept, "pick the sweep cell keeping this many");
  c->add_option("--jobs", search.jobs)->capture_default_str();
  c->add_option("-o,--out", search.out, "plan JSON or sweep CSV")->required();
  c->callback([&] { action = [&] { cmd_search(search); }; });

  FuseArgs fuse;
  c = app.add_subcommand("fuse", "Apply a fusion plan to a dense model");
  c->add_option("--model", fuse.model)->required();
  c->add_option("--plan", fuse.plan)->required();
  c->add_option("--base-copies", fuse.base_copies)->capture_default_str();
  c->add_option("--supp-copies", fuse.supp_copies)->capture_default_str();
  c->add_option("--top-k", fuse.top_k)->capture_default_str();
  c->add_option("--provenance", fuse.provenance, "default: <out>.provenance.json");
  c->add_option("-o,--out", fuse.out)->required();
  c->callback([&] { action = [&] { cmd_fuse(fuse); }; });

  EstimateArgs estimate;
  c = app.add_subcommand("estimate", "Roofline latency and memory for a run config");
  c->add_option("--config", estimate.config)->required();
  c->add_option("--layers", estimate.layers, "depth sweep")->delimiter(',');
  c->add_option("--experts", estimate.experts, "expert-count sweep")->delimiter(',');
  c->add_option("--top-k", estimate.top_k)->capture_default_str();
  c->add_option("-o,--out", estimate.out, "default: stdout");
  c->callback([&] { action = [&] { (void)cmd_estimate(estimate); }; });

  ParetoArgs pareto;
  c = app.add_subcommand("pareto", "Score candidates by reward and extract the Pareto frontier");
  c->add_option("candidates", pareto.candidates, "config_id,depth,latency_ms,score CSV")
      ->required();
  c->add_option("--base-latency", pareto.base_latency, "ms")->required();
  c->add_option("--w", pareto.w, "latency exponent");
  c->add_option("--calibrate", pareto.calibrate, "FACTOR GAIN")->expected(2);
  c->add_option("-o,--out", pareto.out)->required();
  c->add_option("--frontier", pareto.frontier, "default: <out>.frontier.csv");
  c->callback([&] { action = [&] { cmd_pareto(pareto); }; });

  DiagnoseArgs diagnose;
  c = app.add_subcommand("diagnose", "Winner-take-all summary of a routing or training log");
  c->add_option("log", diagnose.log)->required();
  c->add_option("--experts", diagnose.experts, "expert count for layer,token,expert logs");
  c->add_option("--layers-out", diagnose.layers_out, "per-layer CSV");
  c->add_option("-o,--out", diagnose.out)->required();
  c->callback([&] { action = [&] { cmd_diagnose(diagnose); }; });

  TrainArgs train;
  c = app.add_subcommand("train-toy", "Train routers and experts of a fused toy model");
  c->add_option("--model", train.model)->required();
  c->add_option("--steps", train.opts.steps)->capture_default_str();
  c->add_option("--lr", train.opts.lr)->capture_default_str();
  c->add_option("--alpha", train.opts.alpha)->capture_default_str();
  c->add_option("--seq-len", train.opts.seq_len)->capture_default_str();
  c->add_option("--seed", train.opts.seed)->capture_default_str();
  c->add_option("--log", train.log)->required();
  c->add_option("--routing", train.routing, "final layer,token,expert CSV");
  c->add_option("-o,--out", train.out_model, "trained weights");
  c->callback([&] { action = [&] { cmd_train_toy(train); }; });

  PipelineArgs pipe;
  c = app.add_subcommand("pipeline", "Run every stage on a toy model into one directory");
  c->add_option("--out", pipe.out_dir)->required();
  c->add_option("--seed", pipe.seed)->capture_default_str();
  c->add_option("--layers", pipe.layers)->capture_default_str();
  c->add_option("--base-copies", pipe.base_copies)->capture_default_str();
  c->add_option("--supp-copies", pipe.supp_copies)->capture_default_str();
  c->add_option("--steps", pipe.steps)->capture_default_str();
  c->add_option("--delta", pipe.delta)->capture_default_str();
  c->add_option("--epsilon", pipe.epsilon)->capture_default_str();
  c->add_option("--jobs", pipe.jobs)->capture_default_str();
  c->callback([&] { action = [&] { cmd_pipeline(pipe); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    action();
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const d2m::Error& e) {
    std::cerr << "error [" << d2m::to_string(e.code()) << "]: " << e.what() << '\n';
    return exit_code_for(e.code());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
  return kExitOk;
}
