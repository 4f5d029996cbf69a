#include "d2m/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "d2m/error.hpp"

namespace d2m {

namespace {

using nlohmann::json;

void require_positive(std::uint32_t value, const char* field) {
  if (value == 0) {
    fail(ErrorCode::InvalidShape, std::string(field) + " must be positive");
  }
}

void reject_unknown_keys(const json& j, std::initializer_list<const char*> allowed,
                         const std::string& section) {
  if (!j.is_object()) {
    fail(ErrorCode::InvalidConfig, "section '" + section + "' must be a JSON object");
  }
  for (const auto& item : j.items()) {
    const bool known = std::any_of(allowed.begin(), allowed.end(),
                                   [&](const char* key) { return item.key() == key; });
    if (!known) {
      fail(ErrorCode::InvalidConfig, "unknown key '" + item.key() + "' in '" + section + "'");
    }
  }
}

template <typename T>
void read_required(const json& j, const char* key, T& out, const std::string& section) {
  if (!j.contains(key)) {
    fail(ErrorCode::InvalidConfig, "missing key '" + std::string(key) + "' in '" + section + "'");
  }
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    fail(ErrorCode::InvalidConfig, "bad value for '" + std::string(key) + "': " + e.what());
  }
}

template <typename T>
void read_optional(const json& j, const char* key, T& out, const std::string& section) {
  if (j.contains(key)) {
    read_required(j, key, out, section);
  }
}

// Counts must be non-negative integers; nlohmann silently wraps -1 into a
// huge unsigned value, so check the JSON type first.
void check_unsigned(const json& j, const char* key, const std::string& section) {
  if (j.contains(key) && !j.at(key).is_number_unsigned()) {
    fail(ErrorCode::InvalidConfig,
         "'" + std::string(key) + "' in '" + section + "' must be a non-negative integer");
  }
}

}  // namespace

std::uint32_t ModelShape::experts_in_layer(LayerIndex layer) const {
  if (layer == 0 || layer > num_layers) {
    fail(ErrorCode::IndexOutOfRange, "layer " + std::to_string(layer) + " outside 1.." +
                                         std::to_string(num_layers));
  }
  if (!layer_experts.empty()) {
    return layer_experts[layer - 1];
  }
  return moe ? moe->num_experts : 0;
}

const ModelShape& validate_shape(const ModelShape& shape) {
  require_positive(shape.num_layers, "num_layers");
  require_positive(shape.hidden_dim, "hidden_dim");
  require_positive(shape.mlp_dim, "mlp_dim");
  require_positive(shape.num_heads, "num_heads");
  require_positive(shape.num_kv_heads, "num_kv_heads");
  require_positive(shape.head_dim, "head_dim");
  require_positive(shape.vocab_size, "vocab_size");
  if (shape.num_heads % shape.num_kv_heads != 0) {
    fail(ErrorCode::InvalidShape, "num_heads (" + std::to_string(shape.num_heads) +
                                      ") not divisible by num_kv_heads (" +
                                      std::to_string(shape.num_kv_heads) + ")");
  }
  if (shape.moe) {
    const MoEShape& m = *shape.moe;
    require_positive(m.num_experts, "moe.num_experts");
    require_positive(m.top_k, "moe.top_k");
    require_positive(m.base_copies, "moe.base_copies");
    require_positive(m.supplementary_copies, "moe.supplementary_copies");
    if (m.top_k > m.num_experts) {
      fail(ErrorCode::InvalidShape, "moe.top_k (" + std::to_string(m.top_k) +
                                        ") exceeds moe.num_experts (" +
                                        std::to_string(m.num_experts) + ")");
    }
  }
  if (!shape.layer_experts.empty()) {
    if (shape.layer_experts.size() != shape.num_layers) {
      fail(ErrorCode::InvalidShape, "layer_experts has " +
                                        std::to_string(shape.layer_experts.size()) +
                                        " entries, expected num_layers");
    }
    for (std::size_t i = 0; i < shape.layer_experts.size(); ++i) {
      const std::uint32_t n = shape.layer_experts[i];
      if (n == 0) continue;
      if (!shape.moe) {
        fail(ErrorCode::InvalidShape, "layer_experts lists an MoE layer but moe is absent");
      }
      if (n < shape.moe->top_k) {
        fail(ErrorCode::InvalidShape, "layer " + std::to_string(i + 1) + " has " +
                                          std::to_string(n) + " experts, fewer than top_k");
      }
    }
  }
  return shape;
}

const HardwareProfile& validate_hardware(const HardwareProfile& hw) {
  const auto positive = [](double v) { return std::isfinite(v) && v > 0.0; };
  if (!positive(hw.peak_flops) || !positive(hw.mem_bandwidth) || !positive(hw.weight_bytes) ||
      !positive(hw.kv_bytes)) {
    fail(ErrorCode::InvalidConfig, "hardware profile values must be finite and positive");
  }
  return hw;
}

const Workload& validate_workload(const Workload& wl) {
  if (wl.batch == 0 || wl.prompt_len == 0 || wl.gen_len == 0) {
    fail(ErrorCode::InvalidConfig, "workload batch, prompt_len and gen_len must be >= 1");
  }
  return wl;
}

const SearchThresholds& validate_thresholds(const SearchThresholds& th) {
  const auto open_unit = [](double v) { return v > 0.0 && v < 1.0; };
  if (!open_unit(th.cos_threshold)) {
    fail(ErrorCode::InvalidConfig, "cos_threshold must lie in (0,1)");
  }
  if (!open_unit(th.norm_tolerance)) {
    fail(ErrorCode::InvalidConfig, "norm_tolerance must lie in (0,1)");
  }
  if (!(th.score_penalty >= 0.0) || !std::isfinite(th.score_penalty)) {
    fail(ErrorCode::InvalidConfig, "score_penalty must be finite and non-negative");
  }
  if (th.block_sizes.empty()) {
    fail(ErrorCode::InvalidConfig, "block_sizes must be non-empty");
  }
  if (std::find(th.block_sizes.begin(), th.block_sizes.end(), 0u) != th.block_sizes.end()) {
    fail(ErrorCode::InvalidConfig, "block_sizes must be positive");
  }
  return th;
}

const RouterConfig& validate_router(const RouterConfig& rc) {
  if (!(rc.temperature > 0.0) || !std::isfinite(rc.temperature)) {
    fail(ErrorCode::InvalidConfig, "router temperature must be positive");
  }
  if (!(rc.aux_loss_weight >= 0.0) || !std::isfinite(rc.aux_loss_weight)) {
    fail(ErrorCode::InvalidConfig, "aux_loss_weight must be non-negative");
  }
  return rc;
}

const FusionPlan& validate_plan(const FusionPlan& plan) {
  const std::uint32_t L = plan.num_layers;
  if (L == 0) {
    fail(ErrorCode::InvalidPlan, "plan has zero layers");
  }
  // 0 = unseen, 1 = keep, 2 = prune
  std::vector<int> role(L + 1, 0);
  for (LayerIndex l : plan.keep) {
    if (l == 0 || l > L) fail(ErrorCode::InvalidPlan, "keep index out of range");
    if (role[l] != 0) fail(ErrorCode::InvalidPlan, "layer listed twice: " + std::to_string(l));
    role[l] = 1;
  }
  for (LayerIndex l : plan.prune) {
    if (l == 0 || l > L) fail(ErrorCode::InvalidPlan, "prune index out of range");
    if (role[l] != 0) fail(ErrorCode::InvalidPlan, "layer listed twice: " + std::to_string(l));
    role[l] = 2;
  }
  for (LayerIndex l = 1; l <= L; ++l) {
    if (role[l] == 0) fail(ErrorCode::InvalidPlan, "layer not covered: " + std::to_string(l));
  }
  if (!std::is_sorted(plan.keep.begin(), plan.keep.end()) ||
      !std::is_sorted(plan.prune.begin(), plan.prune.end())) {
    fail(ErrorCode::InvalidPlan, "keep/prune lists must be ascending");
  }
  std::vector<bool> occupied(L + 1, false);
  std::size_t redundant_total = 0;
  for (const FusedBlock& b : plan.blocks) {
    if (b.redundant.empty()) fail(ErrorCode::InvalidPlan, "block with no redundant layers");
    if (b.base == 0 || b.base + b.redundant.size() > L) {
      fail(ErrorCode::InvalidPlan, "block at base " + std::to_string(b.base) + " out of range");
    }
    if (role[b.base] != 1) {
      fail(ErrorCode::InvalidPlan, "block base " + std::to_string(b.base) + " is not kept");
    }
    for (std::size_t i = 0; i <= b.redundant.size(); ++i) {
      const LayerIndex l = (i == 0) ? b.base : b.redundant[i - 1];
      if (i > 0 && l != b.base + i) {
        fail(ErrorCode::InvalidPlan, "redundant run of base " + std::to_string(b.base) +
                                         " is not contiguous");
      }
      if (occupied[l]) {
        fail(ErrorCode::InvalidPlan, "blocks overlap at layer " + std::to_string(l));
      }
      occupied[l] = true;
      if (i > 0 && role[l] != 2) {
        fail(ErrorCode::InvalidPlan, "redundant layer " + std::to_string(l) + " not pruned");
      }
    }
    redundant_total += b.redundant.size();
  }
  if (redundant_total != plan.prune.size()) {
    fail(ErrorCode::InvalidPlan, "pruned layer not covered by any block");
  }
  return plan;
}

std::uint32_t gqa_ratio(const ModelShape& shape) {
  validate_shape(shape);
  return shape.num_heads / shape.num_kv_heads;
}

ModelShape qwen25_05b_shape() {
  ModelShape s;
  s.num_layers = 24;
  s.hidden_dim = 896;
  s.mlp_dim = 4864;
  s.num_heads = 14;
  s.num_kv_heads = 2;
  s.head_dim = 64;
  s.vocab_size = 151936;
  s.tied_embedding = true;
  return s;
}

HardwareProfile thor_u_profile() {
  HardwareProfile hw;
  hw.peak_flops = 350e12;
  hw.mem_bandwidth = 273e9;
  hw.weight_bytes = 2.0;
  hw.kv_bytes = 2.0;
  return hw;
}

FusionPlan make_plan(std::uint32_t num_layers, std::vector<FusedBlock> blocks) {
  FusionPlan plan;
  plan.num_layers = num_layers;
  std::vector<bool> pruned(num_layers + 1, false);
  for (const FusedBlock& b : blocks) {
    for (LayerIndex l : b.redundant) {
      if (l == 0 || l > num_layers) fail(ErrorCode::InvalidPlan, "redundant index out of range");
      pruned[l] = true;
    }
  }
  for (LayerIndex l = 1; l <= num_layers; ++l) {
    (pruned[l] ? plan.prune : plan.keep).push_back(l);
  }
  plan.blocks = std::move(blocks);
  validate_plan(plan);
  return plan;
}

// --- JSON -------------------------------------------------------------------

void to_json(json& j, const MoEShape& v) {
  j = json{{"num_experts", v.num_experts},
           {"top_k", v.top_k},
           {"base_copies", v.base_copies},
           {"supplementary_copies", v.supplementary_copies}};
}

void from_json(const json& j, MoEShape& v) {
  const std::string s = "model.moe";
  reject_unknown_keys(j, {"num_experts", "top_k", "base_copies", "supplementary_copies"}, s);
  for (const char* key : {"num_experts", "top_k", "base_copies", "supplementary_copies"}) {
    check_unsigned(j, key, s);
  }
  read_required(j, "num_experts", v.num_experts, s);
  read_required(j, "top_k", v.top_k, s);
  read_optional(j, "base_copies", v.base_copies, s);
  read_optional(j, "supplementary_copies", v.supplementary_copies, s);
}

void to_json(json& j, const ModelShape& v) {
  j = json{{"num_layers", v.num_layers},     {"hidden_dim", v.hidden_dim},
           {"mlp_dim", v.mlp_dim},           {"num_heads", v.num_heads},
           {"num_kv_heads", v.num_kv_heads}, {"head_dim", v.head_dim},
           {"vocab_size", v.vocab_size},     {"tied_embedding", v.tied_embedding}};
  if (v.moe) j["moe"] = *v.moe;
  if (!v.layer_experts.empty()) j["layer_experts"] = v.layer_experts;
}

void from_json(const json& j, ModelShape& v) {
  const std::string s = "model";
  reject_unknown_keys(j,
                      {"num_layers", "hidden_dim", "mlp_dim", "num_heads", "num_kv_heads",
                       "head_dim", "vocab_size", "tied_embedding", "moe", "layer_experts"},
                      s);
  for (const char* key : {"num_layers", "hidden_dim", "mlp_dim", "num_heads", "num_kv_heads",
                          "head_dim", "vocab_size"}) {
    check_unsigned(j, key, s);
  }
  read_required(j, "num_layers", v.num_layers, s);
  read_required(j, "hidden_dim", v.hidden_dim, s);
  read_required(j, "mlp_dim", v.mlp_dim, s);
  read_required(j, "num_heads", v.num_heads, s);
  read_required(j, "num_kv_heads", v.num_kv_heads, s);
  read_required(j, "head_dim", v.head_dim, s);
  read_required(j, "vocab_size", v.vocab_size, s);
  read_optional(j, "tied_embedding", v.tied_embedding, s);
  if (j.contains("moe") && !j.at("moe").is_null()) {
    v.moe = j.at("moe").get<MoEShape>();
  } else {
    v.moe.reset();
  }
  v.layer_experts.clear();
  read_optional(j, "layer_experts", v.layer_experts, s);
}

void to_json(json& j, const HardwareProfile& v) {
  j = json{{"peak_flops", v.peak_flops},
           {"mem_bandwidth", v.mem_bandwidth},
           {"weight_bytes", v.weight_bytes},
           {"kv_bytes", v.kv_bytes}};
}

void from_json(const json& j, HardwareProfile& v) {
  const std::string s = "hardware";
  reject_unknown_keys(j, {"peak_flops", "mem_bandwidth", "weight_bytes", "kv_bytes"}, s);
  read_required(j, "peak_flops", v.peak_flops, s);
  read_required(j, "mem_bandwidth", v.mem_bandwidth, s);
  read_optional(j, "weight_bytes", v.weight_bytes, s);
  read_optional(j, "kv_bytes", v.kv_bytes, s);
}

void to_json(json& j, const Workload& v) {
  j = json{{"batch", v.batch}, {"prompt_len", v.prompt_len}, {"gen_len", v.gen_len}};
}

void from_json(const json& j, Workload& v) {
  const std::string s = "workload";
  reject_unknown_keys(j, {"batch", "prompt_len", "gen_len"}, s);
  for (const char* key : {"batch", "prompt_len", "gen_len"}) check_unsigned(j, key, s);
  read_optional(j, "batch", v.batch, s);
  read_optional(j, "prompt_len", v.prompt_len, s);
  read_optional(j, "gen_len", v.gen_len, s);
}

void to_json(json& j, const SearchThresholds& v) {
  j = json{{"cos_threshold", v.cos_threshold},
           {"norm_tolerance", v.norm_tolerance},
           {"score_penalty", v.score_penalty},
           {"block_sizes", v.block_sizes}};
}

void from_json(const json& j, SearchThresholds& v) {
  const std::string s = "thresholds";
  reject_unknown_keys(j, {"cos_threshold", "norm_tolerance", "score_penalty", "block_sizes"}, s);
  read_optional(j, "cos_threshold", v.cos_threshold, s);
  read_optional(j, "norm_tolerance", v.norm_tolerance, s);
  read_optional(j, "score_penalty", v.score_penalty, s);
  read_optional(j, "block_sizes", v.block_sizes, s);
}

void to_json(json& j, const RouterConfig& v) {
  j = json{{"temperature", v.temperature},
           {"aux_loss_weight", v.aux_loss_weight},
           {"renormalize_top_k", v.renormalize_top_k}};
}

void from_json(const json& j, RouterConfig& v) {
  const std::string s = "router";
  reject_unknown_keys(j, {"temperature", "aux_loss_weight", "renormalize_top_k"}, s);
  read_optional(j, "temperature", v.temperature, s);
  read_optional(j, "aux_loss_weight", v.aux_loss_weight, s);
  read_optional(j, "renormalize_top_k", v.renormalize_top_k, s);
}

void to_json(json& j, const FusionPlan& v) {
  json blocks = json::array();
  for (const FusedBlock& b : v.blocks) {
    blocks.push_back(json{{"base", b.base}, {"redundant", b.redundant}});
  }
  j = json{{"keep", v.keep}, {"prune", v.prune}, {"blocks", blocks}};
}

void from_json(const json& j, FusionPlan& v) {
  const std::string s = "plan";
  reject_unknown_keys(j, {"keep", "prune", "blocks"}, s);
  read_required(j, "keep", v.keep, s);
  read_required(j, "prune", v.prune, s);
  v.blocks.clear();
  if (!j.contains("blocks") || !j.at("blocks").is_array()) {
    fail(ErrorCode::InvalidPlan, "plan.blocks must be an array");
  }
  for (const json& jb : j.at("blocks")) {
    reject_unknown_keys(jb, {"base", "redundant"}, "plan.blocks[]");
    FusedBlock b;
    read_required(jb, "base", b.base, "plan.blocks[]");
    read_required(jb, "redundant", b.redundant, "plan.blocks[]");
    v.blocks.push_back(std::move(b));
  }
  v.num_layers = static_cast<std::uint32_t>(v.keep.size() + v.prune.size());
  validate_plan(v);
}

RunConfig parse_run_config(const json& doc) {
  reject_unknown_keys(doc, {"model", "hardware", "workload", "thresholds", "router"}, "<root>");
  if (!doc.contains("model")) {
    fail(ErrorCode::InvalidConfig, "missing required section 'model'");
  }
  RunConfig cfg;
  cfg.hardware = thor_u_profile();
  try {
    cfg.model = doc.at("model").get<ModelShape>();
    if (doc.contains("hardware")) cfg.hardware = doc.at("hardware").get<HardwareProfile>();
    if (doc.contains("workload")) cfg.workload = doc.at("workload").get<Workload>();
    if (doc.contains("thresholds")) cfg.thresholds = doc.at("thresholds").get<SearchThresholds>();
    if (doc.contains("router")) cfg.router = doc.at("router").get<RouterConfig>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidConfig, e.what());
  }
  try {
    validate_shape(cfg.model);
  } catch (const Error& e) {
    fail(ErrorCode::InvalidConfig, e.what());
  }
  validate_hardware(cfg.hardware);
  validate_workload(cfg.workload);
  validate_thresholds(cfg.thresholds);
  validate_router(cfg.router);
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    fail(ErrorCode::IoFailure, "cannot open config '" + path + "'");
  }
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    fail(ErrorCode::InvalidConfig, "config '" + path + "' is not valid JSON: " + e.what());
  }
  return parse_run_config(doc);
}

json run_config_to_json(const RunConfig& cfg) {
  return json{{"model", cfg.model},
              {"hardware", cfg.hardware},
              {"workload", cfg.workload},
              {"thresholds", cfg.thresholds},
              {"router", cfg.router}};
}

}  // namespace d2m
