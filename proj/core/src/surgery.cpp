#include "d2m/surgery.hpp"

#include <algorithm>
#include <cmath>

#include "d2m/error.hpp"

namespace d2m {

namespace {

using tensor_name::layer;

const char* const kAttentionLeaves[] = {"attn.q", "attn.k", "attn.v",
                                        "attn.o", "attn.q_norm", "attn.k_norm"};
const char* const kMlpLeaves[] = {"up", "gate", "down"};

void require_dense(const WeightContainer& dense, const FusionPlan& plan) {
  validate_plan(plan);
  if (dense.shape.is_moe()) {
    fail(ErrorCode::PlanModelMismatch, "fusion input must be a dense model");
  }
  if (plan.num_layers != dense.shape.num_layers) {
    fail(ErrorCode::PlanModelMismatch, "plan covers " + std::to_string(plan.num_layers) +
                                           " layers, model has " +
                                           std::to_string(dense.shape.num_layers));
  }
}

const FusedBlock* block_at(const FusionPlan& plan, LayerIndex base) {
  for (const FusedBlock& b : plan.blocks) {
    if (b.base == base) return &b;
  }
  return nullptr;
}

// Copies attention and both norms of source layer `src` into fused layer `dst`.
void copy_layer_frame(const WeightContainer& from, LayerIndex src, WeightContainer& to,
                      LayerIndex dst) {
  for (const char* leaf : kAttentionLeaves) to.tensors[layer(dst, leaf)] = from.at(layer(src, leaf));
  to.tensors[layer(dst, "attn_norm")] = from.at(layer(src, "attn_norm"));
  to.tensors[layer(dst, "mlp_norm")] = from.at(layer(src, "mlp_norm"));
}

void copy_globals(const WeightContainer& from, WeightContainer& to) {
  to.tensors["embed.tokens"] = from.at("embed.tokens");
  to.tensors["final.norm"] = from.at("final.norm");
  if (!from.shape.tied_embedding) to.tensors["lm_head"] = from.at("lm_head");
}

std::size_t mlp_params(const ModelShape& s) { return 3ull * s.hidden_dim * s.mlp_dim; }

std::size_t attention_params(const ModelShape& s) {
  const std::size_t d = s.hidden_dim;
  const std::size_t q = static_cast<std::size_t>(s.num_heads) * s.head_dim;
  const std::size_t kv = static_cast<std::size_t>(s.num_kv_heads) * s.head_dim;
  return d * q + 2 * d * kv + q * d + 2ull * s.head_dim;
}

std::string kind_name(ExpertSource::Kind k) {
  return k == ExpertSource::Kind::BaseCopy ? "base" : "redundant";
}

}  // namespace

std::vector<LayerIndex> fused_layer_sources(const FusionPlan& plan) { return plan.keep; }

FusedModel fuse(const WeightContainer& dense, const FusionPlan& plan,
                const FusionOptions& options) {
  require_dense(dense, plan);
  validate_container(dense);
  if (options.base_copies == 0 || options.supplementary_copies == 0 || options.top_k == 0) {
    fail(ErrorCode::InvalidArgument, "K, M and k must be positive");
  }
  FusedModel out;
  if (plan.blocks.empty()) {
    out.weights = dense;
    return out;
  }

  ModelShape shape = dense.shape;
  shape.num_layers = static_cast<std::uint32_t>(plan.keep.size());
  std::uint32_t max_experts = 0;
  for (LayerIndex src : plan.keep) {
    const FusedBlock* b = block_at(plan, src);
    const std::uint32_t n = b ? options.base_copies + static_cast<std::uint32_t>(b->redundant.size()) *
                                                          options.supplementary_copies
                              : 0;
    if (b && options.top_k > n) {
      fail(ErrorCode::InvalidArgument, "top_k exceeds the expert pool of layer " +
                                           std::to_string(src));
    }
    max_experts = std::max(max_experts, n);
    shape.layer_experts.push_back(n);
  }
  shape.moe = MoEShape{max_experts, options.top_k, options.base_copies,
                       options.supplementary_copies};
  validate_shape(shape);

  WeightContainer& w = out.weights;
  w.shape = shape;
  copy_globals(dense, w);
  for (std::size_t i = 0; i < plan.keep.size(); ++i) {
    const LayerIndex src = plan.keep[i];
    const auto dst = static_cast<LayerIndex>(i + 1);
    copy_layer_frame(dense, src, w, dst);
    const FusedBlock* b = block_at(plan, src);
    if (!b) {
      for (const char* leaf : kMlpLeaves) {
        w.tensors[layer(dst, std::string("mlp.") + leaf)] =
            dense.at(layer(src, std::string("mlp.") + leaf));
      }
      continue;
    }
    std::vector<ExpertSource> sources;
    for (std::uint32_t c = 1; c <= options.base_copies; ++c) {
      sources.push_back({ExpertSource::Kind::BaseCopy, src, c});
    }
    for (LayerIndex r : b->redundant) {
      for (std::uint32_t c = 1; c <= options.supplementary_copies; ++c) {
        sources.push_back({ExpertSource::Kind::Redundant, r, c});
      }
    }
    for (std::size_t j = 0; j < sources.size(); ++j) {
      for (const char* leaf : kMlpLeaves) {
        w.tensors[tensor_name::expert(dst, static_cast<std::uint32_t>(j + 1), leaf)] =
            dense.at(layer(sources[j].source_layer, std::string("mlp.") + leaf));
      }
    }
    w.tensors[tensor_name::router(dst)] =
        Tensor({shape.hidden_dim, static_cast<std::uint32_t>(sources.size())});
    out.provenance[dst] = std::move(sources);
  }
  validate_container(w);
  return out;
}

bool VerificationReport::passed() const { return first_failure() == nullptr; }

const VerificationCheck* VerificationReport::first_failure() const {
  for (const VerificationCheck& c : checks) {
    if (!c.passed) return &c;
  }
  return nullptr;
}

VerificationReport inspect_fusion(const WeightContainer& dense, const WeightContainer& fused,
                                  const FusionPlan& plan, const ExpertProvenance& provenance) {
  VerificationReport report;
  const auto check = [&](std::string name, bool ok, std::string detail = {}) {
    report.checks.push_back({std::move(name), ok, std::move(detail)});
  };
  const auto same = [&](const std::string& fused_name, const std::string& dense_name) {
    const auto f = fused.tensors.find(fused_name);
    const auto d = dense.tensors.find(dense_name);
    const bool ok = f != fused.tensors.end() && d != dense.tensors.end() && f->second == d->second;
    check("copy " + fused_name, ok, ok ? "" : fused_name + " differs from " + dense_name);
  };

  require_dense(dense, plan);
  const bool depth_ok = fused.shape.num_layers == plan.keep.size();
  check("depth", depth_ok,
        "fused model has " + std::to_string(fused.shape.num_layers) + " layers, plan keeps " +
            std::to_string(plan.keep.size()));
  if (!depth_ok) return report;

  same("embed.tokens", "embed.tokens");
  same("final.norm", "final.norm");
  if (!dense.shape.tied_embedding) same("lm_head", "lm_head");

  // Expected tensor names; anything else (e.g. a per-expert norm) is a defect.
  std::map<std::string, bool> expected{{"embed.tokens", true}, {"final.norm", true}};
  if (!dense.shape.tied_embedding) expected["lm_head"] = true;

  for (std::size_t i = 0; i < plan.keep.size(); ++i) {
    const LayerIndex src = plan.keep[i];
    const auto dst = static_cast<LayerIndex>(i + 1);
    for (const char* leaf : kAttentionLeaves) {
      same(layer(dst, leaf), layer(src, leaf));
      expected[layer(dst, leaf)] = true;
    }
    same(layer(dst, "attn_norm"), layer(src, "attn_norm"));
    same(layer(dst, "mlp_norm"), layer(src, "mlp_norm"));
    expected[layer(dst, "attn_norm")] = true;
    expected[layer(dst, "mlp_norm")] = true;

    const FusedBlock* b = block_at(plan, src);
    if (!b) {
      for (const char* leaf : kMlpLeaves) {
        same(layer(dst, std::string("mlp.") + leaf), layer(src, std::string("mlp.") + leaf));
        expected[layer(dst, std::string("mlp.") + leaf)] = true;
      }
      continue;
    }
    const auto it = provenance.find(dst);
    if (it == provenance.end()) {
      check("provenance layer " + std::to_string(dst), false, "no provenance for fused layer");
      continue;
    }
    const auto& sources = it->second;
    const auto base_count = static_cast<std::size_t>(
        std::count_if(sources.begin(), sources.end(), [&](const ExpertSource& s) {
          return s.kind == ExpertSource::Kind::BaseCopy && s.source_layer == src;
        }));
    bool per_layer_ok = base_count >= 1;
    std::size_t supp_per_layer = 0;
    for (std::size_t r = 0; r < b->redundant.size(); ++r) {
      const auto n = static_cast<std::size_t>(
          std::count_if(sources.begin(), sources.end(), [&](const ExpertSource& s) {
            return s.kind == ExpertSource::Kind::Redundant && s.source_layer == b->redundant[r];
          }));
      if (r == 0) supp_per_layer = n;
      per_layer_ok = per_layer_ok && n >= 1 && n == supp_per_layer;
    }
    per_layer_ok = per_layer_ok &&
                   sources.size() == base_count + supp_per_layer * b->redundant.size();
    check("provenance layer " + std::to_string(dst), per_layer_ok,
          "expert sources must be K base copies plus M copies per redundant layer");

    const std::uint32_t N = fused.shape.is_moe() ? fused.shape.experts_in_layer(dst) : 0;
    check("expert count layer " + std::to_string(dst), N == sources.size(),
          "layer has " + std::to_string(N) + " experts, provenance lists " +
              std::to_string(sources.size()));
    for (std::size_t j = 0; j < sources.size(); ++j) {
      for (const char* leaf : kMlpLeaves) {
        const std::string name = tensor_name::expert(dst, static_cast<std::uint32_t>(j + 1), leaf);
        same(name, layer(sources[j].source_layer, std::string("mlp.") + leaf));
        expected[name] = true;
      }
    }
    const std::string router = tensor_name::router(dst);
    expected[router] = true;
    const auto r = fused.tensors.find(router);
    const bool zero_router =
        r != fused.tensors.end() &&
        r->second.dims == std::vector<std::uint32_t>{dense.shape.hidden_dim,
                                                     static_cast<std::uint32_t>(sources.size())} &&
        std::all_of(r->second.data.begin(), r->second.data.end(),
                    [](double v) { return v == 0.0; });
    check("zero router layer " + std::to_string(dst), zero_router, router + " is not all zeros");
  }

  // Shared-norm uniqueness and absence of pruned-layer tensors.
  for (const auto& [name, tensor] : fused.tensors) {
    if (expected.count(name)) continue;
    const bool is_norm = name.find("norm") != std::string::npos;
    check(is_norm ? "shared mlp norm" : "no extra tensors", false,
          (is_norm ? "extra norm tensor " : "unexpected tensor ") + name);
  }
  return report;
}

VerificationReport verify_fusion(const WeightContainer& dense, const WeightContainer& fused,
                                 const FusionPlan& plan, const ExpertProvenance& provenance) {
  VerificationReport report = inspect_fusion(dense, fused, plan, provenance);
  if (const VerificationCheck* bad = report.first_failure()) {
    fail(ErrorCode::VerificationFailure, bad->name + ": " + bad->detail);
  }
  return report;
}

WeightContainer prune_reference(const WeightContainer& dense, const FusionPlan& plan) {
  require_dense(dense, plan);
  WeightContainer ref;
  ref.shape = dense.shape;
  ref.shape.num_layers = static_cast<std::uint32_t>(plan.keep.size());
  copy_globals(dense, ref);
  for (std::size_t i = 0; i < plan.keep.size(); ++i) {
    const LayerIndex src = plan.keep[i];
    const auto dst = static_cast<LayerIndex>(i + 1);
    copy_layer_frame(dense, src, ref, dst);
    for (const char* leaf : kMlpLeaves) {
      ref.tensors[layer(dst, std::string("mlp.") + leaf)] =
          dense.at(layer(src, std::string("mlp.") + leaf));
    }
  }
  validate_container(ref);
  return ref;
}

double functional_equivalence_check(const WeightContainer& dense, const WeightContainer& fused,
                                    const FusionPlan& plan, const ExpertProvenance& provenance,
                                    const Matrix& probe) {
  const nano::Model reference = nano::model_from_weights(prune_reference(dense, plan));
  const nano::Model fused_model = nano::model_from_weights(fused);
  nano::ForwardOptions options;
  for (const auto& [layer_index, sources] : provenance) {
    const auto base = std::find_if(sources.begin(), sources.end(), [](const ExpertSource& s) {
      return s.kind == ExpertSource::Kind::BaseCopy;
    });
    if (base == sources.end()) {
      fail(ErrorCode::VerificationFailure, "fused layer " + std::to_string(layer_index) +
                                               " has no base-copy expert");
    }
    options.forced[layer_index] =
        nano::ForcedRoute{static_cast<std::uint32_t>(base - sources.begin()), 1.0};
  }
  const nano::ForwardResult a = nano::forward(reference, probe);
  const nano::ForwardResult b = nano::forward(fused_model, probe, options);
  double deviation = 0.0;
  for (std::size_t l = 0; l < a.trace.layer_outputs.size(); ++l) {
    deviation = std::max(deviation,
                         (a.trace.layer_outputs[l] - b.trace.layer_outputs[l]).cwiseAbs().maxCoeff());
  }
  return deviation;
}

std::size_t expected_fused_parameter_count(const ModelShape& dense, const FusionPlan& plan,
                                           const FusionOptions& options) {
  std::size_t dense_count = static_cast<std::size_t>(dense.vocab_size) * dense.hidden_dim *
                                (dense.tied_embedding ? 1 : 2) +
                            dense.hidden_dim;
  dense_count += static_cast<std::size_t>(dense.num_layers) *
                 (attention_params(dense) + 2ull * dense.hidden_dim + mlp_params(dense));
  std::size_t count = dense_count;
  for (const FusedBlock& b : plan.blocks) {
    const std::size_t n_star = b.redundant.size();
    const std::size_t N = options.base_copies + n_star * options.supplementary_copies;
    count -= n_star * attention_params(dense);
    count -= n_star * 2ull * dense.hidden_dim;
    count += (N - 1 - n_star) * mlp_params(dense) + N * dense.hidden_dim;
  }
  return count;
}

nlohmann::json provenance_to_json(const ExpertProvenance& provenance) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& [layer_index, sources] : provenance) {
    nlohmann::json experts = nlohmann::json::array();
    for (std::size_t j = 0; j < sources.size(); ++j) {
      experts.push_back({{"expert", j + 1},
                         {"kind", kind_name(sources[j].kind)},
                         {"source_layer", sources[j].source_layer},
                         {"copy", sources[j].copy}});
    }
    layers.push_back({{"layer", layer_index}, {"experts", experts}});
  }
  return nlohmann::json{{"layers", layers}};
}

ExpertProvenance provenance_from_json(const nlohmann::json& j) {
  ExpertProvenance out;
  try {
    for (const auto& jl : j.at("layers")) {
      std::vector<ExpertSource> sources;
      for (const auto& je : jl.at("experts")) {
        ExpertSource s;
        const std::string kind = je.at("kind").get<std::string>();
        if (kind == "base") {
          s.kind = ExpertSource::Kind::BaseCopy;
        } else if (kind == "redundant") {
          s.kind = ExpertSource::Kind::Redundant;
        } else {
          fail(ErrorCode::InvalidArgument, "unknown expert kind '" + kind + "'");
        }
        s.source_layer = je.at("source_layer").get<LayerIndex>();
        s.copy = je.at("copy").get<std::uint32_t>();
        if (je.at("expert").get<std::size_t>() != sources.size() + 1) {
          fail(ErrorCode::InvalidArgument, "provenance experts must be listed in order");
        }
        sources.push_back(s);
      }
      out[jl.at("layer").get<LayerIndex>()] = std::move(sources);
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidArgument, std::string("malformed provenance: ") + e.what());
  }
  return out;
}

}  // namespace d2m
