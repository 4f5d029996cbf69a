#pragma once

// Desk-scale decoder-only transformer in 64-bit arithmetic.
//
// Dense layer:  h = x + MHA(LN(x));  y = h + MLP(LN_mlp(h))
// GLU MLP:      MLP(u) = (SiLU(u W_up) * (u W_gate)) W_down
// MoE layer:    y = h + sum_{j in topk(h)} g_j(h) * MLP_j(LN_mlp(h)),
//               g(h) = softmax(h W_r / tau), routed on the pre-LN state h.
//
// Attention is causal grouped-query attention with per-head RMS q/k norms and
// no rotary embedding; all norms are RMSNorm with a learned scale.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "d2m/config.hpp"
#include "d2m/linalg.hpp"
#include "d2m/trace_io.hpp"
#include "d2m/weights.hpp"

namespace d2m::nano {

inline constexpr double kNormEps = 1e-6;

struct GluMlp {
  Matrix up;    // d x d_mid
  Matrix gate;  // d x d_mid
  Matrix down;  // d_mid x d

  friend bool operator==(const GluMlp&, const GluMlp&) = default;
};

struct Attention {
  Matrix q;  // d x (n_h d_h)
  Matrix k;  // d x (n_kv d_h)
  Matrix v;  // d x (n_kv d_h)
  Matrix o;  // (n_h d_h) x d
  Vector q_norm;
  Vector k_norm;
  std::uint32_t num_heads = 1;
  std::uint32_t num_kv_heads = 1;
  std::uint32_t head_dim = 1;
};

struct DenseLayer {
  Vector attn_norm;
  Attention attn;
  Vector mlp_norm;
  GluMlp mlp;
};

// Where an expert's weights were copied from during layer fusion.
struct ExpertSource {
  enum class Kind { BaseCopy, Redundant };
  Kind kind = Kind::BaseCopy;
  LayerIndex source_layer = 0;  // original (pre-fusion) layer index
  std::uint32_t copy = 1;       // 1-based copy number

  friend bool operator==(const ExpertSource&, const ExpertSource&) = default;
};

struct MoELayer {
  Vector attn_norm;
  Attention attn;
  Vector mlp_norm;  // shared by every expert
  std::vector<GluMlp> experts;
  Matrix router;  // d x N
  RouterConfig config;
  std::uint32_t top_k = 1;
  std::vector<ExpertSource> provenance;  // empty when unknown

  [[nodiscard]] std::uint32_t num_experts() const {
    return static_cast<std::uint32_t>(experts.size());
  }
};

// Expert indices are 0-based in memory; files and CSV headers use 1-based.
struct RoutingRecord {
  std::uint32_t num_experts = 0;
  Matrix probabilities;                           // T x N
  std::vector<std::vector<std::uint32_t>> selected;  // per token, by descending gate
  std::vector<std::vector<double>> gates;         // aligned with `selected`

  [[nodiscard]] std::size_t num_tokens() const { return selected.size(); }
  // Highest-gate expert of token t.
  [[nodiscard]] std::uint32_t top1(std::size_t t) const { return selected.at(t).front(); }
};

// Counts token-expert evaluations inside moe_forward.
struct ExpertAccessCounter {
  std::vector<std::size_t> tokens_per_expert;
  std::size_t total() const;
};

// Test hook: bypass the router and send every token to one expert.
struct ForcedRoute {
  std::uint32_t expert = 0;
  double gate = 1.0;
};

struct MoeForwardOptions {
  std::optional<ForcedRoute> forced;
  ExpertAccessCounter* counter = nullptr;
};

struct MoeForwardResult {
  Matrix h;  // post-attention residual state (routing input)
  Matrix y;
  RoutingRecord routing;
};

using Layer = std::variant<DenseLayer, MoELayer>;

struct Model {
  ModelShape shape;
  Matrix embed;                  // V x d
  std::optional<Matrix> lm_head; // V x d when untied
  Vector final_norm;
  std::vector<Layer> layers;

  [[nodiscard]] std::uint32_t num_layers() const {
    return static_cast<std::uint32_t>(layers.size());
  }
};

[[nodiscard]] Matrix rms_norm(const Matrix& x, const Vector& scale);
[[nodiscard]] double silu(double v);

// Throws DimensionMismatch when `input` columns differ from mlp.up rows.
[[nodiscard]] Matrix mlp_apply(const GluMlp& mlp, const Matrix& input);

// Causal GQA attention on an already-normalized input.
[[nodiscard]] Matrix attention_apply(const Attention& attn, const Matrix& normed);

// Softmax routing with temperature and top-k selection. Ties in probability
// resolve to the smaller expert index.
[[nodiscard]] RoutingRecord route(const Matrix& router, const Matrix& h,
                                  const RouterConfig& config, std::uint32_t top_k);

// Returns y; writes h into *mlp_input when given.
[[nodiscard]] Matrix dense_layer_forward(const DenseLayer& layer, const Matrix& x,
                                         Matrix* mlp_input = nullptr);

[[nodiscard]] MoeForwardResult moe_forward(const MoELayer& layer, const Matrix& x,
                                           const MoeForwardOptions& options = {});

// Switch-style auxiliary loss summed over MoE layers:
//   alpha * N * sum_i f_i * P_i,
// f_i = fraction of tokens whose top-1 expert is i, P_i = mean probability.
// Throws EmptyRecord when `records` is empty or a record has no tokens.
[[nodiscard]] double load_balance_loss(std::span<const RoutingRecord> records, double alpha);

// Top-1 load fractions f_i of one record.
[[nodiscard]] std::vector<double> top1_fractions(const RoutingRecord& record);

struct ForwardOptions {
  // Keyed by 1-based layer index of the model being run.
  std::map<LayerIndex, ForcedRoute> forced;
  ExpertAccessCounter* counter = nullptr;
};

struct ForwardResult {
  Matrix final_state;  // x^(L+1), before the final norm
  ActivationTrace trace;
  std::map<LayerIndex, RoutingRecord> routing;  // MoE layers only
};

// Runs every layer on an embedded T x d input; captures h^(l) and y^(l).
// Throws NonFiniteActivation naming the first offending layer.
[[nodiscard]] ForwardResult forward(const Model& model, const Matrix& input,
                                    const ForwardOptions& options = {});

// forward() restricted to models without MoE layers.
[[nodiscard]] ForwardResult dense_forward(const Model& model, const Matrix& input);

[[nodiscard]] Matrix embed_tokens(const Model& model, std::span<const std::uint32_t> tokens);
[[nodiscard]] Matrix logits(const Model& model, const Matrix& final_state);

// Conversions between the tensor container and the compute structures.
[[nodiscard]] Model model_from_weights(const WeightContainer& weights,
                                       const RouterConfig& router = {});
[[nodiscard]] WeightContainer model_to_weights(const Model& model);

[[nodiscard]] DenseLayer dense_layer_from_weights(const WeightContainer& w, LayerIndex l);
[[nodiscard]] MoELayer moe_layer_from_weights(const WeightContainer& w, LayerIndex l,
                                              const RouterConfig& router);

}  // namespace d2m::nano
