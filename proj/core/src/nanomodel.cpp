#include "d2m/nanomodel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "d2m/error.hpp"

namespace d2m::nano {

namespace {

Matrix matrix_of(const WeightContainer& w, const std::string& name) {
  return w.at(name).as_matrix();
}

Vector vector_of(const WeightContainer& w, const std::string& name) {
  return w.at(name).as_vector();
}

Attention attention_from_weights(const WeightContainer& w, LayerIndex l) {
  using tensor_name::layer;
  Attention a;
  a.q = matrix_of(w, layer(l, "attn.q"));
  a.k = matrix_of(w, layer(l, "attn.k"));
  a.v = matrix_of(w, layer(l, "attn.v"));
  a.o = matrix_of(w, layer(l, "attn.o"));
  a.q_norm = vector_of(w, layer(l, "attn.q_norm"));
  a.k_norm = vector_of(w, layer(l, "attn.k_norm"));
  a.num_heads = w.shape.num_heads;
  a.num_kv_heads = w.shape.num_kv_heads;
  a.head_dim = w.shape.head_dim;
  return a;
}

void put_attention(WeightContainer& w, LayerIndex l, const Attention& a) {
  using tensor_name::layer;
  w.tensors[layer(l, "attn.q")] = Tensor::from_matrix(a.q);
  w.tensors[layer(l, "attn.k")] = Tensor::from_matrix(a.k);
  w.tensors[layer(l, "attn.v")] = Tensor::from_matrix(a.v);
  w.tensors[layer(l, "attn.o")] = Tensor::from_matrix(a.o);
  w.tensors[layer(l, "attn.q_norm")] = Tensor::from_vector(a.q_norm);
  w.tensors[layer(l, "attn.k_norm")] = Tensor::from_vector(a.k_norm);
}

void check_finite(const Matrix& m, LayerIndex l) {
  if (!m.allFinite()) {
    fail(ErrorCode::NonFiniteActivation, "non-finite activation at layer " + std::to_string(l));
  }
}

}  // namespace

std::size_t ExpertAccessCounter::total() const {
  return std::accumulate(tokens_per_expert.begin(), tokens_per_expert.end(), std::size_t{0});
}

Matrix rms_norm(const Matrix& x, const Vector& scale) {
  if (scale.size() != x.cols()) {
    fail(ErrorCode::DimensionMismatch, "norm scale length " + std::to_string(scale.size()) +
                                           " vs width " + std::to_string(x.cols()));
  }
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    const double inv = 1.0 / std::sqrt(x.row(t).squaredNorm() / static_cast<double>(x.cols()) +
                                       kNormEps);
    out.row(t) = (x.row(t) * inv).cwiseProduct(scale.transpose());
  }
  return out;
}

double silu(double v) { return v / (1.0 + std::exp(-v)); }

Matrix mlp_apply(const GluMlp& mlp, const Matrix& input) {
  if (input.cols() != mlp.up.rows() || mlp.gate.rows() != mlp.up.rows() ||
      mlp.gate.cols() != mlp.up.cols() || mlp.down.rows() != mlp.up.cols()) {
    fail(ErrorCode::DimensionMismatch,
         "mlp_apply: input width " + std::to_string(input.cols()) + ", W_up " +
             std::to_string(mlp.up.rows()) + "x" + std::to_string(mlp.up.cols()) + ", W_down " +
             std::to_string(mlp.down.rows()) + "x" + std::to_string(mlp.down.cols()));
  }
  const Matrix a = input * mlp.up;
  const Matrix b = input * mlp.gate;
  const Matrix c = a.unaryExpr([](double v) { return silu(v); }).cwiseProduct(b);
  return c * mlp.down;
}

Matrix attention_apply(const Attention& attn, const Matrix& normed) {
  const Eigen::Index T = normed.rows();
  const Eigen::Index dh = attn.head_dim;
  const std::uint32_t group = attn.num_heads / attn.num_kv_heads;
  const Matrix q = normed * attn.q;
  const Matrix k = normed * attn.k;
  const Matrix v = normed * attn.v;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix heads(T, static_cast<Eigen::Index>(attn.num_heads) * dh);
  for (std::uint32_t hq = 0; hq < attn.num_heads; ++hq) {
    const Eigen::Index kv = hq / group;
    const Matrix qh = rms_norm(q.middleCols(hq * dh, dh), attn.q_norm);
    const Matrix kh = rms_norm(k.middleCols(kv * dh, dh), attn.k_norm);
    const auto vh = v.middleCols(kv * dh, dh);
    for (Eigen::Index t = 0; t < T; ++t) {
      // Causal: token t attends to 0..t.
      RowVector scores = (qh.row(t) * kh.topRows(t + 1).transpose()) * scale;
      const double mx = scores.maxCoeff();
      scores = (scores.array() - mx).exp();
      scores /= scores.sum();
      heads.block(t, hq * dh, 1, dh) = scores * vh.topRows(t + 1);
    }
  }
  return heads * attn.o;
}

RoutingRecord route(const Matrix& router, const Matrix& h, const RouterConfig& config,
                    std::uint32_t top_k) {
  const auto N = static_cast<std::uint32_t>(router.cols());
  if (h.cols() != router.rows()) {
    fail(ErrorCode::DimensionMismatch, "router expects width " + std::to_string(router.rows()));
  }
  if (top_k == 0 || top_k > N) {
    fail(ErrorCode::InvalidArgument, "top_k must lie in 1..N");
  }
  RoutingRecord rec;
  rec.num_experts = N;
  rec.probabilities = (h * router) / config.temperature;
  for (Eigen::Index t = 0; t < rec.probabilities.rows(); ++t) {
    auto row = rec.probabilities.row(t);
    const double mx = row.maxCoeff();
    row = (row.array() - mx).exp();
    row /= row.sum();
  }
  const Eigen::Index T = h.rows();
  rec.selected.resize(T);
  rec.gates.resize(T);
  std::vector<std::uint32_t> order(N);
  for (Eigen::Index t = 0; t < T; ++t) {
    std::iota(order.begin(), order.end(), 0u);
    const auto p = rec.probabilities.row(t);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::uint32_t a, std::uint32_t b) { return p(a) > p(b); });
    auto& sel = rec.selected[t];
    auto& g = rec.gates[t];
    sel.assign(order.begin(), order.begin() + top_k);
    g.resize(top_k);
    double mass = 0.0;
    for (std::uint32_t i = 0; i < top_k; ++i) {
      g[i] = p(sel[i]);
      mass += g[i];
    }
    if (config.renormalize_top_k) {
      for (double& gi : g) gi /= mass;
    }
  }
  return rec;
}

Matrix dense_layer_forward(const DenseLayer& layer, const Matrix& x, Matrix* mlp_input) {
  Matrix h = x + attention_apply(layer.attn, rms_norm(x, layer.attn_norm));
  Matrix y = h + mlp_apply(layer.mlp, rms_norm(h, layer.mlp_norm));
  if (mlp_input) *mlp_input = std::move(h);
  return y;
}

MoeForwardResult moe_forward(const MoELayer& layer, const Matrix& x,
                             const MoeForwardOptions& options) {
  const std::uint32_t N = layer.num_experts();
  if (N == 0 || layer.router.cols() != N) {
    fail(ErrorCode::DimensionMismatch, "router columns must equal the expert count");
  }
  MoeForwardResult out;
  out.h = x + attention_apply(layer.attn, rms_norm(x, layer.attn_norm));
  out.routing = route(layer.router, out.h, layer.config, layer.top_k);
  if (options.forced) {
    if (options.forced->expert >= N) {
      fail(ErrorCode::IndexOutOfRange, "forced expert " + std::to_string(options.forced->expert));
    }
    for (std::size_t t = 0; t < out.routing.num_tokens(); ++t) {
      out.routing.selected[t] = {options.forced->expert};
      out.routing.gates[t] = {options.forced->gate};
    }
  }

  const Matrix u = rms_norm(out.h, layer.mlp_norm);
  out.y = out.h;
  if (options.counter) options.counter->tokens_per_expert.assign(N, 0);

  // Gather the tokens routed to each expert and evaluate only those rows.
  std::vector<std::vector<std::pair<Eigen::Index, double>>> assigned(N);
  for (std::size_t t = 0; t < out.routing.num_tokens(); ++t) {
    for (std::size_t i = 0; i < out.routing.selected[t].size(); ++i) {
      assigned[out.routing.selected[t][i]].emplace_back(static_cast<Eigen::Index>(t),
                                                        out.routing.gates[t][i]);
    }
  }
  for (std::uint32_t j = 0; j < N; ++j) {
    const auto& rows = assigned[j];
    if (rows.empty()) continue;
    Matrix batch(static_cast<Eigen::Index>(rows.size()), u.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) batch.row(r) = u.row(rows[r].first);
    const Matrix m = mlp_apply(layer.experts[j], batch);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      out.y.row(rows[r].first) += rows[r].second * m.row(r);
    }
    if (options.counter) options.counter->tokens_per_expert[j] += rows.size();
  }
  if (!out.y.allFinite()) fail(ErrorCode::NonFiniteActivation, "non-finite MoE layer output");
  return out;
}

std::vector<double> top1_fractions(const RoutingRecord& record) {
  if (record.num_tokens() == 0) fail(ErrorCode::EmptyRecord, "routing record has no tokens");
  std::vector<double> f(record.num_experts, 0.0);
  for (std::size_t t = 0; t < record.num_tokens(); ++t) f[record.top1(t)] += 1.0;
  for (double& v : f) v /= static_cast<double>(record.num_tokens());
  return f;
}

double load_balance_loss(std::span<const RoutingRecord> records, double alpha) {
  if (records.empty()) fail(ErrorCode::EmptyRecord, "no routing records");
  double total = 0.0;
  for (const RoutingRecord& rec : records) {
    const std::vector<double> f = top1_fractions(rec);
    const RowVector P = rec.probabilities.colwise().mean();
    double dot = 0.0;
    for (std::uint32_t i = 0; i < rec.num_experts; ++i) dot += f[i] * P(i);
    total += alpha * static_cast<double>(rec.num_experts) * dot;
  }
  return total;
}

ForwardResult forward(const Model& model, const Matrix& input, const ForwardOptions& options) {
  if (input.cols() != model.shape.hidden_dim) {
    fail(ErrorCode::DimensionMismatch, "input width " + std::to_string(input.cols()) +
                                           " != hidden_dim " +
                                           std::to_string(model.shape.hidden_dim));
  }
  if (!input.allFinite()) fail(ErrorCode::NonFiniteActivation, "non-finite model input");

  ForwardResult result;
  ActivationTrace& trace = result.trace;
  trace.num_layers = model.num_layers();
  trace.seq_len = static_cast<std::uint32_t>(input.rows());
  trace.hidden_dim = model.shape.hidden_dim;
  Matrix x = input;
  for (LayerIndex l = 1; l <= model.num_layers(); ++l) {
    const Layer& layer = model.layers[l - 1];
    if (const auto* dense = std::get_if<DenseLayer>(&layer)) {
      Matrix h;
      x = dense_layer_forward(*dense, x, &h);
      check_finite(h, l);
      trace.mlp_inputs.push_back(std::move(h));
    } else {
      MoeForwardOptions moe_options;
      if (const auto it = options.forced.find(l); it != options.forced.end()) {
        moe_options.forced = it->second;
      }
      ExpertAccessCounter local;
      if (options.counter) moe_options.counter = &local;
      MoeForwardResult r = moe_forward(std::get<MoELayer>(layer), x, moe_options);
      check_finite(r.h, l);
      if (options.counter) {
        auto& acc = options.counter->tokens_per_expert;
        if (acc.size() < local.tokens_per_expert.size()) acc.resize(local.tokens_per_expert.size());
        for (std::size_t j = 0; j < local.tokens_per_expert.size(); ++j) {
          acc[j] += local.tokens_per_expert[j];
        }
      }
      trace.mlp_inputs.push_back(std::move(r.h));
      result.routing.emplace(l, std::move(r.routing));
      x = std::move(r.y);
    }
    check_finite(x, l);
    trace.layer_outputs.push_back(x);
  }
  result.final_state = std::move(x);
  return result;
}

ForwardResult dense_forward(const Model& model, const Matrix& input) {
  for (const Layer& layer : model.layers) {
    if (std::holds_alternative<MoELayer>(layer)) {
      fail(ErrorCode::InvalidArgument, "dense_forward called on a model with MoE layers");
    }
  }
  return forward(model, input);
}

Matrix embed_tokens(const Model& model, std::span<const std::uint32_t> tokens) {
  Matrix x(static_cast<Eigen::Index>(tokens.size()), model.embed.cols());
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    if (tokens[t] >= model.embed.rows()) {
      fail(ErrorCode::IndexOutOfRange, "token id " + std::to_string(tokens[t]));
    }
    x.row(static_cast<Eigen::Index>(t)) = model.embed.row(tokens[t]);
  }
  return x;
}

Matrix logits(const Model& model, const Matrix& final_state) {
  const Matrix& head = model.lm_head ? *model.lm_head : model.embed;
  return rms_norm(final_state, model.final_norm) * head.transpose();
}

DenseLayer dense_layer_from_weights(const WeightContainer& w, LayerIndex l) {
  using tensor_name::layer;
  DenseLayer d;
  d.attn_norm = vector_of(w, layer(l, "attn_norm"));
  d.attn = attention_from_weights(w, l);
  d.mlp_norm = vector_of(w, layer(l, "mlp_norm"));
  d.mlp.up = matrix_of(w, layer(l, "mlp.up"));
  d.mlp.gate = matrix_of(w, layer(l, "mlp.gate"));
  d.mlp.down = matrix_of(w, layer(l, "mlp.down"));
  return d;
}

MoELayer moe_layer_from_weights(const WeightContainer& w, LayerIndex l,
                                const RouterConfig& router) {
  using tensor_name::layer;
  MoELayer m;
  m.attn_norm = vector_of(w, layer(l, "attn_norm"));
  m.attn = attention_from_weights(w, l);
  m.mlp_norm = vector_of(w, layer(l, "mlp_norm"));
  m.router = matrix_of(w, tensor_name::router(l));
  const std::uint32_t N = w.shape.experts_in_layer(l);
  for (std::uint32_t j = 1; j <= N; ++j) {
    m.experts.push_back(GluMlp{matrix_of(w, tensor_name::expert(l, j, "up")),
                               matrix_of(w, tensor_name::expert(l, j, "gate")),
                               matrix_of(w, tensor_name::expert(l, j, "down"))});
  }
  m.config = router;
  m.top_k = w.shape.moe ? w.shape.moe->top_k : 1;
  return m;
}

Model model_from_weights(const WeightContainer& weights, const RouterConfig& router) {
  validate_container(weights);
  validate_router(router);
  Model model;
  model.shape = weights.shape;
  model.embed = matrix_of(weights, "embed.tokens");
  if (!weights.shape.tied_embedding) model.lm_head = matrix_of(weights, "lm_head");
  model.final_norm = vector_of(weights, "final.norm");
  for (LayerIndex l = 1; l <= weights.shape.num_layers; ++l) {
    if (weights.shape.experts_in_layer(l) == 0) {
      model.layers.emplace_back(dense_layer_from_weights(weights, l));
    } else {
      model.layers.emplace_back(moe_layer_from_weights(weights, l, router));
    }
  }
  return model;
}

WeightContainer model_to_weights(const Model& model) {
  using tensor_name::layer;
  WeightContainer w;
  w.shape = model.shape;
  w.tensors["embed.tokens"] = Tensor::from_matrix(model.embed);
  if (model.lm_head) w.tensors["lm_head"] = Tensor::from_matrix(*model.lm_head);
  w.tensors["final.norm"] = Tensor::from_vector(model.final_norm);
  for (LayerIndex l = 1; l <= model.num_layers(); ++l) {
    const Layer& layer_var = model.layers[l - 1];
    if (const auto* d = std::get_if<DenseLayer>(&layer_var)) {
      w.tensors[layer(l, "attn_norm")] = Tensor::from_vector(d->attn_norm);
      put_attention(w, l, d->attn);
      w.tensors[layer(l, "mlp_norm")] = Tensor::from_vector(d->mlp_norm);
      w.tensors[layer(l, "mlp.up")] = Tensor::from_matrix(d->mlp.up);
      w.tensors[layer(l, "mlp.gate")] = Tensor::from_matrix(d->mlp.gate);
      w.tensors[layer(l, "mlp.down")] = Tensor::from_matrix(d->mlp.down);
    } else {
      const auto& m = std::get<MoELayer>(layer_var);
      w.tensors[layer(l, "attn_norm")] = Tensor::from_vector(m.attn_norm);
      put_attention(w, l, m.attn);
      w.tensors[layer(l, "mlp_norm")] = Tensor::from_vector(m.mlp_norm);
      w.tensors[tensor_name::router(l)] = Tensor::from_matrix(m.router);
      for (std::uint32_t j = 0; j < m.num_experts(); ++j) {
        w.tensors[tensor_name::expert(l, j + 1, "up")] = Tensor::from_matrix(m.experts[j].up);
        w.tensors[tensor_name::expert(l, j + 1, "gate")] = Tensor::from_matrix(m.experts[j].gate);
        w.tensors[tensor_name::expert(l, j + 1, "down")] = Tensor::from_matrix(m.experts[j].down);
      }
    }
  }
  validate_container(w);
  return w;
}

}  // namespace d2m::nano
