#include "fixtures.hpp"

#include <atomic>
#include <filesystem>

#include <unistd.h>

namespace fixture {

d2m::ModelShape toy_shape(std::uint32_t layers) {
  d2m::ModelShape s;
  s.num_layers = layers;
  s.hidden_dim = 16;
  s.mlp_dim = 32;
  s.num_heads = 4;
  s.num_kv_heads = 2;
  s.head_dim = 4;
  s.vocab_size = 32;
  return s;
}

d2m::Matrix gaussian(Eigen::Index rows, Eigen::Index cols, double scale, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, scale);
  d2m::Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

d2m::WeightContainer dense_model(std::uint32_t layers, std::uint64_t seed, double scale) {
  d2m::WeightContainer w = d2m::init_weights(toy_shape(layers), seed, scale);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
  std::uniform_real_distribution<float> jitter(0.8f, 1.2f);
  for (auto& [name, t] : w.tensors) {
    if (name.find("norm") == std::string::npos) continue;
    for (double& v : t.data) v = jitter(rng);
  }
  return w;
}

d2m::nano::MoELayer random_moe_layer(std::uint32_t num_experts, std::uint32_t top_k,
                                     std::uint64_t seed, bool renormalize) {
  d2m::ModelShape s = toy_shape(1);
  s.moe = d2m::MoEShape{num_experts, top_k, 1, 1};
  d2m::WeightContainer w = d2m::init_weights(s, seed, 0.3);
  std::mt19937_64 rng(seed + 17);
  w.at(d2m::tensor_name::router(1)) = d2m::Tensor::from_matrix(gaussian(16, num_experts, 0.5, rng));
  d2m::RouterConfig rc;
  rc.renormalize_top_k = renormalize;
  rc.aux_loss_weight = 1e-2;
  return d2m::nano::moe_layer_from_weights(w, 1, rc);
}

d2m::SimilarityMatrices random_matrices(std::uint32_t layers, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> cos(0.85, 1.0);
  std::uniform_real_distribution<double> dn(0.0, 0.2);
  d2m::SimilarityMatrices m;
  m.s_out = d2m::Matrix::Identity(layers, layers);
  m.s_mlp = d2m::Matrix::Identity(layers, layers);
  m.delta_norm = d2m::Matrix::Zero(layers, layers);
  for (std::uint32_t a = 0; a < layers; ++a) {
    for (std::uint32_t b = a + 1; b < layers; ++b) {
      m.s_out(a, b) = m.s_out(b, a) = cos(rng);
      m.s_mlp(a, b) = m.s_mlp(b, a) = cos(rng);
      m.delta_norm(a, b) = m.delta_norm(b, a) = dn(rng);
    }
  }
  return m;
}

std::vector<d2m::tradeoff::CandidateEvaluation> depth_candidates() {
  return {{"L13", 13, 135.78, 29.85, {}}, {"L15", 15, 148.84, 39.06, {}},
          {"L17", 17, 161.89, 42.76, {}}, {"L19", 19, 174.95, 47.31, {}},
          {"L21", 21, 188.00, 47.50, {}}, {"L23", 23, 201.05, 47.93, {}}};
}

d2m::FusedModel training_fixture(std::uint64_t seed) {
  d2m::ModelShape s;
  s.num_layers = 4;
  s.hidden_dim = 16;
  s.mlp_dim = 32;
  s.num_heads = 2;
  s.num_kv_heads = 1;
  s.head_dim = 8;
  s.vocab_size = 64;
  const d2m::WeightContainer dense = d2m::init_weights(s, seed);
  const d2m::FusionPlan plan = d2m::make_plan(4, {d2m::FusedBlock{2, {3}}});
  d2m::FusionOptions o;
  o.base_copies = 2;
  o.supplementary_copies = 2;
  return d2m::fuse(dense, plan, o);
}

std::string temp_dir(const std::string& tag) {
  static std::atomic<int> counter{0};
  const auto dir = std::filesystem::temp_directory_path() /
                   ("d2m_" + tag + "_" + std::to_string(::getpid()) + "_" +
                    std::to_string(counter++));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

std::string raw_weights(const d2m::WeightContainer& c, std::uint32_t version) {
  std::string bytes = "D2MW";
  const auto u32 = [&](std::uint32_t v) { bytes.append(reinterpret_cast<const char*>(&v), 4); };
  const auto str = [&](const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes += s;
  };
  u32(version);
  str(nlohmann::json(c.shape).dump());
  for (const auto& [name, t] : c.tensors) {
    str(name);
    u32(static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) u32(d);
    for (double v : t.data) {
      const auto f = static_cast<float>(v);
      bytes.append(reinterpret_cast<const char*>(&f), 4);
    }
  }
  return bytes;
}

}  // namespace fixture
