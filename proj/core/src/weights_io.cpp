#include "d2m/weights.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "binary_io.hpp"
#include "d2m/error.hpp"

namespace d2m {

namespace {

constexpr std::string_view kMagic = "D2MW";
constexpr std::uint32_t kMaxNameLength = 4096;
constexpr std::uint32_t kMaxRank = 8;
constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 32;

std::string dims_to_string(const std::vector<std::uint32_t>& dims) {
  std::string s = "[";
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(dims[i]);
  }
  return s + "]";
}

std::size_t element_count(const std::vector<std::uint32_t>& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1},
                         [](std::size_t a, std::uint32_t b) { return a * b; });
}

}  // namespace

Tensor::Tensor(std::vector<std::uint32_t> d) : dims(std::move(d)), data(element_count(dims), 0.0) {}

Tensor Tensor::from_matrix(const Matrix& m) {
  Tensor t({static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())});
  std::copy(m.data(), m.data() + m.size(), t.data.begin());
  return t;
}

Tensor Tensor::from_vector(const Vector& v) {
  Tensor t({static_cast<std::uint32_t>(v.size())});
  std::copy(v.data(), v.data() + v.size(), t.data.begin());
  return t;
}

ConstMatrixMap Tensor::as_matrix() const {
  if (dims.size() == 1) return {data.data(), 1, static_cast<Eigen::Index>(dims[0])};
  if (dims.size() != 2) fail(ErrorCode::DimensionMismatch, "tensor is not rank 1 or 2");
  return {data.data(), static_cast<Eigen::Index>(dims[0]), static_cast<Eigen::Index>(dims[1])};
}

MatrixMap Tensor::as_matrix() {
  if (dims.size() == 1) return {data.data(), 1, static_cast<Eigen::Index>(dims[0])};
  if (dims.size() != 2) fail(ErrorCode::DimensionMismatch, "tensor is not rank 1 or 2");
  return {data.data(), static_cast<Eigen::Index>(dims[0]), static_cast<Eigen::Index>(dims[1])};
}

Vector Tensor::as_vector() const {
  return Eigen::Map<const Vector>(data.data(), static_cast<Eigen::Index>(data.size()));
}

namespace tensor_name {

std::string layer(LayerIndex l, const std::string& leaf) {
  return "layer." + std::to_string(l) + "." + leaf;
}

std::string expert(LayerIndex l, std::uint32_t expert, const std::string& leaf) {
  return layer(l, "moe.expert." + std::to_string(expert) + "." + leaf);
}

std::string router(LayerIndex l) { return layer(l, "router"); }

}  // namespace tensor_name

const Tensor& WeightContainer::at(const std::string& name) const {
  const auto it = tensors.find(name);
  if (it == tensors.end()) fail(ErrorCode::MissingTensor, name);
  return it->second;
}

Tensor& WeightContainer::at(const std::string& name) {
  const auto it = tensors.find(name);
  if (it == tensors.end()) fail(ErrorCode::MissingTensor, name);
  return it->second;
}

std::size_t WeightContainer::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors) n += t.size();
  return n;
}

std::map<std::string, std::vector<std::uint32_t>> required_layout(const ModelShape& shape) {
  validate_shape(shape);
  const std::uint32_t d = shape.hidden_dim;
  const std::uint32_t q_width = shape.num_heads * shape.head_dim;
  const std::uint32_t kv_width = shape.num_kv_heads * shape.head_dim;
  std::map<std::string, std::vector<std::uint32_t>> layout;
  layout["embed.tokens"] = {shape.vocab_size, d};
  if (!shape.tied_embedding) layout["lm_head"] = {shape.vocab_size, d};
  layout["final.norm"] = {d};
  for (LayerIndex l = 1; l <= shape.num_layers; ++l) {
    using tensor_name::layer;
    layout[layer(l, "attn_norm")] = {d};
    layout[layer(l, "attn.q")] = {d, q_width};
    layout[layer(l, "attn.k")] = {d, kv_width};
    layout[layer(l, "attn.v")] = {d, kv_width};
    layout[layer(l, "attn.o")] = {q_width, d};
    layout[layer(l, "attn.q_norm")] = {shape.head_dim};
    layout[layer(l, "attn.k_norm")] = {shape.head_dim};
    layout[layer(l, "mlp_norm")] = {d};
    const std::uint32_t experts = shape.experts_in_layer(l);
    if (experts == 0) {
      layout[layer(l, "mlp.up")] = {d, shape.mlp_dim};
      layout[layer(l, "mlp.gate")] = {d, shape.mlp_dim};
      layout[layer(l, "mlp.down")] = {shape.mlp_dim, d};
    } else {
      layout[tensor_name::router(l)] = {d, experts};
      for (std::uint32_t j = 1; j <= experts; ++j) {
        layout[tensor_name::expert(l, j, "up")] = {d, shape.mlp_dim};
        layout[tensor_name::expert(l, j, "gate")] = {d, shape.mlp_dim};
        layout[tensor_name::expert(l, j, "down")] = {shape.mlp_dim, d};
      }
    }
  }
  return layout;
}

void validate_container(const WeightContainer& container) {
  const auto layout = required_layout(container.shape);
  for (const auto& [name, dims] : layout) {
    const auto it = container.tensors.find(name);
    if (it == container.tensors.end()) fail(ErrorCode::MissingTensor, name);
    if (it->second.dims != dims) {
      fail(ErrorCode::DimensionMismatch, name + " has dims " + dims_to_string(it->second.dims) +
                                             ", expected " + dims_to_string(dims));
    }
    if (it->second.data.size() != element_count(dims)) {
      fail(ErrorCode::DimensionMismatch, name + " data length disagrees with its dims");
    }
  }
  for (const auto& [name, tensor] : container.tensors) {
    if (layout.count(name) == 0) fail(ErrorCode::UnexpectedTensor, name);
    for (double v : tensor.data) {
      if (!std::isfinite(v)) fail(ErrorCode::NonFiniteValue, name);
    }
  }
}

WeightContainer init_weights(const ModelShape& shape, std::uint64_t seed, double stddev) {
  WeightContainer c;
  c.shape = shape;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, stddev);
  // std::map iteration order is lexicographic, so draws are deterministic.
  for (const auto& [name, dims] : required_layout(shape)) {
    Tensor t(dims);
    const bool is_norm = name.ends_with("norm");
    const bool is_router = name.ends_with(".router");
    for (double& v : t.data) {
      if (is_norm) {
        v = 1.0;
      } else if (is_router) {
        v = 0.0;
      } else {
        v = static_cast<double>(static_cast<float>(gauss(rng)));
      }
    }
    c.tensors.emplace(name, std::move(t));
  }
  return c;
}

std::size_t write_weights(const WeightContainer& container, std::ostream& out) {
  validate_container(container);
  detail::Writer w(out);
  w.magic(kMagic);
  w.u32(kWeightsVersion);
  const std::string config = nlohmann::json(container.shape).dump();
  w.u32(static_cast<std::uint32_t>(config.size()));
  w.bytes(config.data(), config.size());
  std::vector<float> buffer;
  for (const auto& [name, tensor] : container.tensors) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u32(static_cast<std::uint32_t>(tensor.dims.size()));
    for (std::uint32_t dim : tensor.dims) w.u32(dim);
    buffer.assign(tensor.data.begin(), tensor.data.end());
    for (float v : buffer) {
      if (!std::isfinite(v)) fail(ErrorCode::NonFiniteValue, name + " overflows f32");
    }
    w.bytes(buffer.data(), buffer.size() * sizeof(float));
  }
  return w.count();
}

void write_weights_file(const WeightContainer& container, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::IoFailure, "cannot open '" + path + "' for writing");
  write_weights(container, out);
  out.close();
  if (!out) fail(ErrorCode::IoFailure, "failed to finish writing '" + path + "'");
}

WeightContainer read_weights(std::istream& in) {
  detail::Reader r(in);
  r.expect_magic(kMagic);
  const std::uint32_t version = r.u32("version");
  if (version != kWeightsVersion) {
    fail(ErrorCode::VersionMismatch, "weights version " + std::to_string(version) +
                                         ", expected " + std::to_string(kWeightsVersion));
  }
  const std::uint32_t config_len = r.u32("config length");
  std::string config(config_len, '\0');
  r.bytes(config.data(), config.size(), "config");
  WeightContainer c;
  try {
    c.shape = nlohmann::json::parse(config).get<ModelShape>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidConfig, std::string("embedded shape: ") + e.what());
  }
  validate_shape(c.shape);

  std::vector<float> buffer;
  while (!r.at_end()) {
    const std::uint32_t name_len = r.u32("name length");
    if (name_len == 0 || name_len > kMaxNameLength) {
      fail(ErrorCode::DimensionMismatch, "implausible tensor name length " +
                                             std::to_string(name_len));
    }
    std::string name(name_len, '\0');
    r.bytes(name.data(), name.size(), "tensor name");
    const std::uint32_t rank = r.u32("rank");
    if (rank == 0 || rank > kMaxRank) {
      fail(ErrorCode::DimensionMismatch, name + " has unsupported rank " + std::to_string(rank));
    }
    Tensor t;
    t.dims.resize(rank);
    std::uint64_t count = 1;
    for (auto& dim : t.dims) {
      dim = r.u32("dims");
      count *= dim;
      if (count > kMaxElements) fail(ErrorCode::DimensionMismatch, name + " is too large");
    }
    buffer.resize(count);
    r.bytes(buffer.data(), buffer.size() * sizeof(float), "tensor data");
    t.data.assign(buffer.begin(), buffer.end());
    if (!c.tensors.emplace(name, std::move(t)).second) {
      fail(ErrorCode::UnexpectedTensor, "duplicate tensor " + name);
    }
  }
  validate_container(c);
  return c;
}

WeightContainer read_weights_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoFailure, "cannot open weights '" + path + "'");
  return read_weights(in);
}

}  // namespace d2m
