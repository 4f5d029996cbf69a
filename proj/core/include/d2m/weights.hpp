#pragma once

// Named-tensor weight container for the toy transformer and the D2M-WEIGHTS
// binary format:
//
//   magic "D2MW" | version u32 = 1 | config-length u32 | UTF-8 JSON ModelShape
//   | repeated { name-length u32 | UTF-8 name | ndim u32 | dims u32 x ndim
//                | f32-LE data }
//
// Tensor paths (layers 1-based):
//   embed.tokens [V,d]   lm_head [V,d] (untied only)   final.norm [d]
//   layer.<l>.attn_norm [d]   layer.<l>.mlp_norm [d]
//   layer.<l>.attn.{q [d,n_h*d_h], k [d,n_kv*d_h], v [d,n_kv*d_h],
//                   o [n_h*d_h,d], q_norm [d_h], k_norm [d_h]}
//   dense: layer.<l>.mlp.{up [d,d_mid], gate [d,d_mid], down [d_mid,d]}
//   MoE:   layer.<l>.router [d,N], layer.<l>.moe.expert.<j>.{up,gate,down}

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "d2m/config.hpp"
#include "d2m/linalg.hpp"

namespace d2m {

inline constexpr std::uint32_t kWeightsVersion = 1;

struct Tensor {
  std::vector<std::uint32_t> dims;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::uint32_t> dims);
  static Tensor from_matrix(const Matrix& m);
  static Tensor from_vector(const Vector& v);

  [[nodiscard]] std::size_t size() const noexcept { return data.size(); }
  // Views a rank-2 tensor as a matrix; rank-1 tensors view as a 1 x n row.
  [[nodiscard]] ConstMatrixMap as_matrix() const;
  [[nodiscard]] MatrixMap as_matrix();
  [[nodiscard]] Vector as_vector() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

namespace tensor_name {
std::string layer(LayerIndex l, const std::string& leaf);
std::string expert(LayerIndex l, std::uint32_t expert, const std::string& leaf);
std::string router(LayerIndex l);
}  // namespace tensor_name

struct WeightContainer {
  ModelShape shape;
  std::map<std::string, Tensor> tensors;

  [[nodiscard]] const Tensor& at(const std::string& name) const;
  [[nodiscard]] Tensor& at(const std::string& name);
  [[nodiscard]] bool contains(const std::string& name) const { return tensors.count(name) != 0; }
  [[nodiscard]] std::size_t parameter_count() const;

  friend bool operator==(const WeightContainer&, const WeightContainer&) = default;
};

// Every tensor path the shape requires, mapped to its dimensions.
[[nodiscard]] std::map<std::string, std::vector<std::uint32_t>> required_layout(
    const ModelShape& shape);

// Throws MissingTensor, DimensionMismatch, UnexpectedTensor or NonFiniteValue.
void validate_container(const WeightContainer& container);

// Seeded N(0, 0.02^2) initialization for every tensor of the shape. Norm
// scales start at 1. Values are rounded to f32 so the model round-trips
// through D2M-WEIGHTS exactly.
[[nodiscard]] WeightContainer init_weights(const ModelShape& shape, std::uint64_t seed,
                                           double stddev = 0.02);

std::size_t write_weights(const WeightContainer& container, std::ostream& out);
void write_weights_file(const WeightContainer& container, const std::string& path);
[[nodiscard]] WeightContainer read_weights(std::istream& in);
[[nodiscard]] WeightContainer read_weights_file(const std::string& path);

}  // namespace d2m
