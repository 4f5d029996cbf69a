#pragma once

// Inter-layer similarity statistics over an activation trace:
//   S_out[l,m]  sequence-averaged cosine similarity of y^(l), y^(m)
//   S_mlp[l,m]  the same for the MLP inputs h^(l), h^(m)
//   D_norm[l,m] mean over tokens of | ||h^(l)_t|| - ||h^(m)_t|| | / ||h^(m)_t||
//               computed for l < m, i.e. with the later layer in the
//               denominator (mirrored into [m,l] for display symmetry).

#include <cstdint>
#include <iosfwd>
#include <string>

#include "d2m/linalg.hpp"
#include "d2m/trace_io.hpp"

namespace d2m {

struct SimilarityMatrices {
  Matrix s_out;   // L x L, 0-based storage
  Matrix s_mlp;
  Matrix delta_norm;

  [[nodiscard]] std::uint32_t num_layers() const {
    return static_cast<std::uint32_t>(s_out.rows());
  }
  // 1-based accessors.
  [[nodiscard]] double out(LayerIndex a, LayerIndex b) const { return s_out(a - 1, b - 1); }
  [[nodiscard]] double mlp(LayerIndex a, LayerIndex b) const { return s_mlp(a - 1, b - 1); }
  [[nodiscard]] double norm(LayerIndex a, LayerIndex b) const { return delta_norm(a - 1, b - 1); }

  friend bool operator==(const SimilarityMatrices&, const SimilarityMatrices&) = default;
};

// (1/T) sum_t cos(a_t, b_t). Throws DimensionMismatch or ZeroVector.
[[nodiscard]] double seq_avg_cosine(const Matrix& a, const Matrix& b);

// (1/T) sum_t | ||a_t|| - ||b_t|| | / ||b_t||. Throws ZeroVector when a row
// of b has zero norm.
[[nodiscard]] double norm_mismatch(const Matrix& a, const Matrix& b);

// `jobs` > 1 spreads layer pairs over worker threads; output is identical.
[[nodiscard]] SimilarityMatrices build_matrices(const ActivationTrace& trace, unsigned jobs = 1);

// Throws DimensionMismatch unless all three matrices are L x L.
void validate_matrices(const SimilarityMatrices& m);

// Writes s_out.csv, s_mlp.csv and delta_norm.csv into `directory`. Header row
// is `layer,1,...,L`; each data row starts with its layer index; values use 9
// significant digits.
void export_heatmap(const SimilarityMatrices& m, const std::string& directory);
void write_heatmap_csv(const Matrix& m, std::ostream& out);
[[nodiscard]] Matrix read_heatmap_csv(std::istream& in);

// Binary cache "D2MS" | version u32 = 1 | L u32 | s_out, s_mlp, delta_norm as
// row-major L x L f64-LE.
std::size_t write_matrices(const SimilarityMatrices& m, std::ostream& out);
[[nodiscard]] SimilarityMatrices read_matrices(std::istream& in);
void write_matrices_file(const SimilarityMatrices& m, const std::string& path);
[[nodiscard]] SimilarityMatrices read_matrices_file(const std::string& path);

}  // namespace d2m
