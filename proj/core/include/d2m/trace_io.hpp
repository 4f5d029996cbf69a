#pragma once

// Activation traces: per-layer MLP inputs h^(l) (post-attention residual
// state) and layer outputs y^(l), plus the D2M-TRACE binary format.
//
//   magic "D2MT" | version u32 = 1 | L u32 | T u32 | d u32
//   | h^(1..L) row-major T x d f32-LE | y^(1..L) row-major T x d f32-LE

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "d2m/config.hpp"
#include "d2m/linalg.hpp"

namespace d2m {

inline constexpr std::uint32_t kTraceVersion = 1;

struct ActivationTrace {
  std::uint32_t num_layers = 0;
  std::uint32_t seq_len = 0;
  std::uint32_t hidden_dim = 0;
  std::vector<Matrix> mlp_inputs;     // h^(l), index l-1
  std::vector<Matrix> layer_outputs;  // y^(l), index l-1

  [[nodiscard]] const Matrix& h(LayerIndex l) const { return mlp_inputs.at(l - 1); }
  [[nodiscard]] const Matrix& y(LayerIndex l) const { return layer_outputs.at(l - 1); }

  friend bool operator==(const ActivationTrace& a, const ActivationTrace& b);
};

// Throws DimensionMismatch or NonFiniteValue.
void validate_trace(const ActivationTrace& trace);

// Returns the number of bytes written. Throws IoFailure on a failed sink.
std::size_t write_trace(const ActivationTrace& trace, std::ostream& out);
void write_trace_file(const ActivationTrace& trace, const std::string& path);

// Throws BadMagic, VersionMismatch, TruncatedPayload or NonFiniteValue.
[[nodiscard]] ActivationTrace read_trace(std::istream& in);
[[nodiscard]] ActivationTrace read_trace_file(const std::string& path);

struct RedundancySpec {
  LayerIndex base = 1;
  std::uint32_t offset = 1;
  double noise_scale = 0.0;
};

// Deterministic fixture generator. Independent layers are i.i.d. standard
// Gaussian; for every spec entry, layer base+offset (both h and y) is a copy
// of layer base plus Gaussian noise of the given scale. Entries are applied in
// order. Values are rounded to f32 so that synthesized traces round-trip
// through D2M-TRACE exactly. Throws OutOfRange for offsets beyond L.
[[nodiscard]] ActivationTrace synth_trace(std::uint32_t num_layers, std::uint32_t seq_len,
                                          std::uint32_t hidden_dim,
                                          const std::vector<RedundancySpec>& redundancy,
                                          std::uint64_t seed);

}  // namespace d2m
