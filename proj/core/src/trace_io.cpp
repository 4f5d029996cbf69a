#include "d2m/trace_io.hpp"

#include <cmath>
#include <fstream>
#include <random>

#include "binary_io.hpp"
#include "d2m/error.hpp"

namespace d2m {

namespace {

constexpr std::string_view kMagic = "D2MT";

void check_block(const Matrix& m, std::uint32_t T, std::uint32_t d, const char* kind,
                 std::size_t layer) {
  if (m.rows() != T || m.cols() != d) {
    fail(ErrorCode::DimensionMismatch, std::string(kind) + " of layer " +
                                           std::to_string(layer) + " is not " +
                                           std::to_string(T) + "x" + std::to_string(d));
  }
  if (!m.allFinite()) {
    fail(ErrorCode::NonFiniteValue,
         std::string(kind) + " of layer " + std::to_string(layer) + " has non-finite values");
  }
}

Matrix read_block(detail::Reader& r, std::uint32_t T, std::uint32_t d, const char* kind,
                  std::size_t layer) {
  Matrix m(T, d);
  std::vector<float> row(d);
  for (std::uint32_t t = 0; t < T; ++t) {
    r.bytes(row.data(), row.size() * sizeof(float), kind);
    for (std::uint32_t j = 0; j < d; ++j) {
      if (!std::isfinite(row[j])) {
        fail(ErrorCode::NonFiniteValue, std::string(kind) + " of layer " +
                                            std::to_string(layer) + ", token " +
                                            std::to_string(t) + " is non-finite");
      }
      m(t, j) = row[j];
    }
  }
  return m;
}

}  // namespace

bool operator==(const ActivationTrace& a, const ActivationTrace& b) {
  if (a.num_layers != b.num_layers || a.seq_len != b.seq_len || a.hidden_dim != b.hidden_dim ||
      a.mlp_inputs.size() != b.mlp_inputs.size() ||
      a.layer_outputs.size() != b.layer_outputs.size()) {
    return false;
  }
  for (std::size_t l = 0; l < a.mlp_inputs.size(); ++l) {
    if (a.mlp_inputs[l] != b.mlp_inputs[l] || a.layer_outputs[l] != b.layer_outputs[l]) {
      return false;
    }
  }
  return true;
}

void validate_trace(const ActivationTrace& trace) {
  if (trace.mlp_inputs.size() != trace.num_layers ||
      trace.layer_outputs.size() != trace.num_layers) {
    fail(ErrorCode::DimensionMismatch, "trace must hold h and y for all " +
                                           std::to_string(trace.num_layers) + " layers");
  }
  for (std::size_t l = 0; l < trace.num_layers; ++l) {
    check_block(trace.mlp_inputs[l], trace.seq_len, trace.hidden_dim, "h", l + 1);
    check_block(trace.layer_outputs[l], trace.seq_len, trace.hidden_dim, "y", l + 1);
  }
}

std::size_t write_trace(const ActivationTrace& trace, std::ostream& out) {
  validate_trace(trace);
  detail::Writer w(out);
  w.magic(kMagic);
  w.u32(kTraceVersion);
  w.u32(trace.num_layers);
  w.u32(trace.seq_len);
  w.u32(trace.hidden_dim);
  std::vector<float> row(trace.hidden_dim);
  for (const auto* blocks : {&trace.mlp_inputs, &trace.layer_outputs}) {
    for (const Matrix& m : *blocks) {
      for (Eigen::Index t = 0; t < m.rows(); ++t) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) row[j] = static_cast<float>(m(t, j));
        w.bytes(row.data(), row.size() * sizeof(float));
      }
    }
  }
  return w.count();
}

void write_trace_file(const ActivationTrace& trace, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::IoFailure, "cannot open '" + path + "' for writing");
  write_trace(trace, out);
  out.close();
  if (!out) fail(ErrorCode::IoFailure, "failed to finish writing '" + path + "'");
}

ActivationTrace read_trace(std::istream& in) {
  detail::Reader r(in);
  r.expect_magic(kMagic);
  const std::uint32_t version = r.u32("version");
  if (version != kTraceVersion) {
    fail(ErrorCode::VersionMismatch, "trace version " + std::to_string(version) +
                                         ", expected " + std::to_string(kTraceVersion));
  }
  ActivationTrace trace;
  trace.num_layers = r.u32("L");
  trace.seq_len = r.u32("T");
  trace.hidden_dim = r.u32("d");
  if (trace.num_layers == 0 || trace.seq_len == 0 || trace.hidden_dim == 0) {
    fail(ErrorCode::DimensionMismatch, "trace header has a zero dimension");
  }
  trace.mlp_inputs.reserve(trace.num_layers);
  trace.layer_outputs.reserve(trace.num_layers);
  for (std::uint32_t l = 0; l < trace.num_layers; ++l) {
    trace.mlp_inputs.push_back(read_block(r, trace.seq_len, trace.hidden_dim, "h", l + 1));
  }
  for (std::uint32_t l = 0; l < trace.num_layers; ++l) {
    trace.layer_outputs.push_back(read_block(r, trace.seq_len, trace.hidden_dim, "y", l + 1));
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    fail(ErrorCode::DimensionMismatch, "trailing bytes after trace payload");
  }
  return trace;
}

ActivationTrace read_trace_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoFailure, "cannot open trace '" + path + "'");
  return read_trace(in);
}

ActivationTrace synth_trace(std::uint32_t num_layers, std::uint32_t seq_len,
                            std::uint32_t hidden_dim,
                            const std::vector<RedundancySpec>& redundancy, std::uint64_t seed) {
  if (num_layers == 0 || seq_len == 0 || hidden_dim == 0) {
    fail(ErrorCode::OutOfRange, "trace dimensions must be positive");
  }
  for (const RedundancySpec& spec : redundancy) {
    if (spec.base == 0 || spec.offset == 0 || spec.base + spec.offset > num_layers) {
      fail(ErrorCode::OutOfRange, "redundancy (base " + std::to_string(spec.base) +
                                      ", offset " + std::to_string(spec.offset) +
                                      ") outside 1.." + std::to_string(num_layers));
    }
    if (!(spec.noise_scale >= 0.0) || !std::isfinite(spec.noise_scale)) {
      fail(ErrorCode::OutOfRange, "noise_scale must be finite and non-negative");
    }
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const auto to_f32 = [](double v) { return static_cast<double>(static_cast<float>(v)); };
  const auto random_block = [&] {
    Matrix m(seq_len, hidden_dim);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = to_f32(gauss(rng));
    return m;
  };

  ActivationTrace trace;
  trace.num_layers = num_layers;
  trace.seq_len = seq_len;
  trace.hidden_dim = hidden_dim;
  for (std::uint32_t l = 0; l < num_layers; ++l) {
    trace.mlp_inputs.push_back(random_block());
    trace.layer_outputs.push_back(random_block());
  }
  for (const RedundancySpec& spec : redundancy) {
    const std::size_t src = spec.base - 1;
    const std::size_t dst = src + spec.offset;
    for (auto* blocks : {&trace.mlp_inputs, &trace.layer_outputs}) {
      Matrix copy = (*blocks)[src];
      for (Eigen::Index i = 0; i < copy.size(); ++i) {
        copy.data()[i] = to_f32(copy.data()[i] + spec.noise_scale * gauss(rng));
      }
      (*blocks)[dst] = std::move(copy);
    }
  }
  return trace;
}

}  // namespace d2m
