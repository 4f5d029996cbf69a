#include "d2m/similarity.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "binary_io.hpp"
#include "d2m/error.hpp"
#include "d2m/parallel.hpp"

namespace d2m {

namespace {

constexpr std::string_view kMagic = "D2MS";
constexpr std::uint32_t kVersion = 1;

void check_same_shape(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    fail(ErrorCode::DimensionMismatch, "operands must share T and d");
  }
  if (a.rows() == 0) fail(ErrorCode::DimensionMismatch, "empty sequence");
}

}  // namespace

double seq_avg_cosine(const Matrix& a, const Matrix& b) {
  check_same_shape(a, b);
  double sum = 0.0;
  for (Eigen::Index t = 0; t < a.rows(); ++t) {
    const double na = a.row(t).norm();
    const double nb = b.row(t).norm();
    if (na == 0.0 || nb == 0.0) {
      fail(ErrorCode::ZeroVector, "zero-norm token at index " + std::to_string(t));
    }
    // Clamp guards against |cos| exceeding 1 by rounding.
    sum += std::clamp(a.row(t).dot(b.row(t)) / (na * nb), -1.0, 1.0);
  }
  return sum / static_cast<double>(a.rows());
}

double norm_mismatch(const Matrix& a, const Matrix& b) {
  check_same_shape(a, b);
  double sum = 0.0;
  for (Eigen::Index t = 0; t < a.rows(); ++t) {
    const double nb = b.row(t).norm();
    if (nb == 0.0) fail(ErrorCode::ZeroVector, "zero-norm token at index " + std::to_string(t));
    sum += std::abs(a.row(t).norm() - nb) / nb;
  }
  return sum / static_cast<double>(a.rows());
}

SimilarityMatrices build_matrices(const ActivationTrace& trace, unsigned jobs) {
  validate_trace(trace);
  const Eigen::Index L = trace.num_layers;
  SimilarityMatrices m;
  m.s_out = Matrix::Identity(L, L);
  m.s_mlp = Matrix::Identity(L, L);
  m.delta_norm = Matrix::Zero(L, L);

  std::vector<std::pair<Eigen::Index, Eigen::Index>> pairs;
  for (Eigen::Index a = 0; a < L; ++a) {
    for (Eigen::Index b = a + 1; b < L; ++b) pairs.emplace_back(a, b);
  }
  parallel_for(pairs.size(), jobs, [&](std::size_t i) {
    const auto [a, b] = pairs[i];
    const double so = seq_avg_cosine(trace.layer_outputs[a], trace.layer_outputs[b]);
    const double sm = seq_avg_cosine(trace.mlp_inputs[a], trace.mlp_inputs[b]);
    const double dn = norm_mismatch(trace.mlp_inputs[a], trace.mlp_inputs[b]);
    m.s_out(a, b) = m.s_out(b, a) = so;
    m.s_mlp(a, b) = m.s_mlp(b, a) = sm;
    m.delta_norm(a, b) = m.delta_norm(b, a) = dn;
  });
  return m;
}

void validate_matrices(const SimilarityMatrices& m) {
  const Eigen::Index L = m.s_out.rows();
  for (const Matrix* x : {&m.s_out, &m.s_mlp, &m.delta_norm}) {
    if (x->rows() != L || x->cols() != L) {
      fail(ErrorCode::DimensionMismatch, "similarity matrices must all be L x L");
    }
    if (!x->allFinite()) fail(ErrorCode::NonFiniteValue, "similarity matrix has non-finite entries");
  }
  if (L == 0) fail(ErrorCode::DimensionMismatch, "similarity matrices are empty");
}

void write_heatmap_csv(const Matrix& m, std::ostream& out) {
  out << "layer";
  for (Eigen::Index c = 0; c < m.cols(); ++c) out << ',' << (c + 1);
  out << '\n' << std::setprecision(9);
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    out << (r + 1);
    for (Eigen::Index c = 0; c < m.cols(); ++c) out << ',' << m(r, c);
    out << '\n';
  }
  if (!out) fail(ErrorCode::IoFailure, "failed writing heatmap CSV");
}

Matrix read_heatmap_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line.rfind("layer", 0) != 0) {
    fail(ErrorCode::InvalidArgument, "heatmap CSV must start with a 'layer,...' header");
  }
  const auto L = static_cast<Eigen::Index>(std::count(line.begin(), line.end(), ','));
  Matrix m(L, L);
  for (Eigen::Index r = 0; r < L; ++r) {
    if (!std::getline(in, line)) fail(ErrorCode::TruncatedPayload, "heatmap CSV has too few rows");
    std::istringstream row(line);
    std::string cell;
    std::getline(row, cell, ',');  // layer label
    for (Eigen::Index c = 0; c < L; ++c) {
      if (!std::getline(row, cell, ',')) {
        fail(ErrorCode::TruncatedPayload, "heatmap CSV row " + std::to_string(r + 1) + " is short");
      }
      m(r, c) = std::stod(cell);
    }
  }
  return m;
}

void export_heatmap(const SimilarityMatrices& m, const std::string& directory) {
  validate_matrices(m);
  std::error_code ec;
  std::filesystem::create_directories(directory, ec);
  const std::pair<const char*, const Matrix*> files[] = {
      {"s_out.csv", &m.s_out}, {"s_mlp.csv", &m.s_mlp}, {"delta_norm.csv", &m.delta_norm}};
  for (const auto& [name, mat] : files) {
    const std::string path = (std::filesystem::path(directory) / name).string();
    std::ofstream out(path, std::ios::trunc);
    if (!out) fail(ErrorCode::IoFailure, "cannot open '" + path + "' for writing");
    write_heatmap_csv(*mat, out);
  }
}

std::size_t write_matrices(const SimilarityMatrices& m, std::ostream& out) {
  validate_matrices(m);
  detail::Writer w(out);
  w.magic(kMagic);
  w.u32(kVersion);
  w.u32(m.num_layers());
  for (const Matrix* x : {&m.s_out, &m.s_mlp, &m.delta_norm}) {
    w.bytes(x->data(), static_cast<std::size_t>(x->size()) * sizeof(double));
  }
  return w.count();
}

SimilarityMatrices read_matrices(std::istream& in) {
  detail::Reader r(in);
  r.expect_magic(kMagic);
  const std::uint32_t version = r.u32("version");
  if (version != kVersion) {
    fail(ErrorCode::VersionMismatch, "matrices cache version " + std::to_string(version));
  }
  const std::uint32_t L = r.u32("L");
  if (L == 0 || L > 65536) fail(ErrorCode::DimensionMismatch, "implausible layer count");
  SimilarityMatrices m;
  for (Matrix* x : {&m.s_out, &m.s_mlp, &m.delta_norm}) {
    x->resize(L, L);
    r.bytes(x->data(), static_cast<std::size_t>(x->size()) * sizeof(double), "matrix data");
  }
  validate_matrices(m);
  return m;
}

void write_matrices_file(const SimilarityMatrices& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::IoFailure, "cannot open '" + path + "' for writing");
  write_matrices(m, out);
}

SimilarityMatrices read_matrices_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoFailure, "cannot open matrices cache '" + path + "'");
  return read_matrices(in);
}

}  // namespace d2m
