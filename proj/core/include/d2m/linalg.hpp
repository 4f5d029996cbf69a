#pragma once

#include <Eigen/Core>

namespace d2m {

// Row-major so that a T x d activation block maps token t to row t, matching
// the on-disk layout of traces and weights.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

using MatrixMap = Eigen::Map<Matrix>;
using ConstMatrixMap = Eigen::Map<const Matrix>;

}  // namespace d2m
