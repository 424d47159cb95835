#pragma once

// Dense matrix types and error taxonomy shared by every module.
//
// All tensors in this library are 2-D, row-major, and templated on the
// scalar type.  A point cloud is rows of points, a feature map is rows of
// feature vectors, a row vector is a 1xC matrix.  Row-major storage keeps
// per-row operations (gather, concat, norm) cache-friendly and makes the
// flattened layout of a matrix unambiguous.

#include <Eigen/Dense>

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace pf {

template <class Scalar>
using Matrix2D = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Index = Eigen::Index;

// Raised when operand shapes are incompatible.  The message always carries
// both shapes so the failure is diagnosable from the what() string alone.
class ShapeError : public std::invalid_argument {
 public:
  explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Raised when an API is used outside its contract (backward from a
// non-scalar, invalid argument values, empty inputs where forbidden).
class UsageError : public std::invalid_argument {
 public:
  explicit UsageError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Raised on malformed external input (files, checkpoints, manifests).
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Raised on invalid configuration (unknown key, inconsistent values).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

inline std::string shape_str(Index rows, Index cols) {
  std::ostringstream os;
  os << rows << "x" << cols;
  return os.str();
}

template <class Scalar>
std::string shape_str(const Matrix2D<Scalar>& m) {
  return shape_str(m.rows(), m.cols());
}

template <class Scalar>
void require_shape(const Matrix2D<Scalar>& m, Index rows, Index cols, const char* what) {
  if (m.rows() != rows || m.cols() != cols) {
    throw ShapeError(std::string(what) + ": expected " + shape_str(rows, cols) + ", got " +
                     shape_str(m));
  }
}

template <class Scalar>
void require_same_cols(const Matrix2D<Scalar>& a, const Matrix2D<Scalar>& b, const char* what) {
  if (a.cols() != b.cols()) {
    throw ShapeError(std::string(what) + ": column mismatch " + shape_str(a) + " vs " +
                     shape_str(b));
  }
}

template <class Scalar>
bool all_finite(const Matrix2D<Scalar>& m) {
  return m.allFinite();
}

}  // namespace pf
