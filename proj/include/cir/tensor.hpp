#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <cstring>

#include "cir/error.hpp"
#include "cir/rng.hpp"

namespace cir {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using MatrixXf = Matrix<float>;
using MatrixXd = Matrix<double>;
using VectorXd = Vector<double>;

inline constexpr double kZeroNormTolerance = 1e-12;

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.derived().array().isFinite().all();
}

/// Squared norm accumulated in 64-bit regardless of storage type.
template <typename Derived>
double squared_norm64(const Eigen::MatrixBase<Derived>& v) {
  return v.template cast<double>().squaredNorm();
}

template <typename Derived>
Matrix<typename Derived::Scalar> l2_normalize_rows(const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  Matrix<Scalar> out(m.rows(), m.cols());
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double norm = std::sqrt(squared_norm64(m.row(r)));
    require(norm >= kZeroNormTolerance, ErrorCode::ZeroVector,
            "row " + std::to_string(r) + " has norm below 1e-12");
    out.row(r) = (m.row(r).template cast<double>() / norm).template cast<Scalar>();
  }
  return out;
}

template <typename Derived>
Vector<typename Derived::Scalar> l2_normalize(const Eigen::MatrixBase<Derived>& v) {
  using Scalar = typename Derived::Scalar;
  const double norm = std::sqrt(squared_norm64(v));
  require(norm >= kZeroNormTolerance, ErrorCode::ZeroVector, "vector has norm below 1e-12");
  return (v.template cast<double>() / norm).template cast<Scalar>();
}

/// softmax(v / temperature) with max subtraction. Accumulates in 64-bit.
template <typename Derived>
VectorXd stable_softmax(const Eigen::MatrixBase<Derived>& v, double temperature = 1.0) {
  require(temperature > 0.0 && std::isfinite(temperature), ErrorCode::InvalidTemperature,
          "temperature must be positive, got " + std::to_string(temperature));
  VectorXd scaled = v.template cast<double>().reshaped() / temperature;
  if (scaled.size() == 0) return scaled;
  const double peak = scaled.maxCoeff();
  VectorXd e = (scaled.array() - peak).exp().matrix();
  return e / e.sum();
}

/// log(sum(exp(v))) with max subtraction.
template <typename Derived>
double log_sum_exp(const Eigen::MatrixBase<Derived>& v) {
  const auto d = v.template cast<double>();
  const double peak = d.maxCoeff();
  return peak + std::log((d.array() - peak).exp().sum());
}

/// log(sigmoid(x)) = -softplus(-x).
inline double log_sigmoid(double x) {
  if (x >= 0.0) return -std::log1p(std::exp(-x));
  return x - std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

template <typename Scalar = double>
Matrix<Scalar> gaussian_matrix(Eigen::Index rows, Eigen::Index cols, SeededRng& rng,
                               double scale) {
  require(rows >= 1 && cols >= 1, ErrorCode::InvalidArgument, "gaussian_matrix needs rows, cols >= 1");
  require(scale > 0.0, ErrorCode::InvalidArgument, "gaussian_matrix needs scale > 0");
  Matrix<Scalar> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(scale * rng.normal());
  return m;
}

/// FNV-1a over raw bytes. Used for content hashes of tensors and artifacts.
inline std::uint64_t fnv1a64(const void* data, std::size_t size,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename Scalar>
std::uint64_t tensor_hash(const Matrix<Scalar>& m, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const std::int64_t shape[2] = {m.rows(), m.cols()};
  h = fnv1a64(shape, sizeof(shape), h);
  return fnv1a64(m.data(), sizeof(Scalar) * static_cast<std::size_t>(m.size()), h);
}

}  // namespace cir
