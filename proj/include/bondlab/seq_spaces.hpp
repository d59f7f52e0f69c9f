#pragma once

#include <cmath>

#include "bondlab/types.hpp"

namespace bondlab {

// Weighted sequence spaces over truncated factor vectors. Coordinates are
// 1-based: coordinate i of a length-N vector sits at index i-1.
//
// Two weight conventions coexist. PaperWeight uses (1+i^2)^{s/2}, the norm
// convention of the claim spaces; JWeight uses i^s, the symbol of the index
// operator j. They are norm-equivalent with sharp constants 1 and 2^{s/2}
// (from i^2 <= 1+i^2 <= 2 i^2), so either can back a membership statement.
enum class WeightConvention { PaperWeight, JWeight };

struct WeightSpec {
  double s = 0.0;
  WeightConvention convention = WeightConvention::PaperWeight;
};

inline double weight_at(const WeightSpec& w, Index i) {
  const double di = static_cast<double>(i);
  switch (w.convention) {
    case WeightConvention::PaperWeight:
      return std::pow(1.0 + di * di, 0.5 * w.s);
    case WeightConvention::JWeight:
      return std::pow(di, w.s);
  }
  return 1.0;
}

inline Vec weight_vector(const WeightSpec& w, Index n) {
  if (n < 1) throw InvalidInput("weight_vector: need n >= 1");
  if (!std::isfinite(w.s)) throw InvalidInput("weight_vector: s not finite");
  Vec out(n);
  for (Index i = 0; i < n; ++i) out[i] = weight_at(w, i + 1);
  return out;
}

/// Diagonal multiplier realizing the weight on an N-dimensional truncation.
/// Entries are strictly positive and nondecreasing in the index.
inline Eigen::DiagonalMatrix<double, Eigen::Dynamic> weight_matrix(
    const WeightSpec& w, Index n) {
  return weight_vector(w, n).asDiagonal();
}

/// (sum_i weight(i)^2 x_i^2)^{1/2}; the plain Euclidean norm when s = 0.
template <typename Derived>
double weighted_norm(const Eigen::MatrixBase<Derived>& x,
                     const WeightSpec& w) {
  if (!x.allFinite())
    throw InvalidInput("weighted_norm: non-finite coordinate");
  double acc = 0.0;
  for (Index i = 0; i < x.size(); ++i) {
    const double wx = weight_at(w, i + 1) * x[i];
    acc += wx * wx;
  }
  return std::sqrt(acc);
}

/// Coordinate i of the result is i^a x_i. Nonnegative powers only; inverse
/// powers belong to the explicit pseudo-inverse machinery, not here.
template <typename Derived>
Vec apply_j_power(const Eigen::MatrixBase<Derived>& x, double a) {
  if (a < 0.0) throw std::domain_error("apply_j_power: negative power");
  Vec out(x.size());
  for (Index i = 0; i < x.size(); ++i)
    out[i] = std::pow(static_cast<double>(i + 1), a) * x[i];
  return out;
}

}  // namespace bondlab
