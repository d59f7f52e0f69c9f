#pragma once

#include <memory>
#include <vector>

#include "bondlab/types.hpp"

namespace bondlab {

// Discretized state space for price curves. A curve lives on a uniform
// maturity grid 0 = T_0 < ... < T_{M-1} = t_max and is treated as zero beyond
// t_max. The Hilbert structure is the Gagliardo form of order omega,
//
//   ||f||^2 = int f^2 + int int |f(x)-f(y)|^2 |x-y|^{-1-2 omega} dx dy,
//
// assembled once per grid into a dense symmetric positive definite Gram
// matrix. Quadrature is trapezoidal over the grid square; the singular
// diagonal strip |x-y| <= dx/2 is excluded from the pair sum and compensated
// with the analytic strip integral of |x-y|^{1-2 omega} against a local
// finite-difference slope, which is the degree to which a grid function can
// resolve the near-diagonal increment anyway.

struct MaturityGrid {
  double t_max = 10.0;
  Index size = 256;
  double omega = 0.75;
};

class HSpace {
 public:
  explicit HSpace(const MaturityGrid& grid);

  const MaturityGrid& grid() const { return grid_; }
  Index size() const { return grid_.size; }
  double spacing() const { return dx_; }
  const Vec& times() const { return times_; }
  const Vec& quad_weights() const { return wq_; }
  const Mat& gram() const { return gram_; }

  double inner(const Vec& f, const Vec& g) const;
  double norm(const Vec& f) const { return std::sqrt(inner(f, f)); }
  Vec apply_gram(const Vec& v) const;
  Vec solve_gram(const Vec& u) const;

  /// Dual norm of the point evaluation at grid node k.
  double delta_norm(Index node) const;

  /// Recorded constant for ||F g||_H <= C ||F||_M ||g||_H on this grid.
  double multiplier_bound() const { return cmult_; }
  /// Same bound for the transposed action on dual elements.
  double dual_multiplier_bound() const { return cdualmult_; }

  /// Linear interpolation of grid samples, zero beyond t_max.
  double interp(const Vec& values, double T) const;

 private:
  void assemble_gram();
  void measure_multiplier_bounds();

  MaturityGrid grid_;
  double dx_ = 0.0;
  Vec times_;
  Vec wq_;
  Mat gram_;
  Eigen::LLT<Mat> llt_;
  double cmult_ = 0.0;
  double cdualmult_ = 0.0;
};

using HSpacePtr = std::shared_ptr<const HSpace>;

HSpacePtr make_space(const MaturityGrid& grid);

struct CurveH {
  HSpacePtr space;
  Vec values;
  bool zero_beyond = true;

  double value_at(double T) const { return space->interp(values, T); }
};

/// Element of R (+) H: a constant plus a decaying curve, acting on curves by
/// pointwise multiplication.
struct MultiplierM {
  double constant = 0.0;
  CurveH curve;
};

struct PointMass {
  Index node = 0;
  double weight = 0.0;
};

// Dual element restricted to point masses plus a grid density. `coeffs`
// stores plain functional coefficients: the pairing with a curve is
// coeffs . values plus the point-mass evaluations. A density d(T) enters
// through from_density, which folds the quadrature weights in once.
struct DualCurve {
  HSpacePtr space;
  std::vector<PointMass> point_masses;
  Vec coeffs;  // size 0 or grid size

  static DualCurve delta(HSpacePtr space, Index node, double weight = 1.0);
  static DualCurve from_density(HSpacePtr space, const Vec& density);
  static DualCurve from_coeffs(HSpacePtr space, Vec coeffs);

  /// Functional coefficients with point masses folded in.
  Vec total_coeffs() const;
};

void check_same_space(const HSpacePtr& a, const HSpacePtr& b,
                      const char* where);

CurveH make_curve(HSpacePtr space, Vec values);
Vec multiplier_values(const MultiplierM& F);
double multiplier_norm(const MultiplierM& F);

double sobolev_norm(const CurveH& f);
double sobolev_inner(const CurveH& f, const CurveH& g);

/// Duality pairing <phi, f>.
double pair(const DualCurve& phi, const CurveH& f);

/// Left translation (T_a f)(T) = f(a+T), zero beyond t_max, a >= 0.
CurveH translate(const CurveH& f, double a);
MultiplierM translate(const MultiplierM& F, double a);

enum class RieszDirection { ToDual, ToPrimal };

DualCurve riesz_to_dual(const CurveH& f);
CurveH riesz_to_primal(const DualCurve& phi);

CurveH pointwise_multiply(const MultiplierM& F, const CurveH& g);

/// Transposed multiplier action on a dual element: <F phi, g> = <phi, F g>.
DualCurve dual_multiply(const MultiplierM& F, const DualCurve& phi);

double dual_norm(const DualCurve& phi);

// Deterministic pseudo-random smooth decaying curves. Shared by the
// grid-constant measurement and by property tests; curves vanish at t_max so
// translation genuinely contracts.
Vec sample_curve_values(const HSpace& space, std::uint64_t seed);
CurveH sample_curve(HSpacePtr space, std::uint64_t seed);
MultiplierM sample_multiplier(HSpacePtr space, std::uint64_t seed);

}  // namespace bondlab
