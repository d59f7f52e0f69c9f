#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "bondlab/curve_spaces.hpp"
#include "bondlab/rng.hpp"

using namespace bondlab;

namespace {

HSpacePtr default_space() {
  static HSpacePtr space = make_space({10.0, 256, 0.75});
  return space;
}

CurveH gaussian_bump(HSpacePtr space, double center = 2.0) {
  Vec v(space->size());
  for (Index k = 0; k < v.size(); ++k) {
    const double T = space->times()[k];
    v[k] = std::exp(-(T - center) * (T - center));
  }
  return make_curve(space, std::move(v));
}

}  // namespace

TEST_CASE("grid validation") {
  CHECK_THROWS_AS(make_space({10.0, 8, 0.75}), InvalidInput);
  CHECK_THROWS_AS(make_space({10.0, 64, 0.5}), InvalidInput);
  CHECK_THROWS_AS(make_space({10.0, 64, 1.0}), InvalidInput);
  CHECK_THROWS_AS(make_space({-1.0, 64, 0.75}), InvalidInput);
}

TEST_CASE("sobolev norm: zero, homogeneity, fine-grid oracle") {
  auto space = default_space();
  CHECK(sobolev_norm(make_curve(space, Vec::Zero(space->size()))) == 0.0);

  CurveH f = gaussian_bump(space);
  const double n1 = sobolev_norm(f);
  CurveH f2 = make_curve(space, Vec(2.0 * f.values));
  CHECK(sobolev_norm(f2) == doctest::Approx(2.0 * n1).epsilon(1e-12));

  // fine-grid quadrature oracle: same functional, 4x resolution
  auto fine = make_space({10.0, 4 * (256 - 1) + 1, 0.75});
  const double n_fine = sobolev_norm(gaussian_bump(fine));
  CHECK(std::abs(n1 - n_fine) / n_fine < 0.01);
}

TEST_CASE("pairing: point masses, bilinearity, density quadrature oracle") {
  auto space = default_space();
  CurveH f = gaussian_bump(space, 3.0);
  CurveH g = sample_curve(space, 42);

  DualCurve d0 = DualCurve::delta(space, 0);
  CHECK(pair(d0, f) == doctest::Approx(f.values[0]).epsilon(1e-14));

  DualCurve phi = DualCurve::from_density(space, sample_curve_values(*space, 7));
  const double lhs = pair(phi, make_curve(space, Vec(f.values + g.values)));
  const double rhs = pair(phi, f) + pair(phi, g);
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));

  // independent trapezoid quadrature of density * f
  const Vec dens = sample_curve_values(*space, 7);
  double quad = 0.0;
  for (Index k = 0; k < space->size(); ++k)
    quad += space->quad_weights()[k] * dens[k] * f.values[k];
  CHECK(pair(phi, f) == doctest::Approx(quad).epsilon(1e-10));

  auto other = make_space({10.0, 128, 0.75});
  CHECK_THROWS_AS(pair(phi, gaussian_bump(other)), InvalidInput);
}

TEST_CASE("translation: identity, exact semigroup on aligned shifts, contraction") {
  auto space = default_space();
  CurveH f = sample_curve(space, 5);

  CurveH same = translate(f, 0.0);
  CHECK((same.values - f.values).cwiseAbs().maxCoeff() == 0.0);

  const double dx = space->spacing();
  CurveH two = translate(translate(f, 3.0 * dx), 5.0 * dx);
  CurveH one = translate(f, 8.0 * dx);
  CHECK((two.values - one.values).cwiseAbs().maxCoeff() <= 1e-13);

  CHECK_THROWS_AS(translate(f, -0.1), std::domain_error);

  for (std::uint64_t trial = 0; trial < 50; ++trial) {
    CurveH h = sample_curve(space, 1000 + trial);
    const double a =
        5.0 * rng::uniform(rng::pack(2024, trial, 0, 0, 0));
    const double norm0 = sobolev_norm(h);
    const double norm1 = sobolev_norm(translate(h, a));
    CHECK(norm1 <= norm0 * (1.0 + 1e-6));
  }
}

TEST_CASE("riesz map round trip and positivity") {
  auto space = default_space();
  CurveH zero = make_curve(space, Vec::Zero(space->size()));
  CHECK(pair(riesz_to_dual(zero), zero) == 0.0);

  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    CurveH f = sample_curve(space, 300 + trial);
    DualCurve u = riesz_to_dual(f);
    CurveH back = riesz_to_primal(u);
    const double rel = (back.values - f.values).norm() /
                       std::max(1e-300, f.values.norm());
    CHECK(rel <= 1e-10);
    // <S f, f> equals the H inner product and is nonnegative
    const double q = pair(u, f);
    CHECK(q == doctest::Approx(sobolev_inner(f, f)).epsilon(1e-12));
    CHECK(q >= 0.0);
  }
}

TEST_CASE("gram consistency of the duality pairing") {
  auto space = default_space();
  for (std::uint64_t trial = 0; trial < 10; ++trial) {
    CurveH f = sample_curve(space, 500 + trial);
    CurveH g = sample_curve(space, 600 + trial);
    const double lhs = pair(riesz_to_dual(f), g);
    const double rhs = sobolev_inner(f, g);
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));
  }
}

TEST_CASE("point evaluation has near-constant dual norm away from the ends") {
  // The interval truncation leaves power-law boundary layers in the dual
  // norm of point evaluation; on the middle half of the grid the profile is
  // flat. The layers shrink as the window moves inward.
  auto space = default_space();
  const Index m = space->size();
  auto spread = [&](double margin) {
    double lo = 1e300, hi = 0.0;
    for (Index k = static_cast<Index>(margin * m);
         k <= m - 1 - static_cast<Index>(margin * m); ++k) {
      const double dn = space->delta_norm(k);
      lo = std::min(lo, dn);
      hi = std::max(hi, dn);
    }
    return (hi - lo) / lo;
  };
  CHECK(spread(0.25) < 0.05);
  CHECK(spread(0.3) < spread(0.2));
}

TEST_CASE("pointwise multiplication and the algebra bound") {
  auto space = default_space();
  CurveH g = sample_curve(space, 77);

  MultiplierM one{1.0, make_curve(space, Vec::Zero(space->size()))};
  CurveH same = pointwise_multiply(one, g);
  CHECK((same.values - g.values).cwiseAbs().maxCoeff() == 0.0);

  MultiplierM zero{0.0, make_curve(space, Vec::Zero(space->size()))};
  CHECK(sobolev_norm(pointwise_multiply(zero, g)) == 0.0);

  const double cmult = space->multiplier_bound();
  CHECK(cmult > 0.0);
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    MultiplierM F = sample_multiplier(space, 9000 + trial);
    CurveH h = sample_curve(space, 9500 + trial);
    CurveH prod = pointwise_multiply(F, h);
    // sampled values equal the coordinatewise product
    const Vec expect = multiplier_values(F).cwiseProduct(h.values);
    CHECK((prod.values - expect).cwiseAbs().maxCoeff() == 0.0);
    CHECK(sobolev_norm(prod) <=
          cmult * multiplier_norm(F) * sobolev_norm(h) * (1.0 + 1e-12));
  }
}

TEST_CASE("dual multiplication is the transpose of pointwise multiplication") {
  auto space = default_space();
  for (std::uint64_t trial = 0; trial < 10; ++trial) {
    MultiplierM F = sample_multiplier(space, 400 + trial);
    CurveH g = sample_curve(space, 450 + trial);
    DualCurve phi = DualCurve::from_density(space, sample_curve_values(*space, 470 + trial));
    phi.point_masses.push_back(PointMass{5, 0.7});
    const double lhs = pair(dual_multiply(F, phi), g);
    const double rhs = pair(phi, pointwise_multiply(F, g));
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
    CHECK(dual_norm(dual_multiply(F, phi)) <=
          space->dual_multiplier_bound() * multiplier_norm(F) *
              dual_norm(phi) * (1.0 + 1e-12));
  }
}

TEST_CASE("translate is linear") {
  auto space = default_space();
  CurveH f = sample_curve(space, 21);
  CurveH g = sample_curve(space, 22);
  const double a = 1.234;
  CurveH lhs = translate(make_curve(space, Vec(f.values + 3.0 * g.values)), a);
  Vec rhs = translate(f, a).values + 3.0 * translate(g, a).values;
  CHECK((lhs.values - rhs).cwiseAbs().maxCoeff() <= 1e-12);
}
