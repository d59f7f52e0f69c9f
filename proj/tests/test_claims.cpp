#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "bondlab/claims.hpp"
#include "bondlab/rng.hpp"

using namespace bondlab;

namespace {

HSpacePtr claim_space() {
  static HSpacePtr s = make_space({10.0, 64, 0.75});
  return s;
}

MarketConfig noise_only_config(Index factors, Index steps = 50) {
  MarketConfig cfg;
  cfg.space = claim_space();
  cfg.factors = factors;
  cfg.horizon = 1.0;
  cfg.steps = steps;
  Vec v(cfg.space->size());
  for (Index k = 0; k < v.size(); ++k)
    v[k] = std::exp(-0.03 * cfg.space->times()[k]);
  cfg.p0 = make_curve(cfg.space, std::move(v));
  return cfg;
}

MarketConfig binary_market_config(double scale, Index steps) {
  MarketConfig cfg = noise_only_config(1, steps);
  Vec curve(cfg.space->size());
  for (Index k = 0; k < curve.size(); ++k)
    curve[k] = -scale * std::exp(-0.8 * cfg.space->times()[k]);
  cfg.vol.kind = VolatilityModel::Kind::DeterministicDiagonal;
  cfg.vol.columns = {
      MultiplierM{scale, make_curve(cfg.space, std::move(curve))}};
  return cfg;
}

KernelH make_kernel(Vec coeffs, TimeMod::Kind kind = TimeMod::Kind::None,
                    double param = 0.0) {
  KernelH h;
  h.factor_coeffs = std::move(coeffs);
  h.time_mod.kind = kind;
  h.time_mod.param = param;
  h.time_mod.period = 1.0;
  return h;
}

ClaimSpec wiener_claim(KernelH h) {
  CylinderClaim c;
  c.kernels = {std::move(h)};
  c.f = Polynomial::linear(Vec::Ones(1));
  return ClaimSpec{std::move(c), "W(h)"};
}

double l2_relative_error(const Vec& a, const Vec& b) {
  return std::sqrt((a - b).squaredNorm()) / std::sqrt(b.squaredNorm());
}

}  // namespace

TEST_CASE("gaussian moments agree with classical values") {
  Vec m(2);
  m << 0.5, -1.0;
  Mat cov(2, 2);
  cov << 2.0, 0.3, 0.3, 1.5;
  // E[x] and E[x^2]
  CHECK(gaussian_moment({1, 0}, m, cov) == doctest::Approx(0.5));
  CHECK(gaussian_moment({2, 0}, m, cov) == doctest::Approx(2.0 + 0.25));
  // E[x y] = cov + m_x m_y
  CHECK(gaussian_moment({1, 1}, m, cov) == doctest::Approx(0.3 - 0.5));
  // E[x^4] for centered: 3 sigma^4
  Vec z = Vec::Zero(2);
  CHECK(gaussian_moment({4, 0}, z, cov) == doctest::Approx(3.0 * 4.0));
  CHECK(gaussian_moment({2, 2}, z, cov) ==
        doctest::Approx(2.0 * 1.5 + 2.0 * 0.09));
}

TEST_CASE("realize: constant explicit claim") {
  MarketConfig cfg = noise_only_config(2, 10);
  auto ens = make_ensemble(cfg, 16, 5, Measure::Q);
  ExplicitIntegrand e;
  e.c = 3.5;
  e.rule = kernel_rule(make_kernel(Vec::Zero(2)));
  Vec x = realize_claim(ClaimSpec{e, "const"}, ens);
  CHECK((x.array() - 3.5).abs().maxCoeff() == 0.0);
}

TEST_CASE("realize: exponential martingale has unit mean") {
  MarketConfig cfg = noise_only_config(4, 50);
  auto ens = make_ensemble(cfg, 40000, 11, Measure::Q);
  ExponentialMartingale em;
  Vec h(4);
  h << 0.5, 0.3, -0.2, 0.4;
  em.h = make_kernel(h);
  Vec x = realize_claim(ClaimSpec{em, "expmart"}, ens);
  const double m = x.mean();
  const double sd =
      std::sqrt((x.array() - m).square().sum() / (x.size() - 1.0));
  CHECK(std::abs(m - 1.0) <= 3.0 * sd / std::sqrt(double(x.size())));
}

TEST_CASE("realize: binary price matches the Gaussian quadrature oracle") {
  MarketConfig cfg = binary_market_config(0.3, 50);
  auto ens = make_ensemble(cfg, 40000, 3, Measure::Q);
  BinaryOption b{0.85, 2.0};
  Vec x = realize_claim(ClaimSpec{b, "binary"}, ens);
  const double mc = x.mean();
  const double sd =
      std::sqrt((x.array() - mc).square().sum() / (x.size() - 1.0));

  // oracle: ln Z_T ~ N(ln Z_0 - v/2, v) with v the discrete tail sum of
  // sigma(U - t_k)^2 dt; price by Simpson quadrature of the Gaussian density
  const double U = b.offset + cfg.horizon;
  const double z0 = cfg.p0.value_at(U);
  double v = 0.0;
  const double dt = cfg.dt();
  for (Index k = 0; k < cfg.steps; ++k) {
    const double t = dt * static_cast<double>(k);
    const double sig = 0.3 * (1.0 - std::exp(-0.8 * (U - t)));
    v += sig * sig * dt;
  }
  const double lo = (std::log(b.strike / z0) + 0.5 * v) / std::sqrt(v);
  const int n = 4000;
  const double hstep = (10.0 - lo) / n;
  double quad = 0.0;
  auto dens = [](double z) {
    return std::exp(-0.5 * z * z) / std::sqrt(2.0 * M_PI);
  };
  for (int i = 0; i < n; ++i) {
    const double a = lo + i * hstep;
    quad += hstep / 6.0 *
            (dens(a) + 4.0 * dens(a + 0.5 * hstep) + dens(a + hstep));
  }
  CHECK(std::abs(mc - quad) <= 3.0 * sd / std::sqrt(double(x.size())));
}

TEST_CASE("realize: truncation error for claims beyond the factor count") {
  MarketConfig cfg = noise_only_config(2, 10);
  auto ens = make_ensemble(cfg, 4, 5, Measure::Q);
  ExponentialMartingale em;
  em.h = make_kernel(Vec::Ones(5));
  CHECK_THROWS_AS(realize_claim(ClaimSpec{em, "wide"}, ens), TruncationError);
}

TEST_CASE("malliavin derivative") {
  MarketConfig cfg = noise_only_config(3, 20);
  auto ens = make_ensemble(cfg, 4, 21, Measure::Q);
  auto paths = simulate_paths(ens);
  const auto& plan = *ens.plan;

  SUBCASE("linear claim: D equals the kernel") {
    Vec h(3);
    h << 0.7, -0.4, 0.2;
    ClaimSpec spec = wiener_claim(make_kernel(h, TimeMod::Kind::Sine, 0.5));
    Mat d = malliavin_derivative(spec, plan, paths[0]);
    for (Index k = 0; k < plan.steps(); ++k)
      for (Index i = 0; i < 3; ++i) {
        const double expect =
            h[i] * (1.0 + 0.5 * std::sin(2.0 * M_PI * plan.time_at(k)));
        CHECK(d(k, i) == doctest::Approx(expect).epsilon(1e-12));
      }
  }

  SUBCASE("exponential martingale: D = X h, checked by bump") {
    ExponentialMartingale em;
    Vec h(3);
    h << 0.5, 0.2, -0.3;
    em.h = make_kernel(h);
    ClaimSpec spec{em, "em"};
    Mat d = malliavin_derivative(spec, plan, paths[1]);
    const double dt = plan.dt();

    for (auto [k, i] : std::vector<std::pair<Index, Index>>{
             {0, 0}, {5, 1}, {12, 2}, {19, 0}}) {
      const double eps = 1e-6;
      auto realize_em = [&](double bump) {
        double log_e = 0.0;
        for (Index kk = 0; kk < plan.steps(); ++kk) {
          const double t = plan.time_at(kk);
          for (Index ii = 1; ii <= 3; ++ii) {
            const double hv = em.h.at(t, ii);
            double dw = paths[1].dwq(kk, ii - 1);
            if (kk == k && ii - 1 == i) dw += bump;
            log_e += hv * dw - 0.5 * hv * hv * dt;
          }
        }
        return std::exp(log_e);
      };
      const double fd = (realize_em(eps) - realize_em(-eps)) / (2.0 * eps);
      CHECK(std::abs(d(k, i) - fd) <= 1e-4 * std::max(1.0, std::abs(fd)));
    }
  }

  SUBCASE("product rule on random cylinder pairs") {
    for (std::uint64_t trial = 0; trial < 5; ++trial) {
      Vec h1(3), h2(3);
      for (Index i = 0; i < 3; ++i) {
        h1[i] = rng::normal(500 + trial, 0, static_cast<std::uint64_t>(i), 0);
        h2[i] = rng::normal(600 + trial, 0, static_cast<std::uint64_t>(i), 0);
      }
      CylinderClaim ca;
      ca.kernels = {make_kernel(h1)};
      ca.f.arity = 1;
      ca.f.terms = {{{2}, 1.0}, {{1}, 0.5}};  // v^2 + v/2
      CylinderClaim cb;
      cb.kernels = {make_kernel(h2)};
      cb.f.arity = 1;
      cb.f.terms = {{{3}, 0.25}, {{0}, 1.0}};  // v^3/4 + 1

      ProductClaim pc;
      pc.lhs = std::make_shared<ClaimSpec>(ClaimSpec{ca, "a"});
      pc.rhs = std::make_shared<ClaimSpec>(ClaimSpec{cb, "b"});
      ClaimSpec prod{pc, "ab"};

      Mat d_prod = malliavin_derivative(prod, plan, paths[2]);

      auto realize_one = [&](const ClaimSpec& s) {
        return realize_claim(s, ens)[2];
      };
      const double xa = realize_one(*pc.lhs);
      const double xb = realize_one(*pc.rhs);
      Mat expect = xa * malliavin_derivative(*pc.rhs, plan, paths[2]) +
                   xb * malliavin_derivative(*pc.lhs, plan, paths[2]);
      CHECK((d_prod - expect).cwiseAbs().maxCoeff() <=
            1e-10 * std::max(1.0, expect.cwiseAbs().maxCoeff()));
    }
  }

  SUBCASE("binary options are rejected") {
    ClaimSpec spec{BinaryOption{0.9, 2.0}, "bin"};
    CHECK_THROWS_AS(malliavin_derivative(spec, plan, paths[0]),
                    std::domain_error);
  }
}

TEST_CASE("clark-ocone integrands") {
  SUBCASE("linear claims have the deterministic kernel integrand") {
    MarketConfig cfg = noise_only_config(3, 20);
    auto ens = make_ensemble(cfg, 2000, 31, Measure::Q);
    Vec h(3);
    h << 0.7, -0.4, 0.2;
    ClaimSpec spec = wiener_claim(make_kernel(h));
    auto ip = clark_ocone_integrand(spec, ens);
    CHECK(ip.backend == "analytic");
    CHECK(ip.c == doctest::Approx(0.0));
    Vec xr = reconstruct_claim(ip, ens);
    Vec x = realize_claim(spec, ens);
    CHECK((xr - x).cwiseAbs().maxCoeff() <= 1e-12);
  }

  SUBCASE("exponential martingale integrand replicates") {
    MarketConfig cfg = noise_only_config(4, 100);
    auto ens = make_ensemble(cfg, 4000, 33, Measure::Q);
    ExponentialMartingale em;
    Vec h(4);
    h << 0.5, 0.3, -0.2, 0.4;
    em.h = make_kernel(h);
    ClaimSpec spec{em, "em"};
    auto ip = clark_ocone_integrand(spec, ens);
    CHECK(ip.c == doctest::Approx(1.0));
    Vec xr = reconstruct_claim(ip, ens);
    Vec x = realize_claim(spec, ens);
    CHECK(l2_relative_error(xr, x) <= 0.05);
  }

  SUBCASE("moments backend replicates a degree-2 cylinder claim") {
    // the chaos-2 remainder of the reconstruction decays like 1/sqrt(steps);
    // check the level at 100 steps and the refinement trend at 400
    double err_by_steps[2];
    int slot = 0;
    for (Index steps : {100, 400}) {
      MarketConfig cfg = noise_only_config(3, steps);
      auto ens = make_ensemble(cfg, 4000, 35, Measure::Q);
      CylinderClaim c;
      Vec h1(3), h2(3);
      h1 << 0.8, 0.0, 0.3;
      h2 << 0.0, 0.6, -0.2;
      c.kernels = {make_kernel(h1),
                   make_kernel(h2, TimeMod::Kind::Linear, 0.5)};
      c.f.arity = 2;
      c.f.terms = {{{2, 0}, 1.0}, {{1, 1}, -0.5}, {{0, 1}, 0.7}, {{0, 0}, 0.2}};
      ClaimSpec spec{c, "cyl2"};
      auto ip = clark_ocone_integrand(spec, ens);
      CHECK(ip.backend == "moments");

      Vec x = realize_claim(spec, ens);
      const double m = x.mean();
      const double sd =
          std::sqrt((x.array() - m).square().sum() / (x.size() - 1.0));
      CHECK(std::abs(ip.c - m) <= 3.0 * sd / std::sqrt(double(x.size())));

      Vec xr = reconstruct_claim(ip, ens);
      err_by_steps[slot++] = l2_relative_error(xr, x);
    }
    CHECK(err_by_steps[0] <= 0.09);
    CHECK(err_by_steps[1] <= 0.6 * err_by_steps[0]);
  }

  SUBCASE("binary integrand replicates the payoff") {
    MarketConfig cfg = binary_market_config(0.3, 100);
    auto ens = make_ensemble(cfg, 4000, 37, Measure::Q);
    ClaimSpec spec{BinaryOption{0.5, 2.0}, "binary"};
    auto ip = clark_ocone_integrand(spec, ens);
    CHECK(ip.backend == "analytic");
    CHECK(ip.profile_bound > 0.0);
    Vec x = realize_claim(spec, ens);
    Vec xr = reconstruct_claim(ip, ens);
    const double norm = std::sqrt(x.squaredNorm());
    const double err = std::sqrt((xr - x).squaredNorm());
    CHECK(err <= 0.05 * norm);  // tightens to 2% at the production step count
  }

  SUBCASE("product of exponential martingales is exact") {
    MarketConfig cfg = noise_only_config(3, 60);
    auto ens = make_ensemble(cfg, 4000, 39, Measure::Q);
    ExponentialMartingale ea, eb;
    Vec h1(3), h2(3);
    h1 << 0.4, 0.2, 0.0;
    h2 << -0.1, 0.3, 0.5;
    ea.h = make_kernel(h1);
    eb.h = make_kernel(h2);
    ProductClaim pc;
    pc.lhs = std::make_shared<ClaimSpec>(ClaimSpec{ea, "ea"});
    pc.rhs = std::make_shared<ClaimSpec>(ClaimSpec{eb, "eb"});
    ClaimSpec spec{pc, "eaeb"};
    auto ip = clark_ocone_integrand(spec, ens);
    CHECK(ip.backend == "analytic");
    CHECK(ip.c == doctest::Approx(std::exp(h1.dot(h2))).epsilon(1e-12));
    Vec x = realize_claim(spec, ens);
    Vec xr = reconstruct_claim(ip, ens);
    CHECK(l2_relative_error(xr, x) <= 0.08);
  }

  SUBCASE("regression agrees with the exact moments backend") {
    MarketConfig cfg = noise_only_config(3, 50);
    auto ens = make_ensemble(cfg, 4000, 41, Measure::Q);
    CylinderClaim c;
    Vec h1(3), h2(3);
    h1 << 0.8, 0.1, 0.0;
    h2 << -0.2, 0.6, 0.1;
    c.kernels = {make_kernel(h1), make_kernel(h2)};
    c.f.arity = 2;
    c.f.terms = {{{2, 0}, 1.0}, {{1, 1}, -0.5}, {{0, 0}, 0.2}};
    ClaimSpec cyl{c, "cyl"};

    auto exact = clark_ocone_integrand(cyl, ens);
    CHECK(exact.backend == "moments");
    ClarkOconeOptions opt;
    opt.force_regression = true;
    opt.regression_paths = 4000;
    auto fitted = clark_ocone_integrand(cyl, ens, opt);
    CHECK(fitted.backend == "regression");

    // conditional-expectation coefficients of a quadratic claim are affine
    // in the running integrals, inside the fitted basis: reconstructions
    // agree up to Monte Carlo fit noise
    Vec a = reconstruct_claim(exact, ens);
    Vec b = reconstruct_claim(fitted, ens);
    CHECK(l2_relative_error(b, a) <= 0.06);
    CHECK(std::abs(fitted.c - exact.c) <= 0.05 * std::abs(exact.c) + 0.02);
  }

  SUBCASE("regression fallback handles a mixed product") {
    MarketConfig cfg = noise_only_config(3, 100);
    auto ens = make_ensemble(cfg, 4000, 41, Measure::Q);
    CylinderClaim c;
    Vec h1(3), h2(3);
    h1 << 0.8, 0.1, 0.0;
    h2 << -0.2, 0.6, 0.1;
    c.kernels = {make_kernel(h1), make_kernel(h2)};
    c.f.arity = 2;
    c.f.terms = {{{2, 0}, 1.0}, {{1, 1}, -0.5}, {{0, 0}, 0.2}};
    ClaimSpec cyl{c, "cyl"};

    ExponentialMartingale em;
    Vec hg(3);
    hg << 0.2, -0.25, 0.3;
    em.h = make_kernel(hg);
    ProductClaim pc;
    pc.lhs = std::make_shared<ClaimSpec>(cyl);
    pc.rhs = std::make_shared<ClaimSpec>(ClaimSpec{em, "em"});
    ClaimSpec prod{pc, "cyl*em"};

    ClarkOconeOptions opt;
    opt.basis_degree = 4;
    opt.regression_paths = 3000;
    auto ip = clark_ocone_integrand(prod, ens, opt);
    CHECK(ip.backend == "regression");
    Vec x = realize_claim(prod, ens);
    Vec xr = reconstruct_claim(ip, ens);
    // chaos-2 discretization floor at 100 steps plus labeled fit bias
    CHECK(l2_relative_error(xr, x) <= 0.20);
  }

  SUBCASE("regression conditioning failure is diagnosed") {
    // three kernels over a two-factor market: the running integrals span a
    // two-dimensional space, so the cubic feature set is exactly collinear
    MarketConfig cfg = noise_only_config(2, 20);
    auto ens = make_ensemble(cfg, 2000, 43, Measure::Q);
    CylinderClaim c;
    Vec h1(2), h2(2), h3(2);
    h1 << 0.8, 0.1;
    h2 << -0.2, 0.6;
    h3 << 0.5, 0.5;
    c.kernels = {make_kernel(h1), make_kernel(h2), make_kernel(h3)};
    c.f.arity = 3;
    c.f.terms = {{{2, 0, 0}, 1.0}, {{0, 1, 1}, -0.5}};
    ExponentialMartingale em;
    em.h = make_kernel(Vec::Ones(2) * 0.2);
    ProductClaim pc;
    pc.lhs = std::make_shared<ClaimSpec>(ClaimSpec{c, "c3"});
    pc.rhs = std::make_shared<ClaimSpec>(ClaimSpec{em, "em"});
    ClaimSpec prod{pc, "c3*em"};
    ClarkOconeOptions opt;
    opt.basis_degree = 3;
    opt.regression_paths = 1000;
    CHECK_THROWS_AS(clark_ocone_integrand(prod, ens, opt),
                    IllConditionedError);
  }
}

TEST_CASE("unitarity: second moment equals c^2 + integrand energy") {
  MarketConfig cfg = noise_only_config(4, 40);
  auto ens = make_ensemble(cfg, 20000, 52, Measure::Q);
  const double dt = cfg.dt();

  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    ExplicitIntegrand e;
    e.c = rng::normal(900 + trial, 0, 0, 0);
    Vec h(4);
    for (Index i = 0; i < 4; ++i)
      h[i] =
          0.5 * rng::normal(910 + trial, 0, static_cast<std::uint64_t>(i), 0);
    if (trial % 3 == 0) {
      e.rule = slow_sequence_rule(slow_sequence_coeffs(4));
    } else {
      e.rule = kernel_rule(make_kernel(
          h, trial % 2 ? TimeMod::Kind::Sine : TimeMod::Kind::None, 0.7));
    }
    ClaimSpec spec{e, "u" + std::to_string(trial)};

    // X^2 - c^2 - int |x|^2 dt has mean zero by the discrete isometry
    Vec diff(ens.n_paths);
    const Index n = std::min(e.rule->factors(), cfg.factors);
    for_each_path(ens, [&](PathSimulator& sim) {
      auto rule = e.rule->clone();
      rule->begin_path();
      Vec buf(n);
      double acc = 0.0, energy = 0.0;
      while (!sim.done()) {
        rule->eval(sim.state(), buf);
        acc += buf.dot(sim.dwq().head(n));
        energy += buf.squaredNorm() * dt;
        rule->after_step(sim.state(), sim.dwq());
        sim.advance();
      }
      const double x = e.c + acc;
      diff[sim.state().path] = x * x - e.c * e.c - energy;
    });
    const double m = diff.mean();
    const double sd =
        std::sqrt((diff.array() - m).square().sum() / (diff.size() - 1.0));
    CHECK(std::abs(m) <= 3.0 * sd / std::sqrt(double(diff.size())));
  }
}

TEST_CASE("martingale reconstruction has no drift at checkpoints") {
  MarketConfig cfg = noise_only_config(3, 60);
  auto ens = make_ensemble(cfg, 20000, 53, Measure::Q);
  ExponentialMartingale em;
  Vec h(3);
  h << 0.4, -0.3, 0.2;
  em.h = make_kernel(h);
  auto ip = clark_ocone_integrand(ClaimSpec{em, "em"}, ens);

  Mat y(ens.n_paths, 3);
  const std::vector<Index> checkpoints{15, 30, 60};
  for_each_path(ens, [&](PathSimulator& sim) {
    auto rule = ip.rule->clone();
    rule->begin_path();
    Vec buf(3);
    double acc = 0.0;
    int ci = 0;
    while (!sim.done()) {
      rule->eval(sim.state(), buf);
      acc += buf.dot(sim.dwq());
      rule->after_step(sim.state(), sim.dwq());
      sim.advance();
      if (ci < 3 && sim.state().step == checkpoints[ci]) {
        y(sim.state().path, ci) = ip.c + acc;
        ++ci;
      }
    }
  });
  for (int c = 0; c < 3; ++c) {
    Vec v = y.col(c);
    const double m = v.mean() - ip.c;
    const double sd =
        std::sqrt((v.array() - v.mean()).square().sum() / (v.size() - 1.0));
    CHECK(std::abs(m) <= 3.0 * sd / std::sqrt(double(v.size())));
  }
}

TEST_CASE("ds diagnostic") {
  MarketConfig cfg = noise_only_config(8, 40);
  auto ens = make_ensemble(cfg, 256, 61, Measure::Q);

  SUBCASE("zero integrand: norms collapse to |c|, no flags") {
    ExplicitIntegrand e;
    e.c = 2.0;
    e.rule = kernel_rule(make_kernel(Vec::Zero(8)));
    DsDiagnosticOptions opt;
    opt.s_values = {0.0, 0.5, 1.0};
    opt.p_values = {2.0, 4.0};
    auto rep = ds_diagnostic(ClaimSpec{e, "c"}, ens, opt);
    for (double s : opt.s_values)
      for (double p : opt.p_values) {
        CHECK(rep.norm(s, p) == doctest::Approx(2.0).epsilon(1e-12));
        CHECK_FALSE(rep.diverges(s, p));
      }
  }

  SUBCASE("slow-sequence claim is concentrated on factor one: all clear") {
    ExplicitIntegrand e;
    e.rule = slow_sequence_rule(slow_sequence_coeffs(8));
    DsDiagnosticOptions opt;
    opt.s_values = {0.0, 0.1, 1.0};
    opt.p_values = {2.0};
    auto rep = ds_diagnostic(ClaimSpec{e, "slow"}, ens, opt);
    for (double s : opt.s_values) CHECK_FALSE(rep.diverges(s, 2.0));
  }

  SUBCASE("squared slow-sequence claim: cross term diverges at s = 0.1") {
    ExplicitIntegrand e;
    e.rule = slow_sequence_crossterm_rule(slow_sequence_coeffs(8), cfg.horizon,
                                          Index(1) << 14);
    DsDiagnosticOptions opt;
    opt.s_values = {0.0, 0.1};
    opt.p_values = {2.0};
    auto rep = ds_diagnostic(ClaimSpec{e, "cross"}, ens, opt);
    CHECK_FALSE(rep.diverges(0.0, 2.0));
    CHECK(rep.diverges(0.1, 2.0));

    // full square: first-factor terms are benign, same flags as the tail
    ExplicitIntegrand full;
    full.rule = slow_sequence_square_rule(slow_sequence_coeffs(8), cfg.horizon);
    auto rep2 = ds_diagnostic(ClaimSpec{full, "square"}, ens, opt);
    CHECK_FALSE(rep2.diverges(0.0, 2.0));
  }

  SUBCASE("norm estimates are monotone in s") {
    ExponentialMartingale em;
    Vec h(8);
    for (Index i = 0; i < 8; ++i) h[i] = 0.4 / (1.0 + double(i));
    em.h = make_kernel(h);
    DsDiagnosticOptions opt;
    opt.s_values = {0.0, 0.5, 1.0, 2.0};
    opt.p_values = {2.0, 4.0};
    auto rep = ds_diagnostic(ClaimSpec{em, "em"}, ens, opt);
    for (double p : opt.p_values) {
      double prev = 0.0;
      for (double s : opt.s_values) {
        CHECK(rep.norm(s, p) >= prev - 1e-12);
        prev = rep.norm(s, p);
      }
    }
  }

  SUBCASE("malliavin route dominates the representation route") {
    CylinderClaim c;
    Vec h1(4), h2(4);
    h1 << 0.8, 0.1, 0.0, 0.2;
    h2 << -0.2, 0.6, 0.3, 0.0;
    c.kernels = {make_kernel(h1), make_kernel(h2)};
    c.f.arity = 2;
    c.f.terms = {{{2, 0}, 1.0}, {{1, 1}, -0.5}, {{0, 0}, 0.2}};
    ClaimSpec spec{c, "cyl"};

    MarketConfig cfg4 = noise_only_config(4, 40);
    auto ens4 = make_ensemble(cfg4, 3000, 63, Measure::Q);
    DsDiagnosticOptions opt;
    opt.s_values = {0.0, 1.0};
    opt.p_values = {2.0};
    auto rep_co = ds_diagnostic(spec, ens4, opt);
    opt.route = DsRoute::MalliavinPathwise;
    auto rep_d = ds_diagnostic(spec, ens4, opt);
    for (double s : {0.0, 1.0})
      CHECK(rep_d.norm(s, 2.0) >= rep_co.norm(s, 2.0) * (1.0 - 0.05));
  }
}
