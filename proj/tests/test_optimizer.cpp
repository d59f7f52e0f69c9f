#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "bondlab/optimizer.hpp"

using namespace bondlab;

namespace {

HSpacePtr opt_space() {
  static HSpacePtr s = make_space({10.0, 101, 0.75});
  return s;
}

/// Complete scenario market with a deterministic market price of risk on the
/// first factors. Factor counts of 16 and up keep the completeness sweep out
/// of its pre-asymptotic regime.
MarketConfig optimal_market(Index factors, Vec gamma, Index steps = 50) {
  MarketConfig cfg;
  cfg.space = opt_space();
  cfg.factors = factors;
  cfg.horizon = 1.0;
  cfg.steps = steps;
  cfg.p0 = make_curve(cfg.space, Vec::Ones(cfg.space->size()));
  cfg.vol = power_decay_model(cfg.space, factors, 0.05, 1.0);
  cfg.gamma.base = std::move(gamma);
  return cfg;
}

}  // namespace

TEST_CASE("utility validation") {
  SUBCASE("log utility passes") {
    auto rep = validate_utility(UtilityFunction::log_utility());
    CHECK(rep.all_pass());
  }
  SUBCASE("power utility passes with the closed-form inverse") {
    auto u = UtilityFunction::power_utility(0.5);
    auto rep = validate_utility(u);
    CHECK(rep.all_pass());
    CHECK(u.inv_marginal(2.0) == doctest::Approx(0.25));  // y^{-2}
  }
  SUBCASE("exponential-type utility passes with an unbounded floor") {
    auto rep = validate_utility(UtilityFunction::exponential_utility(2.0));
    CHECK(rep.all_pass());
  }
  SUBCASE("linear utility fails concavity by name") {
    UtilityFunction f;
    f.kind = UtilityFunction::Kind::Custom;
    f.domain_floor = 0.0;
    f.u = [](double x) { return x; };
    f.marginal = [](double) { return 1.0; };
    f.second = [](double) { return 0.0; };
    f.inv_marginal = [](double) { return 1.0; };
    f.inv_marginal_der = [](double) { return 0.0; };
    auto rep = validate_utility(f);
    CHECK_FALSE(rep.all_pass());
    CHECK(rep.first_failure() == "strict_concavity");
  }
}

TEST_CASE("lambda calibration") {
  MarketConfig cfg = optimal_market(4, Vec::Constant(4, std::sqrt(0.125)));
  // int |gamma|^2 dt = 4 * 0.125 = 0.5

  SUBCASE("log utility: lambda = 1/K0 against the closed form") {
    auto ens = make_ensemble(cfg, 40000, 5, Measure::Q);
    Vec xi = xi_terminal(ens);
    const double k0 = 2.0;
    auto cal = calibrate_lambda(UtilityFunction::log_utility(), xi, k0);
    // E_Q[1/xi] = 1 exactly in the discrete model, so lambda = 1/K0
    CHECK(std::abs(cal.lambda - 1.0 / k0) <=
          3.0 * cal.budget_se * cal.lambda / k0 + 1e-6);
    CHECK(std::abs(cal.budget_gap) <= 3.0 * cal.budget_se);
  }

  SUBCASE("power utility: lognormal moment oracle") {
    auto ens = make_ensemble(cfg, 40000, 7, Measure::Q);
    Vec xi = xi_terminal(ens);
    const double k0 = 1.0;
    auto cal = calibrate_lambda(UtilityFunction::power_utility(0.5), xi, k0);
    // E_Q[(lambda xi)^{-2}] = lambda^{-2} e^{v} with v = int |gamma|^2 dt,
    // since ln xi ~ N(v/2, v) under the pricing measure; budget = K0 gives
    // lambda = e^{v/2} / sqrt(K0)
    const double v = 0.5;
    const double expect = std::exp(0.5 * v) / std::sqrt(k0);
    CHECK(std::abs(cal.lambda - expect) / expect <= 0.01);
    CHECK(std::abs(cal.budget_gap) <= 3.0 * cal.budget_se);
  }

  SUBCASE("zero risk price: lambda = u'(K0) exactly") {
    Vec xi = Vec::Ones(100);
    const double k0 = 3.0;
    auto cal = calibrate_lambda(UtilityFunction::log_utility(), xi, k0);
    CHECK(cal.lambda == doctest::Approx(1.0 / k0).epsilon(1e-8));
  }

  SUBCASE("monotone: larger budget, smaller multiplier") {
    auto ens = make_ensemble(cfg, 10000, 9, Measure::Q);
    Vec xi = xi_terminal(ens);
    auto u = UtilityFunction::power_utility(0.5);
    const double l1 = calibrate_lambda(u, xi, 1.0).lambda;
    const double l2 = calibrate_lambda(u, xi, 2.0).lambda;
    CHECK(l2 < l1);
  }
}

TEST_CASE("optimal claim") {
  SUBCASE("zero gamma: constant claim in every scale") {
    MarketConfig cfg = optimal_market(16, Vec::Zero(16));
    auto ens = make_ensemble(cfg, 512, 11, Measure::Q);
    auto u = UtilityFunction::log_utility();
    auto oc = optimal_claim(u, 1.0 / 2.0, ens, {0.0, 1.0});
    CHECK((oc.xhat.array() - 2.0).abs().maxCoeff() <= 1e-12);
    CHECK(oc.ip.c == doctest::Approx(2.0).epsilon(1e-10));
    CHECK_FALSE(oc.membership.diverges(1.0, 2.0));
    CHECK(oc.growth_violations == 0);
  }

  SUBCASE("log utility: integrand matches the closed form") {
    Vec g(3);
    g << 0.4, 0.2, -0.3;
    MarketConfig cfg = optimal_market(3, g, 25);
    auto ens = make_ensemble(cfg, 8, 13, Measure::Q);
    const double lambda = 0.5;
    auto u = UtilityFunction::log_utility();
    auto oc = optimal_claim(u, lambda, ens, {0.0});

    // closed form: x_t = -gamma / (lambda xi_t); check along one path
    PathSimulator sim(*ens.plan, ens.seed, 3, Measure::Q);
    auto rule = oc.ip.rule->clone();
    rule->begin_path();
    Vec x(3);
    while (!sim.done()) {
      rule->eval(sim.state(), x);
      const Vec expect = -g / (lambda * sim.state().xi);
      CHECK((x - expect).cwiseAbs().maxCoeff() <=
            1e-9 * expect.cwiseAbs().maxCoeff());
      rule->after_step(sim.state(), sim.dwq());
      sim.advance();
    }
  }

  SUBCASE("chain rule against a driving-noise bump") {
    // D_{t,i} Xhat = lambda xi_T phi'(lambda xi_T) gamma^i_t; bump one
    // increment of a stored path and difference the realized claim
    Vec g(2);
    g << 0.5, -0.2;
    MarketConfig cfg = optimal_market(2, g, 20);
    auto ens = make_ensemble(cfg, 4, 17, Measure::Q);
    auto paths = simulate_paths(ens);
    const double lambda = 0.8;
    auto u = UtilityFunction::power_utility(0.5);

    const double dt = cfg.dt();
    auto xi_of = [&](const MarketPath& mp, double bump, Index bk, Index bi) {
      double log_xi = 0.0;
      for (Index k = 0; k < cfg.steps; ++k)
        for (Index i = 0; i < 2; ++i) {
          double dwq = mp.dwq(k, i);
          if (k == bk && i == bi) dwq += bump;
          // under Q: d ln xi = +|g|^2/2 dt + g dWQ
          log_xi += g[i] * dwq;
        }
      return std::exp(0.5 * g.squaredNorm() * cfg.horizon + log_xi);
    };
    const double eps = 1e-6;
    for (auto [bk, bi] :
         std::vector<std::pair<Index, Index>>{{0, 0}, {7, 1}, {19, 0}}) {
      const double up = u.inv_marginal(lambda * xi_of(paths[1], eps, bk, bi));
      const double dn = u.inv_marginal(lambda * xi_of(paths[1], -eps, bk, bi));
      const double fd = (up - dn) / (2.0 * eps);
      const double xi_T = xi_of(paths[1], 0.0, bk, bi);
      const double y = lambda * xi_T;
      const double expect = y * u.inv_marginal_der(y) * g[bi];
      CHECK(std::abs(fd - expect) <= 1e-4 * std::max(1.0, std::abs(expect)));
    }
  }

  SUBCASE("membership clear for fast-decaying gamma at s = 1") {
    Vec g(8);
    for (Index i = 0; i < 8; ++i)
      g[i] = 0.4 / std::pow(static_cast<double>(i + 1), 2.5);
    MarketConfig cfg = optimal_market(8, g, 25);
    auto ens = make_ensemble(cfg, 256, 19, Measure::Q);
    auto oc =
        optimal_claim(UtilityFunction::power_utility(0.5), 1.0, ens, {1.0});
    CHECK_FALSE(oc.membership.diverges(1.0, 2.0));
  }
}

TEST_CASE("optimal portfolio pipeline") {
  SUBCASE("zero gamma rolls the money account") {
    MarketConfig cfg = optimal_market(16, Vec::Zero(16), 20);
    auto ens = make_ensemble(cfg, 256, 23, Measure::P);
    auto sol =
        solve_optimal_portfolio(UtilityFunction::log_utility(), 1.5, ens);
    CHECK(sol.lambda == doctest::Approx(1.0 / 1.5).epsilon(1e-6));
    CHECK((sol.hedge.terminal_wealth.array() - 1.5).abs().maxCoeff() <= 1e-9);
    CHECK(sol.achieved_expected_utility ==
          doctest::Approx(std::log(1.5)).epsilon(1e-9));
  }

  SUBCASE("log utility with a single-factor risk price") {
    Vec g = Vec::Zero(16);
    g[0] = 0.5;
    MarketConfig cfg = optimal_market(16, g, 50);
    auto ens = make_ensemble(cfg, 20000, 29, Measure::P);
    const double k0 = 1.0;
    auto sol = solve_optimal_portfolio(UtilityFunction::log_utility(), k0, ens);

    CHECK(std::abs(sol.lambda - 1.0 / k0) <= 0.02);
    CHECK(std::abs(sol.budget_gap) <= 3.0 * sol.budget_se);
    CHECK(sol.achieved_initial_wealth == k0);  // pinned by the budget identity
    CHECK(sol.hedge.replication_rel <= 0.03);
    CHECK(sol.log_density_membership_clear);
    CHECK(sol.comparisons.size() == 5);
    for (const auto& c : sol.comparisons)
      CHECK(sol.achieved_expected_utility >=
            c.expected_utility - 3.0 * c.diff_se);
    // the certainty equivalent gain over the money roll is v/2
    const double gain = sol.achieved_expected_utility - std::log(k0);
    CHECK(gain == doctest::Approx(0.125).epsilon(0.15));
  }

  SUBCASE("power utility replicates the dual optimum") {
    Vec g = Vec::Zero(16);
    g[0] = 0.25;
    g[1] = 0.15;
    MarketConfig cfg = optimal_market(16, g, 100);
    auto ens = make_ensemble(cfg, 8000, 31, Measure::P);
    auto sol = solve_optimal_portfolio(UtilityFunction::power_utility(0.5),
                                       1.0, ens);
    CHECK(sol.hedge.replication_rel <= 0.04);
    // first-order condition u'(Xhat) = lambda xi holds by construction
    Vec xi = xi_terminal(ens);
    auto u = UtilityFunction::power_utility(0.5);
    for (Index p = 0; p < 50; ++p) {
      const double lhs = u.marginal(sol.xhat[p]);
      CHECK(std::abs(lhs - sol.lambda * xi[p]) <=
            1e-10 * std::max(1.0, sol.lambda * xi[p]));
    }
  }

  SUBCASE("incomplete scenario is refused with a pointer to regularization") {
    MarketConfig cfg;
    cfg.space = opt_space();
    cfg.factors = 16;
    cfg.horizon = 1.0;
    cfg.steps = 10;
    cfg.p0 = make_curve(cfg.space, Vec::Ones(cfg.space->size()));
    cfg.vol = geometric_decay_model(cfg.space, 16, 0.5);
    cfg.gamma.base = Vec::Zero(16);
    auto ens = make_ensemble(cfg, 64, 37, Measure::P);
    CHECK_THROWS_WITH_AS(
        solve_optimal_portfolio(UtilityFunction::log_utility(), 1.0, ens),
        doctest::Contains("approximate_hedge"), std::runtime_error);
  }
}
