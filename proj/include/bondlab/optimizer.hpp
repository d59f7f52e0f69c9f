#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "bondlab/claims.hpp"
#include "bondlab/hedging.hpp"
#include "bondlab/market.hpp"

namespace bondlab {

// Utility-optimal terminal wealth by convex duality: Xhat = phi(lambda xi_T)
// with phi the inverse marginal utility and lambda calibrated so the claim
// prices at the initial wealth. The representation integrand then follows
// from the chain rule through ln(xi) and the conditional Gaussian law of the
// remaining density, and the exact hedger delivers the portfolio.

struct UtilityFunction {
  enum class Kind { Log, Power, Exponential, Custom };
  Kind kind = Kind::Log;
  double domain_floor = 0.0;  // -inf allowed
  double growth_q = 1.0;
  double growth_c = 1.0;

  std::function<double(double)> u;
  std::function<double(double)> marginal;          // u'
  std::function<double(double)> second;            // u''
  std::function<double(double)> inv_marginal;      // phi
  std::function<double(double)> inv_marginal_der;  // phi'

  static UtilityFunction log_utility();
  static UtilityFunction power_utility(double alpha);  // alpha < 1, != 0
  static UtilityFunction exponential_utility(double beta);
};

struct UtilityReport {
  std::vector<CheckResult> checks;
  bool all_pass() const {
    for (const auto& c : checks)
      if (!c.pass) return false;
    return true;
  }
  std::string first_failure() const {
    for (const auto& c : checks)
      if (!c.pass) return c.name;
    return {};
  }
};

/// Numeric screening of the Inada-type conditions: strict concavity on a
/// sample grid, the marginal exploding toward the domain floor, the stated
/// growth envelopes with the supplied (q, C), and the inverse-marginal
/// round trip. Only the positive-marginal branch is screened; utilities
/// whose marginal vanishes are out of scope here.
UtilityReport validate_utility(const UtilityFunction& u);

struct CalibrationResult {
  double lambda = 0.0;
  double budget_gap = 0.0;  // achieved mean - K0
  double budget_se = 0.0;
  int iterations = 0;
};

/// Bisection on lambda -> E_Q[phi(lambda xi_T)] - K0, strictly decreasing.
/// xi_samples are terminal density samples; weights (optional) reweight the
/// mean, for ensembles simulated under the objective measure.
CalibrationResult calibrate_lambda(const UtilityFunction& u,
                                   const Vec& xi_samples, double k0,
                                   const Vec* weights = nullptr);

/// Gauss-Hermite nodes/weights for E[f(Z)], Z standard normal.
std::pair<Vec, Vec> gauss_hermite(int n);

struct OptimalClaim {
  double lambda = 0.0;
  Vec xhat;             // per path
  IntegrandProcess ip;  // representation pair via conditional quadrature
  MembershipReport membership;
  int growth_violations = 0;  // sampled envelope breaches of |y phi'(y)|
};

/// Xhat samples, the quadrature-backed representation integrand
/// x_t = gamma_t E[lambda xi phi'(lambda xi) | F_t], and the membership
/// diagnostic at the requested s values. Deterministic gamma only.
OptimalClaim optimal_claim(const UtilityFunction& u, double lambda,
                           const Ensemble& ens,
                           const std::vector<double>& s_values = {0.0, 1.0});

struct OptimalPortfolioOptions {
  double s = 1.0;  // weight exponent of the completeness check
  bool override_completeness = false;
  std::vector<double> comparison_scales{0.9, 1.05, 1.1};
  bool comparison_lagged = true;
  bool comparison_zero_risky = true;
  HedgeOptions hedge;
};

struct OptimalSolution {
  double lambda = 0.0;
  double budget_gap = 0.0;
  double budget_se = 0.0;
  Vec xhat;
  double achieved_initial_wealth = 0.0;
  double achieved_expected_utility = 0.0;
  double achieved_utility_se = 0.0;
  HedgeRun hedge;
  CompletenessReport completeness;
  MembershipReport membership;          // of Xhat, representation route
  bool log_density_membership_clear = true;  // ln(xi) in the s-scale
  struct Comparison {
    std::string name;
    double expected_utility = 0.0;
    double diff_se = 0.0;  // standard error of u(Vhat) - u(V_comp)
  };
  std::vector<Comparison> comparisons;
  int growth_violations = 0;
};

/// Full pipeline: calibrate, build the optimal claim, extract its
/// representation, hedge it exactly, and benchmark the achieved utility
/// against deterministic perturbations of the optimal portfolio (scaled
/// risky legs, a one-step lag, the pure money roll), all with the same
/// initial wealth. The ensemble must be simulated under the objective
/// measure P; claims and hedges read the Q increments off the same paths.
/// Refuses when the completeness verdict fails (unless overridden) or when
/// ln(xi) falls outside the s-scale.
OptimalSolution solve_optimal_portfolio(const UtilityFunction& u, double k0,
                                        const Ensemble& ens,
                                        const OptimalPortfolioOptions& opt = {});

}  // namespace bondlab
