#pragma once

#include <map>
#include <memory>
#include <string>
#include <variant>
#include <vector>

#include "bondlab/market.hpp"
#include "bondlab/seq_spaces.hpp"
#include "bondlab/types.hpp"

namespace bondlab {

// Contingent claims over a simulated ensemble, the correspondence between a
// terminal claim X and its representation pair (c, x) with
// X = c + sum_i int x^i dW^{Q,i}, Malliavin derivatives of smooth claims, and
// membership diagnostics in the weighted claim scales.

/// Deterministic kernel h(t, i) = factor_coeffs[i-1] * time profile, with
/// finite factor support.
struct KernelH {
  Vec factor_coeffs;
  TimeMod time_mod;

  Index factors() const { return factor_coeffs.size(); }
  double at(double t, Index i) const {
    return (i >= 1 && i <= factor_coeffs.size())
               ? factor_coeffs[i - 1] * time_mod.value(t)
               : 0.0;
  }
};

struct Monomial {
  std::vector<int> exponents;
  double coeff = 0.0;
};

struct Polynomial {
  Index arity = 0;
  std::vector<Monomial> terms;

  double eval(const Vec& v) const;
  Polynomial partial(Index l) const;  // d/dv_l
  int degree() const;

  static Polynomial linear(Vec weights, double constant = 0.0);
};

/// E[prod_i x_i^{a_i}] for x ~ N(mean, cov), exact via the Gaussian moment
/// recursion E[x_i P] = m_i E[P] + sum_j cov_ij E[dP/dx_j].
double gaussian_moment(const std::vector<int>& exponents, const Vec& mean,
                       const Mat& cov);
double gaussian_expect(const Polynomial& f, const Vec& mean, const Mat& cov);

// ---------------------------------------------------------------------------
// claim kinds

/// Smooth claim f(W(h_1), ..., W(h_n)) with polynomial f.
struct CylinderClaim {
  std::vector<KernelH> kernels;
  Polynomial f;
};

/// Pays 1 when the terminal discounted curve at time-to-maturity `offset`
/// is at or above the strike, else 0.
struct BinaryOption {
  double strike = 1.0;
  double offset = 1.0;
};

/// Doleans exponential of a deterministic kernel, evaluated at the horizon.
struct ExponentialMartingale {
  KernelH h;
};

/// Progressively measurable integrand evaluated along a path. Rules may keep
/// running per-path state: eval() is called with the state at t_k before the
/// step, after_step() with the increments spanning [t_k, t_{k+1}).
class IntegrandRule {
 public:
  virtual ~IntegrandRule() = default;
  /// Natural coordinate support; may exceed the market truncation when the
  /// integrand has an analytic tail (membership sweeps use it).
  virtual Index factors() const = 0;
  virtual void begin_path() {}
  virtual void eval(const PathState& st, Eigen::Ref<Vec> out) const = 0;
  virtual void after_step(const PathState& st, const Vec& dwq) {
    (void)st;
    (void)dwq;
  }
  virtual std::unique_ptr<IntegrandRule> clone() const = 0;
};

/// Claim given directly by its representation pair (c, rule).
struct ExplicitIntegrand {
  double c = 0.0;
  std::shared_ptr<const IntegrandRule> rule;
};

struct ClaimSpec;

struct ProductClaim {
  std::shared_ptr<ClaimSpec> lhs;
  std::shared_ptr<ClaimSpec> rhs;
};

struct ClaimSpec {
  std::variant<CylinderClaim, BinaryOption, ExponentialMartingale,
               ExplicitIntegrand, ProductClaim>
      kind;
  std::string name;
};

/// Representation pair (c, x) of a claim: X = c + sum int x dW^Q.
struct IntegrandProcess {
  double c = 0.0;
  std::shared_ptr<const IntegrandRule> rule;
  std::string backend;  // explicit | analytic | moments | regression
  /// Recorded sup of the binary-option profile function over evaluation
  /// points, when the analytic binary backend produced this integrand.
  double profile_bound = 0.0;
};

// ---------------------------------------------------------------------------
// operations

/// Smallest market factor count the claim needs.
Index claim_factor_requirement(const ClaimSpec& spec);

/// Terminal claim values, one per path. Throws TruncationError when the
/// claim references factors beyond the ensemble truncation.
Vec realize_claim(const ClaimSpec& spec, const Ensemble& ens);

/// Terminal values of the reconstruction c + sum_k x_{t_k} . dW_k.
Vec reconstruct_claim(const IntegrandProcess& ip, const Ensemble& ens);

/// Pathwise Malliavin derivative D_{(t_k, i)} X on a materialized path;
/// rows are time steps, columns factors. Binary options are rejected.
Mat malliavin_derivative(const ClaimSpec& spec, const EnginePlan& plan,
                         const MarketPath& path);

struct ClarkOconeOptions {
  // regression fallback controls
  bool force_regression = false;  // diagnostics: bypass analytic backends
  int basis_degree = 2;
  double max_condition = 1e10;
  Index regression_paths = 4096;
  std::uint64_t regression_seed = 71;
};

/// Representation integrand x_t = E_Q(D_t X | F_t) with backend selection:
/// analytic for binaries under deterministic volatility and for exponential
/// martingales, exact Gaussian moments for polynomial cylinder claims, and
/// least-squares regression as the labeled fallback.
IntegrandProcess clark_ocone_integrand(const ClaimSpec& spec,
                                       const Ensemble& ens,
                                       const ClarkOconeOptions& opt = {});

// ---------------------------------------------------------------------------
// membership diagnostics

enum class DsRoute { Representation, MalliavinPathwise };

struct DsDiagnosticOptions {
  std::vector<double> s_values{0.0, 1.0};
  std::vector<double> p_values{2.0};
  DsRoute route = DsRoute::Representation;
  WeightConvention convention = WeightConvention::PaperWeight;
  Index sweep_min = 0;  // 0: pick automatically
  Index sweep_max = 0;  // 0: rule's natural support
};

struct MembershipReport {
  std::vector<double> s_values;
  std::vector<double> p_values;
  // D_s^p norm estimate (||X||_p^p + energy^p)^{1/p} at full truncation
  std::map<std::pair<double, double>, double> norm_estimates;
  std::map<std::pair<double, double>, bool> divergence_flags;
  // per (s, p): integrand energy norm vs coordinate truncation level
  std::map<std::pair<double, double>, std::vector<std::pair<Index, double>>>
      truncation_curves;

  double norm(double s, double p) const { return norm_estimates.at({s, p}); }
  bool diverges(double s, double p) const {
    return divergence_flags.at({s, p});
  }
};

/// Monte Carlo estimates of the claim-scale norms together with a divergence
/// flag per (s, p) read off the coordinate-truncation curve of the integrand
/// energy. The flag never throws; it reports.
MembershipReport ds_diagnostic(const ClaimSpec& spec, const Ensemble& ens,
                               const DsDiagnosticOptions& opt = {});

/// Same diagnostic applied to a representation pair directly.
MembershipReport ds_diagnostic(const IntegrandProcess& ip, const Ensemble& ens,
                               const DsDiagnosticOptions& opt = {});

// ---------------------------------------------------------------------------
// built-in integrand rules

/// Deterministic integrand x_t(i) = kernel(t, i).
std::shared_ptr<const IntegrandRule> kernel_rule(KernelH h);

/// a_t e_1 with a_t = sum_i c^i W^{Q,i}_t: the slow-sequence claim
/// concentrated on the first factor.
std::shared_ptr<const IntegrandRule> slow_sequence_rule(Vec coeffs);

/// Integrand of the square of the slow-sequence claim
/// (2 a_t Y_t + 2 (Tbar - t) a_t c^1, 2 (Tbar - t) a_t c^i ...).
std::shared_ptr<const IntegrandRule> slow_sequence_square_rule(Vec coeffs,
                                                               double horizon);

/// Third term of the square only: x_t^i = 2 (Tbar - t) a_t c^i, the factor
/// tail whose weighted norms diverge for s > 0.
std::shared_ptr<const IntegrandRule> slow_sequence_crossterm_rule(
    Vec coeffs, double horizon, Index natural_factors);

/// Standard coefficients c^i = ((1+i)^{1/2} log(1+i))^{-1}.
Vec slow_sequence_coeffs(Index n);

}  // namespace bondlab
