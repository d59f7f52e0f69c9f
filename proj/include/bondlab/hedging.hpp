#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "bondlab/claims.hpp"
#include "bondlab/market.hpp"
#include "bondlab/seq_spaces.hpp"
#include "bondlab/spectral.hpp"

namespace bondlab {

// Hedge assembly. The hedging problem is the factor-space equation
// b_t' theta_t = x_t with b_t the martingale operator (columns pbar sigma^i).
// With B_t = l_t sigma^i and A_t = B_t' G B_t, the minimal construction is
//
//   eta_t    = B_t A_t^{-1} x_t                       (curve in H)
//   theta1_t = (l_t / pbar_t) . (G eta_t)             (dual element)
//   a_t      = (pbar_t(0))^{-1} (Y_t - <theta1_t, pbar_t>),  theta0 = a delta_0
//
// where Y is the running wealth c + int x dW^Q. The multiplier l/pbar acts on
// the dual side (coefficients scale coordinatewise), which makes the hedge
// equation hold to solver precision: <theta1, pbar sigma^i> = (A A^{-1} x)_i.
// In finite truncation the isometry route S A^{-1/2} collapses to B A^{-1};
// the polar factors remain available through the spectral module and the two
// routes are cross-checked in the tests.

struct OperatorTriple {
  Mat b;  // M x N, columns pbar_t sigma^i_t
  Mat B;  // M x N, columns l_t sigma^i_t
  Mat A;  // N x N, B' G B
  double trace = 0.0;
};

/// Operators at one (t, path) state. sigma_vals are the multiplier values of
/// the volatility columns on the grid (M x N).
OperatorTriple assemble_operators(const HSpace& space, const Vec& pbar,
                                  const Vec& l, const Mat& sigma_vals);

// ---------------------------------------------------------------------------
// completeness diagnostic

struct CompletenessReport {
  double s = 0.0;
  double k_estimate = 0.0;  // sup over samples of 1 / sigma_min(W_s A^{1/2})
  std::vector<std::pair<double, double>> sigma_min_curve;  // (t, sigma_min)
  std::vector<std::pair<Index, double>> k_by_truncation;   // doubling sweep
  std::vector<double> stability_ratios;
  enum class Verdict { Satisfied, Violated, Inconclusive } verdict =
      Verdict::Inconclusive;
  std::string witness;
};

struct CompletenessOptions {
  Index time_stride = 1;   // sample every time_stride-th step
  Index path_samples = 4;  // paths sampled for state-dependent volatility
  WeightConvention convention = WeightConvention::PaperWeight;
  double stable_ratio = 1.1;    // satisfied when every ratio is below this
  double violated_ratio = 2.0;  // violated when any ratio exceeds this
};

/// Estimates the lower-bound constant of the weighted-norm condition
/// ||x|| <= k ||A^{1/2} x||_{l^{s,2}} over sampled states and judges its
/// stability under factor-count doubling. At any fixed truncation the
/// inequality holds with the reported k by construction; the verdict is about
/// whether k settles (satisfied) or escapes (violated) as factors are added.
CompletenessReport check_completeness(const Ensemble& ens, double s,
                                      const CompletenessOptions& opt = {});

// ---------------------------------------------------------------------------
// hedging

struct HedgeOptions {
  double cond_limit = 1e12;
  // spectral cutoff: portfolio solves use f_n(lambda) = 1/lambda above 1/n;
  // 0 means the exact inverse
  double regularization_n = 0.0;
  Index sf_subsample = 128;       // paths carried through the full dual
                                  // pipeline for residuals and norms
  Index pipeline_samples = 32;    // (t, path) samples of the assembled
                                  // hedge-equation residual
  std::vector<double> checkpoint_fractions{0.25, 0.5, 0.75, 1.0};
};

struct SelfFinancingReport {
  // |V_t - V_0 - sum <theta, pbar sigma^i> dW^i| at checkpoints: the
  // bookkeeping identity, machine-zero for constructed hedges, sensitive to
  // tampering with either leg
  double model_residual_max = 0.0;
  // |V_t - V_0 - sum <theta1, shifted price change>|: the buy-and-hold
  // wealth identity whose residual scales like sqrt(dt)
  double realized_residual_max = 0.0;
};

struct HedgeRun {
  double initial_wealth = 0.0;  // V_0 = c, exact by construction
  Vec terminal_wealth;          // per path
  double claim_l2 = 0.0;
  double replication_l2 = 0.0;
  double replication_rel = 0.0;

  double hedge_residual_rel_max = 0.0;  // assembled-pipeline samples
  double max_condition = 0.0;
  double trace_mean = 0.0;

  // self-financing aggregates over the subsample
  double sf_model_residual_max = 0.0;
  double sf_realized_residual_max = 0.0;
  double sf_realized_residual_mean = 0.0;
  double sf_constant = 0.0;  // realized max / (sqrt(dt) ||X||_2)

  // approximate-hedge extras
  double regularization_n = 0.0;
  double factor_residual_rel = 0.0;  // ||A f_n(A) x - x|| / ||x||, MC mean
  double portfolio_norm = 0.0;       // sqrt E int ||theta1||_{H'}^2 dt
  double money_leg_norm = 0.0;       // sqrt E int a_t^2 dt
};

/// Exact hedge of a representation pair (c, x). claim_values, when given,
/// are the payoff samples the terminal wealth is compared against (otherwise
/// the reconstruction itself is used and the replication error measures
/// round-trip discretization only).
HedgeRun exact_hedge(const IntegrandProcess& ip, const Ensemble& ens,
                     const Vec* claim_values = nullptr,
                     const HedgeOptions& opt = {});

/// Spectrally regularized hedge: eta = B f_n(A) x with
/// f_n(lambda) = 1/lambda for lambda >= 1/n, else 0. Always produces a
/// portfolio; the factor residual reports what was cut.
HedgeRun approximate_hedge(const IntegrandProcess& ip, const Ensemble& ens,
                           double n, const Vec* claim_values = nullptr,
                           const HedgeOptions& opt = {});

/// One path of the hedge, fully materialized.
struct PortfolioProcess {
  Index path_index = 0;
  Vec times;                      // K+1
  Vec theta0;                     // a_t, K entries
  std::vector<DualCurve> theta1;  // K entries
  Vec wealth;                     // K+1, V_t
  double initial = 0.0;
};

PortfolioProcess materialize_portfolio(const IntegrandProcess& ip,
                                       const Ensemble& ens, Index path,
                                       const HedgeOptions& opt = {});

/// Checks the wealth identities of a stored portfolio against a re-simulated
/// path. Reports both residuals; thresholds are the caller's contract.
SelfFinancingReport verify_self_financing(const PortfolioProcess& port,
                                          const Ensemble& ens);

// ---------------------------------------------------------------------------
// converse bound

/// Deterministic dual-curve portfolio family for bound experiments:
/// theta_t = time profile * (coefficient curve), plus an optional money leg.
struct DualPortfolioRule {
  Vec coeffs;  // functional coefficients of the risky leg
  TimeMod time_mod;
  double money = 0.0;  // constant delta_0 weight
};

struct ConverseBoundReport {
  double s = 0.0;
  double k_prime = 0.0;  // sup_t ||J^s A_t^{1/2}||
  bool applicable = true;
  std::vector<std::pair<Index, double>> k_prime_by_truncation;
  struct Row {
    double lhs_energy = 0.0;   // E int ||j^s x_t||^2 dt
    double mid_bound = 0.0;    // k'^2 E int ||qbar theta||_{H'}^2 dt
    double outer_bound = 0.0;  // with the recorded dual multiplier constant
    double slack_mid = 0.0;
    double slack_outer = 0.0;
  };
  std::vector<Row> rows;
};

/// Verifies that terminal wealths of admissible portfolios have integrands in
/// the weighted scale: ||j^s x_t|| <= k' ||qbar_t theta_t||_{H'} pathwise,
/// with k' = sup ||J^s A^{1/2}|| estimated over the sampled states and its
/// truncation stability reported (the bound is vacuous when k' escapes).
ConverseBoundReport converse_integrand_bound(
    const std::vector<DualPortfolioRule>& portfolios, const Ensemble& ens,
    double s, const CompletenessOptions& opt = {});

// ---------------------------------------------------------------------------
// volatility model builders used by the diagnostics scenarios

/// Deterministic columns, H-orthogonal, vanishing at zero maturity and
/// supported in [0, support_t_max]; column i has H-norm decay(i).
VolatilityModel orthogonal_decay_model(const HSpacePtr& space, Index factors,
                                       const std::function<double(Index)>& decay,
                                       double support_t_max,
                                       std::string description = {});

/// decay(i) = scale / i^exponent.
VolatilityModel power_decay_model(const HSpacePtr& space, Index factors,
                                  double scale, double exponent,
                                  double support_t_max = 8.0);

/// decay(i) = scale * 2^{-i}.
VolatilityModel geometric_decay_model(const HSpacePtr& space, Index factors,
                                      double scale, double support_t_max = 8.0);

}  // namespace bondlab
