#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "bondlab/curve_spaces.hpp"
#include "bondlab/types.hpp"

namespace bondlab {

enum class Measure { P, Q };

struct TimeMod {
  enum class Kind { None, Linear, Sine };
  Kind kind = Kind::None;
  double param = 0.0;
  double period = 1.0;

  double value(double t) const {
    switch (kind) {
      case Kind::None:
        return 1.0;
      case Kind::Linear:
        return 1.0 + param * t;
      case Kind::Sine:
        return 1.0 + param * std::sin(6.283185307179586 * t / period);
    }
    return 1.0;
  }
};

struct VolatilityModel {
  enum class Kind {
    Zero,
    DeterministicDiagonal,
    DeterministicGeneral,
    StateDependent
  };
  Kind kind = Kind::Zero;
  std::vector<MultiplierM> columns;  // base column i drives Brownian factor i+1
  TimeMod time_mod;                  // scalar modulation for the general kind

  // State feedback for the StateDependent kind: the whole operator is scaled
  // by clamp(1 + kappa * (pbar_t(ref_T) - ref_level), lo, hi).
  double state_kappa = 0.0;
  double state_ref_T = 1.0;
  double state_ref_level = 1.0;
  double state_lo = 0.25;
  double state_hi = 4.0;

  std::string decay_description;

  Index factors() const { return static_cast<Index>(columns.size()); }
  bool deterministic() const { return kind != Kind::StateDependent; }
  double time_scale(double t) const {
    return kind == Kind::DeterministicGeneral ? time_mod.value(t) : 1.0;
  }
};

/// Market price of risk: gamma_t = time_mod(t) * base.
struct GammaModel {
  Vec base;  // length = factors (all zero allowed)
  TimeMod time_mod;

  Vec at(double t) const { return time_mod.value(t) * base; }
};

struct MarketConfig {
  HSpacePtr space;
  Index factors = 0;
  double horizon = 1.0;  // T-bar, years
  Index steps = 252;
  CurveH p0;  // initial discounted curve, p0(0) = 1, strictly positive
  VolatilityModel vol;
  GammaModel gamma;
  // Optional explicit drift; when absent the drift is derived from the no-
  // arbitrage relation m = -sum_i gamma^i sigma^i.
  std::optional<MultiplierM> drift_override;

  double dt() const { return horizon / static_cast<double>(steps); }
};

struct CheckResult {
  std::string name;
  bool pass = false;
  double measured = 0.0;
  std::string detail;
};

struct ValidationReport {
  std::vector<CheckResult> checks;
  bool all_pass() const {
    for (const auto& c : checks)
      if (!c.pass) return false;
    return true;
  }
};

/// Structural and no-arbitrage checks on a market configuration. Structural
/// inconsistencies (grid/factor shape) throw; substantive conditions are
/// reported check by check with the measured quantity.
ValidationReport validate_config(const MarketConfig& cfg);

// Deterministic per-step tables shared by every path: volatility columns
// sampled at translated grid positions, Ito corrections, drift, market price
// of risk. Immutable after construction, safe for concurrent readers.
class EnginePlan {
 public:
  explicit EnginePlan(MarketConfig cfg);

  const MarketConfig& config() const { return cfg_; }
  const HSpace& space() const { return *cfg_.space; }
  Index steps() const { return cfg_.steps; }
  Index factors() const { return cfg_.factors; }
  double dt() const { return cfg_.dt(); }
  double time_at(Index k) const { return dt() * static_cast<double>(k); }

  const Mat& sigma_shift(Index k) const { return sigma_shift_[k]; }
  const Vec& ito_shift(Index k) const { return ito_shift_[k]; }
  const Vec& drift_shift(Index k) const { return drift_shift_[k]; }
  const Vec& gamma(Index k) const { return gamma_[k]; }
  double gamma_sq(Index k) const { return gamma_sq_[k]; }
  /// Volatility column values on the (untranslated) grid at time t_k.
  const Mat& sigma_grid(Index k) const { return sigma_grid_[k]; }
  const Vec& log_p0() const { return log_p0_; }

  // one-step translation on the uniform grid: constant node offset + weight
  Index shift_offset() const { return shift_offset_; }
  double shift_frac() const { return shift_frac_; }
  /// Zero-volatility plans keep the exponentiated curve lazily.
  bool lazy_pbar() const { return lazy_pbar_; }

 private:
  MarketConfig cfg_;
  Vec log_p0_;
  Index shift_offset_ = 0;
  double shift_frac_ = 0.0;
  bool lazy_pbar_ = false;
  std::vector<Mat> sigma_shift_;  // per step: M x N at T_j + dt
  std::vector<Mat> sigma_grid_;   // per step: M x N at T_j
  std::vector<Vec> ito_shift_;    // per step: row sums of squares
  std::vector<Vec> drift_shift_;  // per step: drift at T_j + dt (P measure)
  std::vector<Vec> gamma_;
  std::vector<double> gamma_sq_;
};

struct PathState {
  Index path = 0;
  Index step = 0;
  double t = 0.0;
  double xi = 1.0;
  double short_rate = 0.0;
  const Vec* log_curve = nullptr;
  const Vec* pbar = nullptr;
  const Vec* w_cum_q = nullptr;  // cumulative Q-Brownian up to t
  const EnginePlan* plan = nullptr;

  /// Discounted curve value at time-to-maturity T; log-linear inside the
  /// grid, flat-forward beyond t_max.
  double pbar_at(double T) const;
};

// One path, stepped explicitly. Noise is addressed by (seed, path, step,
// factor), so the simulator is deterministic however paths are scheduled.
class PathSimulator {
 public:
  PathSimulator(const EnginePlan& plan, std::uint64_t seed, Index path,
                Measure measure);

  const PathState& state() const { return state_; }
  Measure measure() const { return measure_; }
  /// Brownian increments spanning [t_k, t_{k+1}), under both measures.
  const Vec& dwq() const { return dwq_; }
  const Vec& dwp() const { return dwp_; }
  bool done() const { return state_.step >= plan_->steps(); }
  void advance();
  /// Brings the exponentiated curve up to date on lazily evolved plans.
  void sync_pbar();

 private:
  void draw_increments();
  void refresh_derived();
  bool pbar_stale_ = false;

  const EnginePlan* plan_;
  std::uint64_t seed_;
  Measure measure_;
  PathState state_;
  Vec log_curve_;
  Vec pbar_;
  Vec w_cum_q_;
  Vec dwq_, dwp_, dw_sim_;
};

struct MarketPath {
  Vec times;        // steps + 1
  Mat curves;       // (steps+1) x M discounted curve values
  Vec short_rates;  // steps + 1
  Vec xi;           // steps + 1
  Mat dwq;          // steps x N
  Mat dwp;          // steps x N
  std::uint64_t seed = 0;
  Index path_index = 0;
  Measure measure = Measure::Q;
};

struct Ensemble {
  std::shared_ptr<const EnginePlan> plan;
  Index n_paths = 0;
  std::uint64_t seed = 0;
  Measure measure = Measure::Q;

  const MarketConfig& config() const { return plan->config(); }
};

Ensemble make_ensemble(MarketConfig cfg, Index n_paths, std::uint64_t seed,
                       Measure measure);

/// Stream every path through fn, in parallel. fn must write its results into
/// per-path slots keyed by state().path; any reduction should happen in path
/// order afterwards.
void for_each_path(const Ensemble& ens,
                   const std::function<void(PathSimulator&)>& fn);

/// Materialized ensemble, for small runs and tests.
std::vector<MarketPath> simulate_paths(const Ensemble& ens);

/// Density process xi on every path; rows are paths, columns time nodes.
Mat density_process(const Ensemble& ens);

/// Terminal xi only; cheap at large path counts.
Vec xi_terminal(const Ensemble& ens);

/// Instantaneous forward curve and spot rate from a positive discounted
/// curve: f = -(dp/dT)/p, central differences inside, second-order one-sided
/// at the ends; spot = f(0).
std::pair<CurveH, double> forward_and_spot(const CurveH& curve);

}  // namespace bondlab
