#include "bondlab/market.hpp"

#include <cmath>

#include "bondlab/rng.hpp"

namespace bondlab {

namespace {

/// Multiplier value at arbitrary T: the curve part is zero beyond t_max, the
/// constant part persists.
double multiplier_at(const MultiplierM& F, double T) {
  return F.constant + F.curve.space->interp(F.curve.values, T);
}

/// Linear interpolation of a log-curve with flat-forward extrapolation
/// outside the grid.
double interp_log(const HSpace& space, const Vec& logv, double T) {
  const Index m = space.size();
  const double dx = space.spacing();
  const double tmax = space.grid().t_max;
  if (T <= 0.0) {
    const double slope = (logv[1] - logv[0]) / dx;
    return logv[0] + slope * T;
  }
  if (T >= tmax) {
    const double slope = (logv[m - 1] - logv[m - 2]) / dx;
    return logv[m - 1] + slope * (T - tmax);
  }
  const double pos = T / dx;
  const Index k = std::min<Index>(static_cast<Index>(pos), m - 2);
  const double frac = pos - static_cast<double>(k);
  return logv[k] * (1.0 - frac) + logv[k + 1] * frac;
}

double spot_from_log(const HSpace& space, const Vec& logv) {
  const double dx = space.spacing();
  // second-order one-sided derivative at T = 0
  const double d = (-3.0 * logv[0] + 4.0 * logv[1] - logv[2]) / (2.0 * dx);
  return -d;
}

double sup_abs_multiplier(const MultiplierM& F) {
  double sup = std::abs(F.constant);
  const Vec vals = multiplier_values(F);
  sup = std::max(sup, vals.cwiseAbs().maxCoeff());
  return sup;
}

/// Discrete generator norm ||d f||_M with a first-order upwind difference on
/// the curve part (the constant part is annihilated).
double upwind_derivative_norm(const MultiplierM& F) {
  const auto& space = *F.curve.space;
  const Index m = space.size();
  const double dx = space.spacing();
  Vec d(m);
  for (Index k = 0; k + 1 < m; ++k)
    d[k] = (F.curve.values[k + 1] - F.curve.values[k]) / dx;
  d[m - 1] = (0.0 - F.curve.values[m - 1]) / dx;  // zero extension
  return space.norm(d);
}

}  // namespace

ValidationReport validate_config(const MarketConfig& cfg) {
  if (!cfg.space) throw InvalidInput("validate_config: missing space");
  if (cfg.factors < 1) throw InvalidInput("validate_config: factors < 1");
  if (cfg.steps < 1) throw InvalidInput("validate_config: steps < 1");
  if (!(cfg.horizon > 0.0)) throw InvalidInput("validate_config: horizon");
  if (cfg.p0.values.size() != cfg.space->size())
    throw InvalidInput("validate_config: initial curve does not match grid");
  if (cfg.vol.kind != VolatilityModel::Kind::Zero &&
      cfg.vol.factors() != cfg.factors)
    throw InvalidInput("validate_config: volatility column count != factors");
  for (const auto& col : cfg.vol.columns)
    check_same_space(col.curve.space, cfg.space, "validate_config");
  if (cfg.gamma.base.size() != 0 && cfg.gamma.base.size() != cfg.factors)
    throw InvalidInput("validate_config: gamma length != factors");

  ValidationReport rep;
  auto add = [&rep](std::string name, bool pass, double measured,
                    std::string detail) {
    rep.checks.push_back(
        {std::move(name), pass, measured, std::move(detail)});
  };

  const double p00 = cfg.p0.values[0];
  add("initial_value_at_zero", std::abs(p00 - 1.0) <= 1e-12, p00,
      "p0(0) must equal 1");
  const double pmin = cfg.p0.values.minCoeff();
  add("initial_curve_positive", pmin > 0.0, pmin, "min over grid");

  double sigma_at_zero = 0.0;
  for (const auto& col : cfg.vol.columns)
    sigma_at_zero =
        std::max(sigma_at_zero, std::abs(col.constant + col.curve.values[0]));
  add("sigma_vanishes_at_zero", sigma_at_zero <= 1e-12, sigma_at_zero,
      "max_i |sigma^i(0)|");

  // Drift relation m = -sum_i gamma^i sigma^i, on the grid, at time samples.
  {
    double resid = 0.0;
    if (cfg.drift_override.has_value()) {
      const Vec mv = multiplier_values(*cfg.drift_override);
      for (int si = 0; si <= 8; ++si) {
        const double t = cfg.horizon * si / 8.0;
        const Vec g = cfg.gamma.base.size() ? cfg.gamma.at(t)
                                            : Vec::Zero(cfg.factors);
        Vec derived = Vec::Zero(cfg.space->size());
        for (Index i = 0; i < cfg.vol.factors(); ++i)
          derived -= g[i] * cfg.vol.time_scale(t) *
                     multiplier_values(cfg.vol.columns[i]);
        resid = std::max(resid, (mv - derived).cwiseAbs().maxCoeff());
      }
    }
    add("drift_relation", resid <= 1e-10, resid,
        cfg.drift_override ? "override vs -sum gamma sigma"
                           : "drift derived from gamma, residual 0");
  }

  {
    double worst = 0.0;
    for (int si = 0; si <= 8; ++si) {
      const double t = cfg.horizon * si / 8.0;
      const double sc = cfg.vol.time_scale(t);
      double acc = 0.0;
      for (const auto& col : cfg.vol.columns) {
        const double mn = multiplier_norm(col);
        const double dn = upwind_derivative_norm(col);
        acc += sc * sc * (mn * mn + dn * dn);
      }
      worst = std::max(worst, acc);
    }
    add("sigma_hs_sum_finite", std::isfinite(worst), worst,
        "max_t sum_i ||sigma^i||^2 (with generator term)");
  }

  {
    double worst = 0.0;
    for (int si = 0; si <= 8; ++si) {
      const double t = cfg.horizon * si / 8.0;
      const Vec g =
          cfg.gamma.base.size() ? cfg.gamma.at(t) : Vec::Zero(cfg.factors);
      worst = std::max(worst, g.squaredNorm());
    }
    add("gamma_sq_sum_finite", std::isfinite(worst), worst,
        "max_t sum_i (gamma^i)^2");
  }

  if (!cfg.vol.deterministic()) {
    add("exponential_moments", true, 0.0,
        "state-dependent volatility: asserted by user");
  }
  return rep;
}

EnginePlan::EnginePlan(MarketConfig cfg) : cfg_(std::move(cfg)) {
  // structural validation (throws on shape errors)
  (void)validate_config(cfg_);
  if (cfg_.gamma.base.size() == 0) cfg_.gamma.base = Vec::Zero(cfg_.factors);

  const HSpace& space = *cfg_.space;
  const Index m = space.size();
  const Index n = cfg_.factors;
  const Index K = cfg_.steps;
  const double dt = cfg_.dt();

  double max_vol = 0.0;
  for (const auto& col : cfg_.vol.columns)
    max_vol = std::max(max_vol, sup_abs_multiplier(col));
  if (max_vol > 0.0 && dt > 1.0 / (4.0 * max_vol * max_vol))
    throw ConfigurationError(
        "EnginePlan: time step too large for the volatility scale; "
        "need dt <= 1/(4 max|sigma|^2)");

  log_p0_ = cfg_.p0.values.array().log();

  // one-step translation geometry on the uniform grid
  {
    const double pos = dt / space.spacing();
    shift_offset_ = static_cast<Index>(pos);
    shift_frac_ = pos - static_cast<double>(shift_offset_);
    if (shift_frac_ > 1.0 - 1e-9) {
      shift_offset_ += 1;
      shift_frac_ = 0.0;
    } else if (shift_frac_ < 1e-9) {
      shift_frac_ = 0.0;
    }
  }
  lazy_pbar_ = cfg_.vol.kind == VolatilityModel::Kind::Zero;

  sigma_shift_.resize(K);
  sigma_grid_.resize(K);
  ito_shift_.resize(K);
  drift_shift_.resize(K);
  gamma_.resize(K);
  gamma_sq_.resize(K);
  const bool zero_vol = cfg_.vol.kind == VolatilityModel::Kind::Zero;
  for (Index k = 0; k < K; ++k) {
    const double t = dt * static_cast<double>(k);
    const double sc = cfg_.vol.time_scale(t);
    Mat shift = Mat::Zero(m, zero_vol ? 0 : n);
    Mat grid = Mat::Zero(m, zero_vol ? 0 : n);
    if (!zero_vol) {
      for (Index i = 0; i < n; ++i) {
        const auto& col = cfg_.vol.columns[i];
        for (Index j = 0; j < m; ++j) {
          shift(j, i) = sc * multiplier_at(col, space.times()[j] + dt);
          grid(j, i) = sc * multiplier_at(col, space.times()[j]);
        }
      }
    }
    ito_shift_[k] = shift.rowwise().squaredNorm();
    gamma_[k] = cfg_.gamma.at(t);
    gamma_sq_[k] = gamma_[k].squaredNorm();

    Vec drift = Vec::Zero(m);
    if (cfg_.drift_override.has_value()) {
      for (Index j = 0; j < m; ++j)
        drift[j] = multiplier_at(*cfg_.drift_override, space.times()[j] + dt);
    } else if (!zero_vol) {
      drift = -(shift * gamma_[k]);
    }
    drift_shift_[k] = std::move(drift);
    sigma_shift_[k] = std::move(shift);
    sigma_grid_[k] = std::move(grid);
  }
}

double PathState::pbar_at(double T) const {
  return std::exp(interp_log(plan->space(), *log_curve, T));
}

PathSimulator::PathSimulator(const EnginePlan& plan, std::uint64_t seed,
                             Index path, Measure measure)
    : plan_(&plan), seed_(seed), measure_(measure) {
  const Index m = plan.space().size();
  log_curve_ = plan.log_p0();
  pbar_ = log_curve_.array().exp();
  w_cum_q_ = Vec::Zero(plan.factors());
  dwq_.resize(plan.factors());
  dwp_.resize(plan.factors());
  dw_sim_.resize(plan.factors());
  (void)m;

  state_.path = path;
  state_.step = 0;
  state_.t = 0.0;
  state_.xi = 1.0;
  state_.log_curve = &log_curve_;
  state_.pbar = &pbar_;
  state_.w_cum_q = &w_cum_q_;
  state_.plan = plan_;
  refresh_derived();
  if (!done()) draw_increments();
}

void PathSimulator::draw_increments() {
  const Index k = state_.step;
  const double sdt = std::sqrt(plan_->dt());
  for (Index i = 0; i < plan_->factors(); ++i)
    dw_sim_[i] = sdt * rng::normal(seed_, static_cast<std::uint64_t>(state_.path),
                                   static_cast<std::uint64_t>(k),
                                   static_cast<std::uint64_t>(i));
  const Vec& g = plan_->gamma(k);
  if (measure_ == Measure::Q) {
    dwq_ = dw_sim_;
    dwp_ = dwq_ + plan_->dt() * g;
  } else {
    dwp_ = dw_sim_;
    dwq_ = dwp_ - plan_->dt() * g;
  }
}

void PathSimulator::refresh_derived() {
  if (plan_->lazy_pbar())
    pbar_stale_ = true;
  else
    pbar_ = log_curve_.array().exp();
  state_.short_rate = spot_from_log(plan_->space(), log_curve_);
}

void PathSimulator::sync_pbar() {
  if (pbar_stale_) {
    pbar_ = log_curve_.array().exp();
    pbar_stale_ = false;
  }
}

void PathSimulator::advance() {
  if (done()) throw std::logic_error("PathSimulator: already at horizon");
  const Index k = state_.step;
  const HSpace& space = plan_->space();
  const Index m = space.size();
  const double dt = plan_->dt();
  const auto& cfgvol = plan_->config().vol;

  double scale = 1.0;
  if (!cfgvol.deterministic()) {
    const double ref = state_.pbar_at(cfgvol.state_ref_T);
    scale = 1.0 + cfgvol.state_kappa * (ref - cfgvol.state_ref_level);
    scale = std::min(std::max(scale, cfgvol.state_lo), cfgvol.state_hi);
  }

  // translate by one step: constant node offset + fraction on the uniform
  // grid, flat-forward extrapolation past the last node
  Vec next(m);
  const Index off = plan_->shift_offset();
  const double frac = plan_->shift_frac();
  if (frac == 0.0) {
    const Index bulk = m - off;
    next.head(bulk) = log_curve_.segment(off, bulk);
  } else {
    const Index bulk = m - off - 1;
    next.head(bulk) = (1.0 - frac) * log_curve_.segment(off, bulk) +
                      frac * log_curve_.segment(off + 1, bulk);
  }
  {
    const double slope = (log_curve_[m - 1] - log_curve_[m - 2]) /
                         space.spacing();
    const Index start = frac == 0.0 ? m - off : m - off - 1;
    for (Index j = start; j < m; ++j) {
      const double target = space.times()[j] + dt;
      next[j] = log_curve_[m - 1] + slope * (target - space.grid().t_max);
    }
  }

  if (plan_->sigma_shift(k).cols() > 0) {
    const Vec& noise_dw = (measure_ == Measure::Q) ? dwq_ : dwp_;
    next += scale * (plan_->sigma_shift(k) * noise_dw);
    next -= (0.5 * scale * scale * dt) * plan_->ito_shift(k);
    if (measure_ == Measure::P) next += (scale * dt) * plan_->drift_shift(k);
  }

  state_.xi *= std::exp(-0.5 * plan_->gamma_sq(k) * dt +
                        plan_->gamma(k).dot(dwp_));
  w_cum_q_ += dwq_;
  log_curve_ = std::move(next);
  state_.step = k + 1;
  state_.t = plan_->time_at(k + 1);
  refresh_derived();
  if (!done()) draw_increments();
}

Ensemble make_ensemble(MarketConfig cfg, Index n_paths, std::uint64_t seed,
                       Measure measure) {
  Ensemble ens;
  ens.plan = std::make_shared<const EnginePlan>(std::move(cfg));
  ens.n_paths = n_paths;
  ens.seed = seed;
  ens.measure = measure;
  return ens;
}

void for_each_path(const Ensemble& ens,
                   const std::function<void(PathSimulator&)>& fn) {
  parallel_for(ens.n_paths, [&](Index begin, Index end) {
    for (Index p = begin; p < end; ++p) {
      PathSimulator sim(*ens.plan, ens.seed, p, ens.measure);
      fn(sim);
    }
  });
}

std::vector<MarketPath> simulate_paths(const Ensemble& ens) {
  const Index K = ens.plan->steps();
  const Index m = ens.plan->space().size();
  const Index n = ens.plan->factors();
  std::vector<MarketPath> out(static_cast<std::size_t>(ens.n_paths));
  for_each_path(ens, [&](PathSimulator& sim) {
    MarketPath& mp = out[static_cast<std::size_t>(sim.state().path)];
    mp.times.resize(K + 1);
    mp.curves.resize(K + 1, m);
    mp.short_rates.resize(K + 1);
    mp.xi.resize(K + 1);
    mp.dwq.resize(K, n);
    mp.dwp.resize(K, n);
    mp.seed = ens.seed;
    mp.path_index = sim.state().path;
    mp.measure = ens.measure;
    while (true) {
      sim.sync_pbar();
      const auto& st = sim.state();
      mp.times[st.step] = st.t;
      mp.curves.row(st.step) = st.pbar->transpose();
      mp.short_rates[st.step] = st.short_rate;
      mp.xi[st.step] = st.xi;
      if (sim.done()) break;
      mp.dwq.row(st.step) = sim.dwq().transpose();
      mp.dwp.row(st.step) = sim.dwp().transpose();
      sim.advance();
    }
  });
  return out;
}

Mat density_process(const Ensemble& ens) {
  Mat out(ens.n_paths, ens.plan->steps() + 1);
  for_each_path(ens, [&](PathSimulator& sim) {
    const Index p = sim.state().path;
    out(p, 0) = sim.state().xi;
    while (!sim.done()) {
      sim.advance();
      out(p, sim.state().step) = sim.state().xi;
    }
  });
  return out;
}

Vec xi_terminal(const Ensemble& ens) {
  Vec out(ens.n_paths);
  for_each_path(ens, [&](PathSimulator& sim) {
    while (!sim.done()) sim.advance();
    out[sim.state().path] = sim.state().xi;
  });
  return out;
}

std::pair<CurveH, double> forward_and_spot(const CurveH& curve) {
  const HSpace& space = *curve.space;
  const Index m = space.size();
  const double dx = space.spacing();
  const Vec& p = curve.values;
  if (p.minCoeff() <= 0.0)
    throw std::domain_error("forward_and_spot: curve must be positive");
  Vec f(m);
  f[0] = -(-3.0 * p[0] + 4.0 * p[1] - p[2]) / (2.0 * dx) / p[0];
  for (Index j = 1; j + 1 < m; ++j)
    f[j] = -(p[j + 1] - p[j - 1]) / (2.0 * dx) / p[j];
  f[m - 1] =
      -(3.0 * p[m - 1] - 4.0 * p[m - 2] + p[m - 3]) / (2.0 * dx) / p[m - 1];
  const double spot = f[0];
  return {CurveH{curve.space, std::move(f), true}, spot};
}

}  // namespace bondlab
