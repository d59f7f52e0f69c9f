#include "bondlab/hedging.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace bondlab {

OperatorTriple assemble_operators(const HSpace& space, const Vec& pbar,
                                  const Vec& l, const Mat& sigma_vals) {
  if (pbar.size() != space.size() || l.size() != space.size() ||
      sigma_vals.rows() != space.size())
    throw InvalidInput("assemble_operators: shapes do not match the grid");
  OperatorTriple out;
  out.b = pbar.asDiagonal() * sigma_vals;
  out.B = l.asDiagonal() * sigma_vals;
  out.A = out.B.transpose() * space.gram() * out.B;
  out.trace = out.A.trace();
  return out;
}

// ---------------------------------------------------------------------------
// deterministic per-step hedge tables

namespace {

struct StepTables {
  Mat B;     // M x N
  Mat A;     // N x N
  Mat Minv;  // f_n(A), the inverse above the spectral cutoff
  Vec l;     // M
  Vec Gl;    // M
  Vec rho;   // N: B' G l, so <theta1, pbar> = rho . (Minv x)
  double cond = 0.0;
  double trace = 0.0;
};

Vec translate_values(const HSpace& space, const Vec& values, double a) {
  Vec out(space.size());
  for (Index j = 0; j < out.size(); ++j)
    out[j] = space.interp(values, space.times()[j] + a);
  return out;
}

class HedgeTables {
 public:
  HedgeTables(const Ensemble& ens, const HedgeOptions& opt, bool exact)
      : plan_(*ens.plan) {
    const auto& cfg = plan_.config();
    const HSpace& space = *cfg.space;
    const Index K = plan_.steps();
    steps_.resize(static_cast<std::size_t>(K));
    for (Index k = 0; k < K; ++k) {
      StepTables& st = steps_[static_cast<std::size_t>(k)];
      st.l = translate_values(space, cfg.p0.values, plan_.time_at(k));
      st.Gl = space.apply_gram(st.l);
      const Mat& sig = plan_.sigma_grid(k);
      if (sig.cols() == 0)
        throw InvalidInput("hedging: volatility is identically zero");
      st.B = st.l.asDiagonal() * sig;
      st.A = st.B.transpose() * space.gram() * st.B;
      st.trace = st.A.trace();
      auto dec = decompose_psd(st.A);
      const double lam_max = dec.eigenvalues[0];
      const double lam_min = dec.eigenvalues[dec.size() - 1];
      st.cond = lam_max / std::max(lam_min, 1e-300);
      if (exact && st.cond > opt.cond_limit)
        throw IllConditionedError(
            "exact_hedge: A ill-conditioned at step " + std::to_string(k) +
                " (t = " + std::to_string(plan_.time_at(k)) +
                "); use the regularized hedge",
            st.cond);
      const double cut = exact ? 0.0 : 1.0 / opt.regularization_n;
      st.Minv = functional_calculus(dec, [cut](double lam) {
        if (lam <= 0.0 || lam < cut) return 0.0;
        return 1.0 / lam;
      });
      st.rho = st.B.transpose() * st.Gl;
    }
  }

  const StepTables& at(Index k) const {
    return steps_[static_cast<std::size_t>(k)];
  }

  /// Scale of the volatility operator at this state (1 when deterministic).
  /// The whole operator scales, so A scales by scale^2.
  double state_scale(const PathState& st) const {
    const auto& vol = plan_.config().vol;
    if (vol.deterministic()) return 1.0;
    const double ref = st.pbar_at(vol.state_ref_T);
    double sc = 1.0 + vol.state_kappa * (ref - vol.state_ref_level);
    return std::min(std::max(sc, vol.state_lo), vol.state_hi);
  }

 private:
  const EnginePlan& plan_;
  std::vector<StepTables> steps_;
};

double dual_sq_norm(const HSpace& space, const Vec& coeffs) {
  return std::max(0.0, coeffs.dot(space.solve_gram(coeffs)));
}

/// Discounted price of the aged bond: the time-to-maturity T position bought
/// one step earlier, valued on the new curve; below zero maturity the money
/// roll keeps the discounted value flat, matching the log slope at zero.
/// Cubic interpolation inside the grid: the linear-interpolation bias is
/// O(dx^2) per step and would accumulate linearly in the step count, masking
/// the sqrt(dt) decay of the genuine rebalancing residual.
double rshift_value(const HSpace& space, const Vec& logv, double T,
                    double dt_shift) {
  const double target = T - dt_shift;
  const double dx = space.spacing();
  const Index m = space.size();
  if (target < 0.0) {
    const double slope = (logv[1] - logv[0]) / dx;
    return std::exp(logv[0] + slope * target);
  }
  const double tmax = space.grid().t_max;
  if (target > tmax) {
    const double slope = (logv[m - 1] - logv[m - 2]) / dx;
    return std::exp(logv[m - 1] + slope * (target - tmax));
  }
  const double pos = target / dx;
  Index k = static_cast<Index>(pos);
  if (k > m - 2) k = m - 2;
  const double u = pos - static_cast<double>(k);
  if (k == 0 || k == m - 2)  // ends: linear
    return std::exp(logv[k] * (1.0 - u) + logv[k + 1] * u);
  // 4-point Lagrange on k-1 .. k+2
  const double um1 = u + 1.0, up1 = u - 1.0, up2 = u - 2.0;
  const double c0 = -u * up1 * up2 / 6.0;
  const double c1 = um1 * up1 * up2 / 2.0;
  const double c2 = -um1 * u * up2 / 2.0;
  const double c3 = um1 * u * up1 / 6.0;
  return std::exp(c0 * logv[k - 1] + c1 * logv[k] + c2 * logv[k + 1] +
                  c3 * logv[k + 2]);
}

HedgeRun run_hedge(const IntegrandProcess& ip, const Ensemble& ens,
                   const Vec* claim_values, const HedgeOptions& opt,
                   bool exact) {
  HedgeTables tables(ens, opt, exact);
  const EnginePlan& plan = *ens.plan;
  const HSpace& space = plan.space();
  const Index K = plan.steps();
  const Index N = plan.factors();
  const double dt = plan.dt();
  const Index n_rule = std::min(ip.rule->factors(), N);

  HedgeRun run;
  run.initial_wealth = ip.c;
  run.regularization_n = exact ? 0.0 : opt.regularization_n;
  run.terminal_wealth.resize(ens.n_paths);
  double cond_max = 0.0, trace_acc = 0.0;
  for (Index k = 0; k < K; ++k) {
    cond_max = std::max(cond_max, tables.at(k).cond);
    trace_acc += tables.at(k).trace;
  }
  run.max_condition = cond_max;
  run.trace_mean = trace_acc / static_cast<double>(K);

  const Index heavy = std::min<Index>(opt.sf_subsample, ens.n_paths);
  Vec sf_model = Vec::Zero(std::max<Index>(heavy, 1));
  Vec sf_realized = sf_model, port_norm = sf_model, money_norm = sf_model,
      factor_resid = sf_model, pipeline_resid = sf_model;

  for_each_path(ens, [&](PathSimulator& sim) {
    const Index p = sim.state().path;
    const bool is_heavy = p < heavy;
    auto rule = ip.rule->clone();
    rule->begin_path();
    Vec x = Vec::Zero(N);
    double y = ip.c;

    double model_acc = 0.0, model_resid = 0.0;
    double realized_acc = 0.0, realized_resid = 0.0;
    double pn = 0.0, mn = 0.0, fr_num = 0.0, fr_den = 0.0, pipe = 0.0;
    Vec theta1_coeffs, pbar_prev;

    while (!sim.done()) {
      const auto& st = sim.state();
      const Index k = st.step;
      const StepTables& tb = tables.at(k);
      const double scale = tables.state_scale(st);

      x.setZero();
      rule->eval(st, x.head(n_rule));

      // eta = B(omega) A(omega)^{-1} x; the state scale folds in linearly
      const Vec minv_x = tb.Minv * x / (scale * scale);
      const double pair_theta1 = scale * tb.rho.dot(minv_x);
      const double a_t = (y - pair_theta1) / (*st.pbar)[0];

      if (is_heavy) {
        const Vec eta = scale * (tb.B * minv_x);
        const Vec ratio = tb.l.cwiseQuotient(*st.pbar);
        theta1_coeffs = ratio.cwiseProduct(space.apply_gram(eta));

        // hedge equation through the assembled dual pipeline:
        // <theta1, pbar sigma^i> vs x_i
        const Mat& sig = plan.sigma_grid(k);
        const Vec lhs = scale * (sig.transpose() *
                                 st.pbar->cwiseProduct(theta1_coeffs));
        const double xn = x.norm();
        if (xn > 0.0) pipe = std::max(pipe, (lhs - x).norm() / xn);

        // factor residual of the (possibly regularized) solve
        fr_num += (scale * scale * (tb.A * minv_x) - x).squaredNorm() * dt;
        fr_den += x.squaredNorm() * dt;

        pn += dual_sq_norm(space, theta1_coeffs) * dt;
        mn += a_t * a_t * dt;

        // model increment sum_i <theta, pbar sigma^i> dW^i; the money leg
        // contributes a_t pbar(0) sigma^i(0) = 0 since sigma vanishes at 0
        model_acc += lhs.dot(sim.dwq());
        pbar_prev = *st.pbar;
      }

      y += x.dot(sim.dwq().head(x.size()));
      rule->after_step(st, sim.dwq());
      sim.advance();

      if (is_heavy) {
        // realized buy-and-hold increment: <theta1, aged next curve minus
        // the old curve>; the rolled money account is flat in discounted
        // terms and drops out exactly
        const auto& st2 = sim.state();
        double inc = 0.0;
        for (Index j = 0; j < space.size(); ++j) {
          const double aged =
              rshift_value(space, *st2.log_curve, space.times()[j], dt);
          inc += theta1_coeffs[j] * (aged - pbar_prev[j]);
        }
        realized_acc += inc;
        model_resid = std::max(model_resid, std::abs(y - ip.c - model_acc));
        realized_resid =
            std::max(realized_resid, std::abs(y - ip.c - realized_acc));
      }
    }

    run.terminal_wealth[p] = y;
    if (is_heavy) {
      sf_model[p] = model_resid;
      sf_realized[p] = realized_resid;
      port_norm[p] = pn;
      money_norm[p] = mn;
      factor_resid[p] = fr_den > 0.0 ? std::sqrt(fr_num / fr_den) : 0.0;
      pipeline_resid[p] = pipe;
    }
  });

  const Vec& xv = claim_values ? *claim_values : run.terminal_wealth;
  run.claim_l2 = std::sqrt(xv.squaredNorm() / static_cast<double>(xv.size()));
  run.replication_l2 = std::sqrt((run.terminal_wealth - xv).squaredNorm() /
                                 static_cast<double>(xv.size()));
  run.replication_rel =
      run.claim_l2 > 0.0 ? run.replication_l2 / run.claim_l2 : 0.0;

  run.sf_model_residual_max = sf_model.cwiseAbs().maxCoeff();
  run.sf_realized_residual_max = sf_realized.cwiseAbs().maxCoeff();
  run.sf_realized_residual_mean = sf_realized.mean();
  run.sf_constant =
      run.claim_l2 > 0.0
          ? run.sf_realized_residual_max / (std::sqrt(dt) * run.claim_l2)
          : 0.0;
  run.hedge_residual_rel_max = pipeline_resid.maxCoeff();
  run.portfolio_norm = std::sqrt(port_norm.mean());
  run.money_leg_norm = std::sqrt(money_norm.mean());
  run.factor_residual_rel = factor_resid.mean();
  return run;
}

}  // namespace

HedgeRun exact_hedge(const IntegrandProcess& ip, const Ensemble& ens,
                     const Vec* claim_values, const HedgeOptions& opt) {
  return run_hedge(ip, ens, claim_values, opt, true);
}

HedgeRun approximate_hedge(const IntegrandProcess& ip, const Ensemble& ens,
                           double n, const Vec* claim_values,
                           const HedgeOptions& opt) {
  if (!(n > 0.0)) throw InvalidInput("approximate_hedge: need n > 0");
  HedgeOptions o = opt;
  o.regularization_n = n;
  return run_hedge(ip, ens, claim_values, o, false);
}

PortfolioProcess materialize_portfolio(const IntegrandProcess& ip,
                                       const Ensemble& ens, Index path,
                                       const HedgeOptions& opt) {
  const bool exact = opt.regularization_n <= 0.0;
  HedgeTables tables(ens, opt, exact);
  const EnginePlan& plan = *ens.plan;
  const HSpace& space = plan.space();
  const Index K = plan.steps();
  const Index N = plan.factors();
  const Index n_rule = std::min(ip.rule->factors(), N);

  PortfolioProcess port;
  port.path_index = path;
  port.initial = ip.c;
  port.times.resize(K + 1);
  port.theta0.resize(K);
  port.theta1.reserve(static_cast<std::size_t>(K));
  port.wealth.resize(K + 1);

  PathSimulator sim(plan, ens.seed, path, ens.measure);
  auto rule = ip.rule->clone();
  rule->begin_path();
  double y = ip.c;
  Vec x = Vec::Zero(N);
  while (!sim.done()) {
    const auto& st = sim.state();
    const Index k = st.step;
    const StepTables& tb = tables.at(k);
    const double scale = tables.state_scale(st);
    port.times[k] = st.t;
    port.wealth[k] = y;

    x.setZero();
    rule->eval(st, x.head(n_rule));
    const Vec minv_x = tb.Minv * x / (scale * scale);
    const Vec eta = scale * (tb.B * minv_x);
    const Vec ratio = tb.l.cwiseQuotient(*st.pbar);
    DualCurve theta1 = DualCurve::from_coeffs(
        plan.config().space, ratio.cwiseProduct(space.apply_gram(eta)));
    const double pair_theta1 = theta1.coeffs.dot(*st.pbar);
    port.theta0[k] = (y - pair_theta1) / (*st.pbar)[0];
    port.theta1.push_back(std::move(theta1));

    y += x.dot(sim.dwq().head(x.size()));
    rule->after_step(st, sim.dwq());
    sim.advance();
  }
  port.times[K] = sim.state().t;
  port.wealth[K] = y;
  return port;
}

SelfFinancingReport verify_self_financing(const PortfolioProcess& port,
                                          const Ensemble& ens) {
  const EnginePlan& plan = *ens.plan;
  const HSpace& space = plan.space();
  const Index K = plan.steps();
  if (static_cast<Index>(port.theta1.size()) != K)
    throw InvalidInput("verify_self_financing: portfolio/plan step mismatch");

  // Wealth is recomputed from the stored holdings through the pairing (the
  // defining identity of a portfolio), so tampering with either leg shows up
  // in the residuals.
  auto paired_wealth = [&](Index k, const Vec& pbar) {
    const auto& th1 = port.theta1[static_cast<std::size_t>(k)];
    double v = th1.coeffs.size() ? th1.coeffs.dot(pbar) : 0.0;
    for (const auto& pm : th1.point_masses) v += pm.weight * pbar[pm.node];
    return v + port.theta0[k] * pbar[0];
  };

  PathSimulator sim(plan, ens.seed, port.path_index, ens.measure);
  SelfFinancingReport rep;
  double model_acc = 0.0, realized_acc = 0.0;
  const double v0 = paired_wealth(0, *sim.state().pbar);
  Vec pbar_prev;
  const double dt = plan.dt();
  while (!sim.done()) {
    const auto& st = sim.state();
    const Index k = st.step;
    const Mat& sig = plan.sigma_grid(k);
    const auto& th1 = port.theta1[static_cast<std::size_t>(k)];

    Vec pairs(sig.cols());
    for (Index i = 0; i < sig.cols(); ++i) {
      const Vec col = st.pbar->cwiseProduct(sig.col(i));
      double v = th1.coeffs.size() ? th1.coeffs.dot(col) : 0.0;
      for (const auto& pm : th1.point_masses) v += pm.weight * col[pm.node];
      v += port.theta0[k] * col[0];  // a_t delta_0
      pairs[i] = v;
    }
    model_acc += pairs.dot(sim.dwq());
    pbar_prev = *st.pbar;
    sim.advance();

    const auto& st2 = sim.state();
    double inc = 0.0;
    for (Index j = 0; j < space.size(); ++j) {
      const double aged =
          rshift_value(space, *st2.log_curve, space.times()[j], dt);
      const double dv = aged - pbar_prev[j];
      if (th1.coeffs.size()) inc += th1.coeffs[j] * dv;
    }
    for (const auto& pm : th1.point_masses) {
      const double aged =
          rshift_value(space, *st2.log_curve, space.times()[pm.node], dt);
      inc += pm.weight * (aged - pbar_prev[pm.node]);
    }
    realized_acc += inc;

    // value at the checkpoint: the next holdings marked on the new curve,
    // or the stored terminal wealth once the horizon is reached
    const double v_next = st2.step < K ? paired_wealth(st2.step, *st2.pbar)
                                       : port.wealth[K];
    rep.model_residual_max =
        std::max(rep.model_residual_max, std::abs(v_next - v0 - model_acc));
    rep.realized_residual_max = std::max(
        rep.realized_residual_max, std::abs(v_next - v0 - realized_acc));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// completeness

namespace {

double sigma_min_weighted(const Mat& A, const Vec& w) {
  // smallest singular value of W A^{1/2}: sqrt of lambda_min(W A W)
  const Mat waw = w.asDiagonal() * A * w.asDiagonal();
  Eigen::SelfAdjointEigenSolver<Mat> es(waw, Eigen::EigenvaluesOnly);
  return std::sqrt(std::max(0.0, es.eigenvalues()[0]));
}

}  // namespace

CompletenessReport check_completeness(const Ensemble& ens, double s,
                                      const CompletenessOptions& opt) {
  if (s < 0.0) throw InvalidInput("check_completeness: need s >= 0");
  const EnginePlan& plan = *ens.plan;
  const auto& cfg = plan.config();
  const HSpace& space = *cfg.space;
  const Index K = plan.steps();
  const Index N = plan.factors();

  CompletenessReport rep;
  rep.s = s;

  std::vector<Index> sweep;
  for (Index n = std::max<Index>(N / 4, 1); n < N; n *= 2) sweep.push_back(n);
  sweep.push_back(N);
  std::vector<Vec> weights;
  for (Index n : sweep) weights.push_back(weight_vector({s, opt.convention}, n));

  std::vector<double> k_by_n(sweep.size(), 0.0);
  bool rank_deficient = false;
  const double inf = std::numeric_limits<double>::infinity();

  auto absorb_state = [&](Index k, double scale, Index path) {
    const Vec l = translate_values(space, cfg.p0.values, plan.time_at(k));
    const Mat B = l.asDiagonal() * plan.sigma_grid(k);
    const Mat A = scale * scale * (B.transpose() * space.gram() * B);
    for (std::size_t si = 0; si < sweep.size(); ++si) {
      const Index n = sweep[si];
      const Mat An = A.topLeftCorner(n, n);
      // numerical-rank guard: below this floor the smallest eigenvalue of
      // the assembled product is roundoff, so the constant has escaped past
      // what double precision can measure
      Eigen::SelfAdjointEigenSolver<Mat> es(An, Eigen::EigenvaluesOnly);
      const double lam_max = es.eigenvalues()[n - 1];
      const double lam_min = es.eigenvalues()[0];
      if (lam_min <= 1e-13 * std::max(lam_max, 1e-300)) {
        if (!rank_deficient) {
          rank_deficient = true;
          rep.witness = "A numerically rank-deficient at truncation " +
                        std::to_string(n) + ", step " + std::to_string(k) +
                        ", path " + std::to_string(path);
        }
        k_by_n[si] = inf;
        continue;
      }
      const double smin = sigma_min_weighted(An, weights[si]);
      if (smin > 0.0)
        k_by_n[si] = std::max(k_by_n[si], 1.0 / smin);
      else
        k_by_n[si] = inf;
    }
    if (path == 0)
      rep.sigma_min_curve.emplace_back(
          plan.time_at(k), sigma_min_weighted(A, weights.back()));
  };

  if (cfg.vol.deterministic()) {
    for (Index k = 0; k < K; k += opt.time_stride) absorb_state(k, 1.0, 0);
  } else {
    const Index np = std::min<Index>(opt.path_samples, ens.n_paths);
    for (Index p = 0; p < np; ++p) {
      PathSimulator sim(plan, ens.seed, p, ens.measure);
      while (!sim.done()) {
        const auto& st = sim.state();
        if (st.step % opt.time_stride == 0) {
          const auto& vol = cfg.vol;
          const double ref = st.pbar_at(vol.state_ref_T);
          double sc = 1.0 + vol.state_kappa * (ref - vol.state_ref_level);
          sc = std::min(std::max(sc, vol.state_lo), vol.state_hi);
          absorb_state(st.step, sc, p);
        }
        sim.advance();
      }
    }
  }

  rep.k_estimate = k_by_n.back();
  for (std::size_t si = 0; si < sweep.size(); ++si)
    rep.k_by_truncation.emplace_back(sweep[si], k_by_n[si]);
  for (std::size_t si = 1; si < sweep.size(); ++si) {
    const double curr = k_by_n[si];
    rep.stability_ratios.push_back(
        std::isinf(curr) ? inf : curr / std::max(k_by_n[si - 1], 1e-300));
  }

  if (rank_deficient) {
    rep.verdict = CompletenessReport::Verdict::Violated;
    return rep;
  }
  bool stable = true, escaped = false;
  for (double r : rep.stability_ratios) {
    if (r > opt.stable_ratio) stable = false;
    if (r >= opt.violated_ratio) escaped = true;
  }
  rep.verdict = stable ? CompletenessReport::Verdict::Satisfied
                       : (escaped ? CompletenessReport::Verdict::Violated
                                  : CompletenessReport::Verdict::Inconclusive);
  return rep;
}

// ---------------------------------------------------------------------------
// converse bound

ConverseBoundReport converse_integrand_bound(
    const std::vector<DualPortfolioRule>& portfolios, const Ensemble& ens,
    double s, const CompletenessOptions& opt) {
  if (s < 0.0) throw InvalidInput("converse_integrand_bound: need s >= 0");
  const EnginePlan& plan = *ens.plan;
  const auto& cfg = plan.config();
  const HSpace& space = *cfg.space;
  const Index K = plan.steps();
  const Index N = plan.factors();
  const double dt = plan.dt();

  ConverseBoundReport rep;
  rep.s = s;

  // k' = sup_t ||J^s A^{1/2}|| in the index-operator weight convention,
  // with its truncation sweep
  std::vector<Index> sweep;
  for (Index n = std::max<Index>(N / 4, 1); n < N; n *= 2) sweep.push_back(n);
  sweep.push_back(N);
  std::vector<double> kp_by_n(sweep.size(), 0.0);
  std::vector<Vec> jw;
  for (Index n : sweep)
    jw.push_back(weight_vector({s, WeightConvention::JWeight}, n));

  std::vector<Vec> l_by_step(static_cast<std::size_t>(K));
  for (Index k = 0; k < K; ++k) {
    const Vec l = translate_values(space, cfg.p0.values, plan.time_at(k));
    const Mat B = l.asDiagonal() * plan.sigma_grid(k);
    const Mat A = B.transpose() * space.gram() * B;
    for (std::size_t si = 0; si < sweep.size(); ++si) {
      const Index n = sweep[si];
      const Mat waw =
          jw[si].asDiagonal() * A.topLeftCorner(n, n) * jw[si].asDiagonal();
      Eigen::SelfAdjointEigenSolver<Mat> es(waw, Eigen::EigenvaluesOnly);
      kp_by_n[si] = std::max(
          kp_by_n[si], std::sqrt(std::max(0.0, es.eigenvalues()[n - 1])));
    }
    l_by_step[static_cast<std::size_t>(k)] = l;
  }
  rep.k_prime = kp_by_n.back();
  for (std::size_t si = 0; si < sweep.size(); ++si)
    rep.k_prime_by_truncation.emplace_back(sweep[si], kp_by_n[si]);
  rep.applicable = true;
  for (std::size_t si = 1; si < sweep.size(); ++si)
    if (kp_by_n[si] > opt.stable_ratio * kp_by_n[si - 1])
      rep.applicable = false;

  const Vec wfull = weight_vector({s, WeightConvention::JWeight}, N);
  const double cdual = space.dual_multiplier_bound();

  for (const auto& rule : portfolios) {
    ConverseBoundReport::Row row;
    Vec lhs(ens.n_paths), mid(ens.n_paths), outer(ens.n_paths);
    for_each_path(ens, [&](PathSimulator& sim) {
      double lhs_acc = 0.0, mid_acc = 0.0, theta_acc = 0.0, qsup = 0.0;
      while (!sim.done()) {
        const auto& st = sim.state();
        const Index k = st.step;
        Vec tau = rule.time_mod.value(st.t) * rule.coeffs;
        tau[0] += rule.money;
        // induced integrand x = b' theta
        const Vec x =
            plan.sigma_grid(k).transpose() * st.pbar->cwiseProduct(tau);
        lhs_acc += wfull.cwiseProduct(x).squaredNorm() * dt;

        // qbar = pbar / l, extended flat where l vanishes (the volatility
        // support never reaches there, so x = B' (qbar . tau) still holds)
        const Vec& l = l_by_step[static_cast<std::size_t>(k)];
        Vec qbar(space.size());
        double last = 1.0;
        for (Index j = 0; j < space.size(); ++j) {
          if (l[j] > 1e-12) last = (*st.pbar)[j] / l[j];
          qbar[j] = last;
        }
        mid_acc += dual_sq_norm(space, qbar.cwiseProduct(tau)) * dt;
        theta_acc += dual_sq_norm(space, tau) * dt;

        const double a = qbar[space.size() - 1];
        Vec f = qbar.array() - a;
        qsup = std::max(qsup, std::sqrt(a * a + space.inner(f, f)));
        sim.advance();
      }
      const Index p = sim.state().path;
      lhs[p] = lhs_acc;
      mid[p] = rep.k_prime * rep.k_prime * mid_acc;
      outer[p] =
          rep.k_prime * rep.k_prime * cdual * cdual * qsup * qsup * theta_acc;
    });
    row.lhs_energy = lhs.mean();
    row.mid_bound = mid.mean();
    row.outer_bound = outer.mean();
    double smid = 1e300, souter = 1e300;
    for (Index p = 0; p < ens.n_paths; ++p) {
      if (lhs[p] > 0.0) {
        smid = std::min(smid, mid[p] / lhs[p]);
        souter = std::min(souter, outer[p] / lhs[p]);
      }
    }
    row.slack_mid = smid == 1e300 ? 0.0 : smid;
    row.slack_outer = souter == 1e300 ? 0.0 : souter;
    rep.rows.push_back(row);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// volatility model builders

VolatilityModel orthogonal_decay_model(
    const HSpacePtr& space, Index factors,
    const std::function<double(Index)>& decay, double support_t_max,
    std::string description) {
  const Index m = space->size();
  std::vector<Index> nodes;
  for (Index j = 1; j < m; ++j)
    if (space->times()[j] <= support_t_max + 1e-12) nodes.push_back(j);
  if (factors > static_cast<Index>(nodes.size()))
    throw InvalidInput("orthogonal_decay_model: not enough grid support");

  Mat gsub(static_cast<Index>(nodes.size()),
           static_cast<Index>(nodes.size()));
  for (std::size_t a = 0; a < nodes.size(); ++a)
    for (std::size_t b = 0; b < nodes.size(); ++b)
      gsub(static_cast<Index>(a), static_cast<Index>(b)) =
          space->gram()(nodes[a], nodes[b]);
  Eigen::SelfAdjointEigenSolver<Mat> es(gsub);
  if (es.info() != Eigen::Success)
    throw std::runtime_error("orthogonal_decay_model: eigensolver failed");

  VolatilityModel vol;
  vol.kind = VolatilityModel::Kind::DeterministicDiagonal;
  vol.decay_description = std::move(description);
  for (Index i = 0; i < factors; ++i) {
    // ascending eigenvalues: smooth directions come first
    const Vec u = es.eigenvectors().col(i);
    const double d = es.eigenvalues()[i];
    Vec values = Vec::Zero(m);
    for (std::size_t a = 0; a < nodes.size(); ++a)
      values[nodes[a]] = u[static_cast<Index>(a)] / std::sqrt(d);
    values *= decay(i + 1);
    vol.columns.push_back(
        MultiplierM{0.0, make_curve(space, std::move(values))});
  }
  return vol;
}

VolatilityModel power_decay_model(const HSpacePtr& space, Index factors,
                                  double scale, double exponent,
                                  double support_t_max) {
  return orthogonal_decay_model(
      space, factors,
      [scale, exponent](Index i) {
        return scale / std::pow(static_cast<double>(i), exponent);
      },
      support_t_max, "scale * i^-" + std::to_string(exponent));
}

VolatilityModel geometric_decay_model(const HSpacePtr& space, Index factors,
                                      double scale, double support_t_max) {
  return orthogonal_decay_model(
      space, factors,
      [scale](Index i) { return scale * std::pow(2.0, -double(i)); },
      support_t_max, "scale * 2^-i");
}

}  // namespace bondlab
