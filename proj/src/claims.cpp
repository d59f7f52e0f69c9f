#include "bondlab/claims.hpp"

#include <algorithm>
#include <cmath>

namespace bondlab {

namespace {

double stdnormal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }
double stdnormal_pdf(double x) {
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * 3.14159265358979323846);
}

double multiplier_at(const MultiplierM& F, double T) {
  return F.constant + F.curve.space->interp(F.curve.values, T);
}

}  // namespace

// ---------------------------------------------------------------------------
// polynomials and Gaussian moments

double Polynomial::eval(const Vec& v) const {
  double acc = 0.0;
  for (const auto& t : terms) {
    double m = t.coeff;
    for (std::size_t l = 0; l < t.exponents.size(); ++l)
      for (int e = 0; e < t.exponents[l]; ++e) m *= v[static_cast<Index>(l)];
    acc += m;
  }
  return acc;
}

Polynomial Polynomial::partial(Index l) const {
  Polynomial out;
  out.arity = arity;
  for (const auto& t : terms) {
    if (static_cast<std::size_t>(l) >= t.exponents.size()) continue;
    if (t.exponents[static_cast<std::size_t>(l)] == 0) continue;
    Monomial m = t;
    m.coeff *= t.exponents[static_cast<std::size_t>(l)];
    m.exponents[static_cast<std::size_t>(l)] -= 1;
    out.terms.push_back(std::move(m));
  }
  return out;
}

int Polynomial::degree() const {
  int d = 0;
  for (const auto& t : terms) {
    int s = 0;
    for (int e : t.exponents) s += e;
    d = std::max(d, s);
  }
  return d;
}

Polynomial Polynomial::linear(Vec weights, double constant) {
  Polynomial p;
  p.arity = weights.size();
  if (constant != 0.0)
    p.terms.push_back(
        {std::vector<int>(static_cast<std::size_t>(weights.size()), 0),
         constant});
  for (Index l = 0; l < weights.size(); ++l) {
    if (weights[l] == 0.0) continue;
    std::vector<int> e(static_cast<std::size_t>(weights.size()), 0);
    e[static_cast<std::size_t>(l)] = 1;
    p.terms.push_back({std::move(e), weights[l]});
  }
  return p;
}

namespace {

double gaussian_moment_memo(std::vector<int>& a, const Vec& m, const Mat& cov,
                            std::map<std::vector<int>, double>& memo) {
  Index first = -1;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] > 0) {
      first = static_cast<Index>(i);
      break;
    }
  if (first < 0) return 1.0;
  auto it = memo.find(a);
  if (it != memo.end()) return it->second;

  // E[x_i P] = m_i E[P] + sum_j cov_ij E[dP/dx_j]
  std::vector<int> b = a;
  b[static_cast<std::size_t>(first)] -= 1;
  double acc = m[first] * gaussian_moment_memo(b, m, cov, memo);
  for (std::size_t j = 0; j < a.size(); ++j) {
    if (b[j] == 0) continue;
    std::vector<int> c = b;
    c[j] -= 1;
    acc += cov(first, static_cast<Index>(j)) * b[j] *
           gaussian_moment_memo(c, m, cov, memo);
  }
  memo.emplace(a, acc);
  return acc;
}

}  // namespace

double gaussian_moment(const std::vector<int>& exponents, const Vec& mean,
                       const Mat& cov) {
  std::vector<int> a = exponents;
  a.resize(static_cast<std::size_t>(mean.size()), 0);
  std::map<std::vector<int>, double> memo;
  return gaussian_moment_memo(a, mean, cov, memo);
}

double gaussian_expect(const Polynomial& f, const Vec& mean, const Mat& cov) {
  double acc = 0.0;
  std::map<std::vector<int>, double> memo;
  for (const auto& t : f.terms) {
    std::vector<int> a = t.exponents;
    a.resize(static_cast<std::size_t>(mean.size()), 0);
    acc += t.coeff * gaussian_moment_memo(a, mean, cov, memo);
  }
  return acc;
}

// ---------------------------------------------------------------------------
// built-in integrand rules

namespace {

class KernelRule final : public IntegrandRule {
 public:
  explicit KernelRule(KernelH h) : h_(std::move(h)) {}
  Index factors() const override { return h_.factors(); }
  void eval(const PathState& st, Eigen::Ref<Vec> out) const override {
    for (Index i = 0; i < out.size(); ++i) out[i] = h_.at(st.t, i + 1);
  }
  std::unique_ptr<IntegrandRule> clone() const override {
    return std::make_unique<KernelRule>(*this);
  }

 private:
  KernelH h_;
};

/// Linear combination of kernels with deterministic coefficients.
class KernelComboRule final : public IntegrandRule {
 public:
  KernelComboRule(std::vector<KernelH> hs, Vec weights)
      : hs_(std::move(hs)), w_(std::move(weights)) {}
  Index factors() const override {
    Index n = 0;
    for (const auto& h : hs_) n = std::max(n, h.factors());
    return n;
  }
  void eval(const PathState& st, Eigen::Ref<Vec> out) const override {
    out.setZero();
    for (std::size_t l = 0; l < hs_.size(); ++l)
      for (Index i = 0; i < out.size(); ++i)
        out[i] += w_[static_cast<Index>(l)] * hs_[l].at(st.t, i + 1);
  }
  std::unique_ptr<IntegrandRule> clone() const override {
    return std::make_unique<KernelComboRule>(*this);
  }

 private:
  std::vector<KernelH> hs_;
  Vec w_;
};

/// x_t = scale * E_t(h) h(t, .), with the running Doleans exponential.
class ExpMartRule final : public IntegrandRule {
 public:
  ExpMartRule(KernelH h, double scale) : h_(std::move(h)), scale_(scale) {}
  Index factors() const override { return h_.factors(); }
  void begin_path() override { log_e_ = 0.0; }
  void eval(const PathState& st, Eigen::Ref<Vec> out) const override {
    const double e = scale_ * std::exp(log_e_);
    for (Index i = 0; i < out.size(); ++i) out[i] = e * h_.at(st.t, i + 1);
  }
  void after_step(const PathState& st, const Vec& dwq) override {
    const double dt = st.plan->dt();
    double drift = 0.0, noise = 0.0;
    for (Index i = 1; i <= h_.factors(); ++i) {
      const double hv = h_.at(st.t, i);
      drift += hv * hv;
      if (i - 1 < dwq.size()) noise += hv * dwq[i - 1];
    }
    log_e_ += noise - 0.5 * drift * dt;
  }
  std::unique_ptr<IntegrandRule> clone() const override {
    return std::make_unique<ExpMartRule>(*this);
  }

 private:
  KernelH h_;
  double scale_ = 1.0;
  double log_e_ = 0.0;
};

/// Exact conditional-expectation integrand of a polynomial cylinder claim:
/// x_t = sum_l E[(d_l f)(W) | F_t] h_l(t, .), the expectation under the
/// conditional Gaussian law of the remaining kernel mass.
class MomentsCylinderRule final : public IntegrandRule {
 public:
  MomentsCylinderRule(CylinderClaim claim, const EnginePlan& plan)
      : claim_(std::move(claim)) {
    const Index L = static_cast<Index>(claim_.kernels.size());
    for (Index l = 0; l < L; ++l) partials_.push_back(claim_.f.partial(l));
    const Index K = plan.steps();
    const double dt = plan.dt();
    tail_cov_.assign(static_cast<std::size_t>(K) + 1, Mat::Zero(L, L));
    for (Index k = K - 1; k >= 0; --k) {
      const double t = plan.time_at(k);
      Mat step = Mat::Zero(L, L);
      for (Index a = 0; a < L; ++a)
        for (Index b = a; b < L; ++b) {
          double dot = 0.0;
          const Index n = std::max(claim_.kernels[static_cast<std::size_t>(a)].factors(),
                                   claim_.kernels[static_cast<std::size_t>(b)].factors());
          for (Index i = 1; i <= n; ++i)
            dot += claim_.kernels[static_cast<std::size_t>(a)].at(t, i) *
                   claim_.kernels[static_cast<std::size_t>(b)].at(t, i);
          step(a, b) = step(b, a) = dot * dt;
        }
      tail_cov_[static_cast<std::size_t>(k)] =
          tail_cov_[static_cast<std::size_t>(k) + 1] + step;
    }
    m_ = Vec::Zero(L);
  }

  Index factors() const override {
    Index n = 0;
    for (const auto& h : claim_.kernels) n = std::max(n, h.factors());
    return n;
  }
  void begin_path() override { m_.setZero(); }
  void eval(const PathState& st, Eigen::Ref<Vec> out) const override {
    const Index L = static_cast<Index>(claim_.kernels.size());
    const Mat& cov = tail_cov_[static_cast<std::size_t>(st.step)];
    out.setZero();
    for (Index l = 0; l < L; ++l) {
      const double coeff =
          gaussian_expect(partials_[static_cast<std::size_t>(l)], m_, cov);
      for (Index i = 0; i < out.size(); ++i)
        out[i] +=
            coeff * claim_.kernels[static_cast<std::size_t>(l)].at(st.t, i + 1);
    }
  }
  void after_step(const PathState& st, const Vec& dwq) override {
    for (std::size_t l = 0; l < claim_.kernels.size(); ++l) {
      double inc = 0.0;
      const Index n = std::min(claim_.kernels[l].factors(), dwq.size());
      for (Index i = 1; i <= n; ++i)
        inc += claim_.kernels[l].at(st.t, i) * dwq[i - 1];
      m_[static_cast<Index>(l)] += inc;
    }
  }
  std::unique_ptr<IntegrandRule> clone() const override {
    return std::make_unique<MomentsCylinderRule>(*this);
  }

  const Mat& cov0() const { return tail_cov_[0]; }

 private:
  CylinderClaim claim_;
  std::vector<Polynomial> partials_;
  std::vector<Mat> tail_cov_;
  Vec m_;
};

// Analytic integrand of the binary option under deterministic volatility.
//
// With U = offset + horizon, the tracked price Z_t = pbar_t(U - t) steps as
// ln Z_{k+1} = ln Z_k + sigma_k(U - t_k) . dW_k - |sigma_k(U - t_k)|^2 dt / 2,
// so ln Z at the horizon is Gaussian given F_t with remaining variance
// v(t_k) = sum_{s >= k} |sigma_s(U - t_s)|^2 dt. The conditional price is
// Phi(d_t), d_t = (ln(Z_t/K) - v/2) / sqrt(v), and differentiating the
// Gaussian law gives the integrand
//   x^i_t = phi(d_t) / sqrt(v(t)) * sigma^i_t(U - t),
// a bounded profile of the moneyness ratio K / Z_t times the volatility. The
// profile bound 1/sqrt(2 pi v(t)) grows toward the horizon; its sup over the
// time grid is recorded on the integrand.
class BinaryAnalyticRule final : public IntegrandRule {
 public:
  BinaryAnalyticRule(BinaryOption opt, const EnginePlan& plan) : opt_(opt) {
    const Index K = plan.steps();
    const Index n = plan.factors();
    const double dt = plan.dt();
    const double U = opt.offset + plan.config().horizon;
    sig_.resize(K, n);
    v_.resize(K + 1);
    v_[K] = 0.0;
    for (Index k = K - 1; k >= 0; --k) {
      const double t = plan.time_at(k);
      const double sc = plan.config().vol.time_scale(t);
      for (Index i = 0; i < n; ++i)
        sig_(k, i) = sc * multiplier_at(
                              plan.config().vol.columns[static_cast<std::size_t>(i)],
                              U - t);
      v_[k] = v_[k + 1] + sig_.row(k).squaredNorm() * dt;
    }
  }

  Index factors() const override { return sig_.cols(); }
  void eval(const PathState& st, Eigen::Ref<Vec> out) const override {
    const Index k = st.step;
    const double U = opt_.offset + st.plan->config().horizon;
    const double z = st.pbar_at(U - st.t);
    const double v = v_[k];
    out.setZero();
    if (v <= 0.0) return;
    const double d = (std::log(z / opt_.strike) - 0.5 * v) / std::sqrt(v);
    const double g = stdnormal_pdf(d) / std::sqrt(v);
    const Index lim = std::min<Index>(out.size(), sig_.cols());
    for (Index i = 0; i < lim; ++i) out[i] = g * sig_(k, i);
  }
  std::unique_ptr<IntegrandRule> clone() const override {
    return std::make_unique<BinaryAnalyticRule>(*this);
  }

  double price0(const EnginePlan& plan) const {
    const double U = opt_.offset + plan.config().horizon;
    const double z0 = plan.config().p0.value_at(U);
    if (v_[0] <= 0.0) return z0 >= opt_.strike ? 1.0 : 0.0;
    return stdnormal_cdf((std::log(z0 / opt_.strike) - 0.5 * v_[0]) /
                         std::sqrt(v_[0]));
  }
  double profile_bound() const {
    double vmin = v_[0];
    for (Index k = 0; k + 1 < v_.size(); ++k) vmin = std::min(vmin, v_[k]);
    return vmin > 0.0 ? 1.0 / std::sqrt(2.0 * 3.14159265358979 * vmin) : 0.0;
  }

 private:
  BinaryOption opt_;
  Mat sig_;  // K x N values sigma^i_{t_k}(U - t_k)
  Vec v_;    // remaining variance, K + 1
};

class SlowSequenceRule final : public IntegrandRule {
 public:
  explicit SlowSequenceRule(Vec coeffs) : c_(std::move(coeffs)) {}
  Index factors() const override { return 1; }
  void eval(const PathState& st, Eigen::Ref<Vec> out) const override {
    out.setZero();
    if (out.size() >= 1) out[0] = amplitude(st);
  }
  std::unique_ptr<IntegrandRule> clone() const override {
    return std::make_unique<SlowSequenceRule>(*this);
  }
  double amplitude(const PathState& st) const {
    const Index n = std::min(c_.size(), st.w_cum_q->size());
    return c_.head(n).dot(st.w_cum_q->head(n));
  }

 private:
  Vec c_;
};

class SlowSequenceSquareRule final : public IntegrandRule {
 public:
  SlowSequenceSquareRule(Vec coeffs, double horizon)
      : c_(std::move(coeffs)), horizon_(horizon) {}
  Index factors() const override { return c_.size(); }
  void begin_path() override { y_ = 0.0; }
  void eval(const PathState& st, Eigen::Ref<Vec> out) const override {
    const Index n = std::min(c_.size(), st.w_cum_q->size());
    const double a = c_.head(n).dot(st.w_cum_q->head(n));
    const double tail = 2.0 * (horizon_ - st.t) * a;
    out.setZero();
    const Index lim = std::min(out.size(), c_.size());
    out.head(lim) = tail * c_.head(lim);
    if (out.size() >= 1) out[0] += 2.0 * a * y_;
  }
  void after_step(const PathState& st, const Vec& dwq) override {
    const Index n = std::min(c_.size(), st.w_cum_q->size());
    const double a = c_.head(n).dot(st.w_cum_q->head(n));
    y_ += a * dwq[0];
  }
  std::unique_ptr<IntegrandRule> clone() const override {
    return std::make_unique<SlowSequenceSquareRule>(*this);
  }

 private:
  Vec c_;
  double horizon_ = 1.0;
  double y_ = 0.0;  // running int a dW^1
};

class SlowSequenceCrosstermRule final : public IntegrandRule {
 public:
  SlowSequenceCrosstermRule(Vec coeffs, double horizon, Index natural)
      : c_(std::move(coeffs)), horizon_(horizon),
        full_(std::make_shared<Vec>(slow_sequence_coeffs(natural))) {}
  Index factors() const override { return full_->size(); }
  void eval(const PathState& st, Eigen::Ref<Vec> out) const override {
    const Index n = std::min(c_.size(), st.w_cum_q->size());
    const double a = c_.head(n).dot(st.w_cum_q->head(n));
    const double tail = 2.0 * (horizon_ - st.t) * a;
    const Index lim = std::min(out.size(), full_->size());
    out.head(lim) = tail * full_->head(lim);
    if (out.size() > lim) out.tail(out.size() - lim).setZero();
  }
  std::unique_ptr<IntegrandRule> clone() const override {
    return std::make_unique<SlowSequenceCrosstermRule>(*this);
  }

 private:
  Vec c_;  // market-truncated coefficients driving the amplitude
  double horizon_ = 1.0;
  std::shared_ptr<const Vec> full_;  // analytic tail for membership sweeps
};

}  // namespace

Vec slow_sequence_coeffs(Index n) {
  Vec c(n);
  for (Index i = 1; i <= n; ++i) {
    const double di = static_cast<double>(i);
    c[i - 1] = 1.0 / (std::sqrt(1.0 + di) * std::log(1.0 + di));
  }
  return c;
}

std::shared_ptr<const IntegrandRule> kernel_rule(KernelH h) {
  return std::make_shared<KernelRule>(std::move(h));
}

std::shared_ptr<const IntegrandRule> slow_sequence_rule(Vec coeffs) {
  return std::make_shared<SlowSequenceRule>(std::move(coeffs));
}

std::shared_ptr<const IntegrandRule> slow_sequence_square_rule(Vec coeffs,
                                                               double horizon) {
  return std::make_shared<SlowSequenceSquareRule>(std::move(coeffs), horizon);
}

std::shared_ptr<const IntegrandRule> slow_sequence_crossterm_rule(
    Vec coeffs, double horizon, Index natural_factors) {
  return std::make_shared<SlowSequenceCrosstermRule>(std::move(coeffs), horizon,
                                                     natural_factors);
}

// ---------------------------------------------------------------------------
// realization

Index claim_factor_requirement(const ClaimSpec& spec) {
  struct V {
    Index operator()(const CylinderClaim& c) const {
      Index n = 0;
      for (const auto& h : c.kernels) n = std::max(n, h.factors());
      return n;
    }
    Index operator()(const BinaryOption&) const { return 0; }
    Index operator()(const ExponentialMartingale& e) const {
      return e.h.factors();
    }
    Index operator()(const ExplicitIntegrand&) const { return 0; }
    Index operator()(const ProductClaim& p) const {
      return std::max(claim_factor_requirement(*p.lhs),
                      claim_factor_requirement(*p.rhs));
    }
  };
  return std::visit(V{}, spec.kind);
}

namespace {

/// Per-path claim evaluation with running state.
class Realizer {
 public:
  virtual ~Realizer() = default;
  virtual void begin() {}
  virtual void step(const PathState& st, const Vec& dwq) {
    (void)st;
    (void)dwq;
  }
  virtual double terminal(const PathState& st) const = 0;
};

class CylinderRealizer final : public Realizer {
 public:
  explicit CylinderRealizer(const CylinderClaim* c) : c_(c) {
    w_ = Vec::Zero(static_cast<Index>(c->kernels.size()));
  }
  void begin() override { w_.setZero(); }
  void step(const PathState& st, const Vec& dwq) override {
    for (std::size_t l = 0; l < c_->kernels.size(); ++l) {
      double inc = 0.0;
      const Index n = std::min(c_->kernels[l].factors(), dwq.size());
      for (Index i = 1; i <= n; ++i)
        inc += c_->kernels[l].at(st.t, i) * dwq[i - 1];
      w_[static_cast<Index>(l)] += inc;
    }
  }
  double terminal(const PathState&) const override { return c_->f.eval(w_); }

 private:
  const CylinderClaim* c_;
  Vec w_;
};

class BinaryRealizer final : public Realizer {
 public:
  explicit BinaryRealizer(const BinaryOption* b) : b_(b) {}
  double terminal(const PathState& st) const override {
    return st.pbar_at(b_->offset) >= b_->strike ? 1.0 : 0.0;
  }

 private:
  const BinaryOption* b_;
};

class ExpMartRealizer final : public Realizer {
 public:
  explicit ExpMartRealizer(const ExponentialMartingale* e) : e_(e) {}
  void begin() override { log_e_ = 0.0; }
  void step(const PathState& st, const Vec& dwq) override {
    const double dt = st.plan->dt();
    double drift = 0.0, noise = 0.0;
    for (Index i = 1; i <= e_->h.factors(); ++i) {
      const double hv = e_->h.at(st.t, i);
      drift += hv * hv;
      if (i - 1 < dwq.size()) noise += hv * dwq[i - 1];
    }
    log_e_ += noise - 0.5 * drift * dt;
  }
  double terminal(const PathState&) const override { return std::exp(log_e_); }

 private:
  const ExponentialMartingale* e_;
  double log_e_ = 0.0;
};

class ExplicitRealizer final : public Realizer {
 public:
  ExplicitRealizer(const ExplicitIntegrand* e, Index n_factors)
      : e_(e), rule_(e->rule->clone()),
        buf_(Vec::Zero(std::min(e->rule->factors(), n_factors))) {}
  void begin() override {
    acc_ = 0.0;
    rule_->begin_path();
  }
  void step(const PathState& st, const Vec& dwq) override {
    if (buf_.size() > 0) {
      rule_->eval(st, buf_);
      acc_ += buf_.dot(dwq.head(buf_.size()));
    }
    rule_->after_step(st, dwq);
  }
  double terminal(const PathState&) const override { return e_->c + acc_; }

 private:
  const ExplicitIntegrand* e_;
  std::unique_ptr<IntegrandRule> rule_;
  Vec buf_;
  double acc_ = 0.0;
};

class ProductRealizer final : public Realizer {
 public:
  ProductRealizer(std::unique_ptr<Realizer> a, std::unique_ptr<Realizer> b)
      : a_(std::move(a)), b_(std::move(b)) {}
  void begin() override {
    a_->begin();
    b_->begin();
  }
  void step(const PathState& st, const Vec& dwq) override {
    a_->step(st, dwq);
    b_->step(st, dwq);
  }
  double terminal(const PathState& st) const override {
    return a_->terminal(st) * b_->terminal(st);
  }

 private:
  std::unique_ptr<Realizer> a_, b_;
};

std::unique_ptr<Realizer> make_realizer(const ClaimSpec& spec,
                                        Index n_factors) {
  struct V {
    Index n;
    std::unique_ptr<Realizer> operator()(const CylinderClaim& c) const {
      return std::make_unique<CylinderRealizer>(&c);
    }
    std::unique_ptr<Realizer> operator()(const BinaryOption& b) const {
      return std::make_unique<BinaryRealizer>(&b);
    }
    std::unique_ptr<Realizer> operator()(const ExponentialMartingale& e) const {
      return std::make_unique<ExpMartRealizer>(&e);
    }
    std::unique_ptr<Realizer> operator()(const ExplicitIntegrand& e) const {
      return std::make_unique<ExplicitRealizer>(&e, n);
    }
    std::unique_ptr<Realizer> operator()(const ProductClaim& p) const {
      return std::make_unique<ProductRealizer>(make_realizer(*p.lhs, n),
                                               make_realizer(*p.rhs, n));
    }
  };
  return std::visit(V{n_factors}, spec.kind);
}

void check_truncation(const ClaimSpec& spec, const Ensemble& ens) {
  const Index need = claim_factor_requirement(spec);
  if (need > ens.plan->factors())
    throw TruncationError("claim '" + spec.name + "' references factor " +
                          std::to_string(need) +
                          " but the market truncates at " +
                          std::to_string(ens.plan->factors()) + " factors");
}

}  // namespace

Vec realize_claim(const ClaimSpec& spec, const Ensemble& ens) {
  check_truncation(spec, ens);
  Vec out(ens.n_paths);
  for_each_path(ens, [&](PathSimulator& sim) {
    auto r = make_realizer(spec, ens.plan->factors());
    r->begin();
    while (!sim.done()) {
      r->step(sim.state(), sim.dwq());
      sim.advance();
    }
    out[sim.state().path] = r->terminal(sim.state());
  });
  return out;
}

Vec reconstruct_claim(const IntegrandProcess& ip, const Ensemble& ens) {
  Vec out(ens.n_paths);
  const Index n = std::min(ip.rule->factors(), ens.plan->factors());
  for_each_path(ens, [&](PathSimulator& sim) {
    auto rule = ip.rule->clone();
    rule->begin_path();
    Vec buf(n);
    double acc = 0.0;
    while (!sim.done()) {
      if (n > 0) {
        rule->eval(sim.state(), buf);
        acc += buf.dot(sim.dwq().head(n));
      }
      rule->after_step(sim.state(), sim.dwq());
      sim.advance();
    }
    out[sim.state().path] = ip.c + acc;
  });
  return out;
}

// ---------------------------------------------------------------------------
// Malliavin derivative, pathwise

namespace {

double realize_on_path(const ClaimSpec& spec, const EnginePlan& plan,
                       const MarketPath& path);

Mat malliavin_on_path(const ClaimSpec& spec, const EnginePlan& plan,
                      const MarketPath& path) {
  const Index K = plan.steps();
  const Index n = plan.factors();

  struct V {
    const ClaimSpec& spec;
    const EnginePlan& plan;
    const MarketPath& path;
    Index K, n;

    Mat operator()(const CylinderClaim& c) const {
      const Index L = static_cast<Index>(c.kernels.size());
      Vec w = Vec::Zero(L);
      for (Index k = 0; k < K; ++k) {
        const double t = plan.time_at(k);
        for (Index l = 0; l < L; ++l) {
          const auto& ker = c.kernels[static_cast<std::size_t>(l)];
          for (Index i = 1; i <= std::min(ker.factors(), n); ++i)
            w[l] += ker.at(t, i) * path.dwq(k, i - 1);
        }
      }
      Mat d = Mat::Zero(K, n);
      for (Index l = 0; l < L; ++l) {
        const double g = c.f.partial(l).eval(w);
        const auto& ker = c.kernels[static_cast<std::size_t>(l)];
        for (Index k = 0; k < K; ++k) {
          const double t = plan.time_at(k);
          for (Index i = 1; i <= std::min(ker.factors(), n); ++i)
            d(k, i - 1) += g * ker.at(t, i);
        }
      }
      return d;
    }

    Mat operator()(const BinaryOption&) const {
      throw std::domain_error(
          "malliavin_derivative: binary options are not differentiable "
          "(the only differentiable binaries are the constants 0 and 1)");
    }

    Mat operator()(const ExponentialMartingale& e) const {
      const double x = realize_on_path(spec, plan, path);
      Mat d = Mat::Zero(K, n);
      for (Index k = 0; k < K; ++k) {
        const double t = plan.time_at(k);
        for (Index i = 1; i <= std::min(e.h.factors(), n); ++i)
          d(k, i - 1) = x * e.h.at(t, i);
      }
      return d;
    }

    Mat operator()(const ExplicitIntegrand&) const {
      throw std::domain_error(
          "malliavin_derivative: explicit-integrand claims carry no "
          "differentiable structure");
    }

    Mat operator()(const ProductClaim& p) const {
      const double xa = realize_on_path(*p.lhs, plan, path);
      const double xb = realize_on_path(*p.rhs, plan, path);
      return xa * malliavin_on_path(*p.rhs, plan, path) +
             xb * malliavin_on_path(*p.lhs, plan, path);
    }
  };
  return std::visit(V{spec, plan, path, K, n}, spec.kind);
}

/// Replay a stored path through a Realizer.
double realize_on_path(const ClaimSpec& spec, const EnginePlan& plan,
                       const MarketPath& path) {
  auto r = make_realizer(spec, plan.factors());
  r->begin();
  PathState st;
  st.plan = &plan;
  st.path = path.path_index;
  Vec logv;
  Vec wq = Vec::Zero(plan.factors());
  double terminal = 0.0;
  for (Index k = 0; k <= plan.steps(); ++k) {
    logv = path.curves.row(k).transpose().array().log();
    st.step = k;
    st.t = plan.time_at(k);
    st.xi = path.xi[k];
    st.short_rate = path.short_rates[k];
    st.log_curve = &logv;
    st.w_cum_q = &wq;
    if (k == plan.steps()) {
      terminal = r->terminal(st);
      break;
    }
    const Vec dwq = path.dwq.row(k).transpose();
    r->step(st, dwq);
    wq += dwq;
  }
  return terminal;
}

}  // namespace

Mat malliavin_derivative(const ClaimSpec& spec, const EnginePlan& plan,
                         const MarketPath& path) {
  return malliavin_on_path(spec, plan, path);
}

// ---------------------------------------------------------------------------
// Clark-Ocone integrand

namespace {

/// Collect every kernel appearing in a claim built from cylinders and
/// exponential martingales; ok turns false when other kinds appear.
void collect_kernels(const ClaimSpec& spec, std::vector<KernelH>& out,
                     bool& ok) {
  struct V {
    std::vector<KernelH>& out;
    bool& ok;
    void operator()(const CylinderClaim& c) const {
      for (const auto& h : c.kernels) out.push_back(h);
    }
    void operator()(const BinaryOption&) const { ok = false; }
    void operator()(const ExponentialMartingale& e) const {
      out.push_back(e.h);
    }
    void operator()(const ExplicitIntegrand&) const { ok = false; }
    void operator()(const ProductClaim& p) const {
      collect_kernels(*p.lhs, out, ok);
      collect_kernels(*p.rhs, out, ok);
    }
  };
  std::visit(V{out, ok}, spec.kind);
}

CylinderClaim merge_cylinder_product(const CylinderClaim& a,
                                     const CylinderClaim& b) {
  CylinderClaim out;
  out.kernels = a.kernels;
  out.kernels.insert(out.kernels.end(), b.kernels.begin(), b.kernels.end());
  out.f.arity = a.f.arity + b.f.arity;
  for (const auto& ta : a.f.terms)
    for (const auto& tb : b.f.terms) {
      Monomial m;
      m.coeff = ta.coeff * tb.coeff;
      m.exponents = ta.exponents;
      m.exponents.resize(static_cast<std::size_t>(a.f.arity), 0);
      m.exponents.insert(m.exponents.end(), tb.exponents.begin(),
                         tb.exponents.end());
      m.exponents.resize(static_cast<std::size_t>(out.f.arity), 0);
      out.f.terms.push_back(std::move(m));
    }
  return out;
}

/// Regression-backed integrand: x_t(i) = (B_k' phi(m_t))_i with polynomial
/// features in the running kernel integrals m_t. A labeled approximation.
class RegressionRule final : public IntegrandRule {
 public:
  RegressionRule(std::vector<KernelH> kernels,
                 std::vector<std::vector<int>> basis, std::vector<Mat> coeffs,
                 Index factors)
      : kernels_(std::move(kernels)), basis_(std::move(basis)),
        coeffs_(std::move(coeffs)), factors_(factors) {
    m_ = Vec::Zero(static_cast<Index>(kernels_.size()));
  }
  Index factors() const override { return factors_; }
  void begin_path() override { m_.setZero(); }
  void eval(const PathState& st, Eigen::Ref<Vec> out) const override {
    Vec phi(static_cast<Index>(basis_.size()));
    for (std::size_t b = 0; b < basis_.size(); ++b) {
      double v = 1.0;
      for (std::size_t l = 0; l < basis_[b].size(); ++l)
        for (int e = 0; e < basis_[b][l]; ++e) v *= m_[static_cast<Index>(l)];
      phi[static_cast<Index>(b)] = v;
    }
    const Mat& B = coeffs_[static_cast<std::size_t>(st.step)];
    const Index lim = std::min(out.size(), B.cols());
    out.setZero();
    out.head(lim) = (phi.transpose() * B.leftCols(lim)).transpose();
  }
  void after_step(const PathState& st, const Vec& dwq) override {
    for (std::size_t l = 0; l < kernels_.size(); ++l) {
      double inc = 0.0;
      const Index n = std::min(kernels_[l].factors(), dwq.size());
      for (Index i = 1; i <= n; ++i) inc += kernels_[l].at(st.t, i) * dwq[i - 1];
      m_[static_cast<Index>(l)] += inc;
    }
  }
  std::unique_ptr<IntegrandRule> clone() const override {
    return std::make_unique<RegressionRule>(*this);
  }

 private:
  std::vector<KernelH> kernels_;
  std::vector<std::vector<int>> basis_;
  std::vector<Mat> coeffs_;  // per step: n_basis x n_factors
  Vec m_;
  Index factors_ = 0;
};

std::vector<std::vector<int>> monomial_basis(Index vars, int degree) {
  std::vector<std::vector<int>> out;
  std::vector<int> cur(static_cast<std::size_t>(vars), 0);
  std::function<void(Index, int)> rec = [&](Index pos, int left) {
    if (pos == vars) {
      out.push_back(cur);
      return;
    }
    for (int e = 0; e <= left; ++e) {
      cur[static_cast<std::size_t>(pos)] = e;
      rec(pos + 1, left - e);
    }
    cur[static_cast<std::size_t>(pos)] = 0;
  };
  rec(0, degree);
  return out;
}

IntegrandProcess regression_clark_ocone(const ClaimSpec& spec,
                                        const Ensemble& ens,
                                        const ClarkOconeOptions& opt) {
  std::vector<KernelH> kernels;
  bool ok = true;
  collect_kernels(spec, kernels, ok);
  if (!ok || kernels.empty())
    throw InvalidInput(
        "clark_ocone_integrand: no analytic backend applies and the claim "
        "exposes no kernel structure for the regression fallback");

  const Index K = ens.plan->steps();
  const Index n = ens.plan->factors();
  const Index L = static_cast<Index>(kernels.size());
  const auto basis = monomial_basis(L, opt.basis_degree);
  const Index B = static_cast<Index>(basis.size());

  // fit ensemble, separate from the evaluation paths
  Ensemble fit = ens;
  fit.n_paths = opt.regression_paths;
  fit.seed = opt.regression_seed;
  auto paths = simulate_paths(fit);

  std::vector<Mat> phi(static_cast<std::size_t>(K), Mat(fit.n_paths, B));
  std::vector<Mat> target(static_cast<std::size_t>(K), Mat(fit.n_paths, n));
  double cmean = 0.0;
  for (Index p = 0; p < fit.n_paths; ++p) {
    const auto& mp = paths[static_cast<std::size_t>(p)];
    const Mat d = malliavin_on_path(spec, *ens.plan, mp);
    Vec m = Vec::Zero(L);
    for (Index k = 0; k < K; ++k) {
      const double t = ens.plan->time_at(k);
      for (Index b = 0; b < B; ++b) {
        double v = 1.0;
        const auto& exps = basis[static_cast<std::size_t>(b)];
        for (Index l = 0; l < L; ++l)
          for (int e = 0; e < exps[static_cast<std::size_t>(l)]; ++e)
            v *= m[l];
        phi[static_cast<std::size_t>(k)](p, b) = v;
      }
      target[static_cast<std::size_t>(k)].row(p) = d.row(k);
      for (Index l = 0; l < L; ++l) {
        const auto& ker = kernels[static_cast<std::size_t>(l)];
        for (Index i = 1; i <= std::min(ker.factors(), n); ++i)
          m[l] += ker.at(t, i) * mp.dwq(k, i - 1);
      }
    }
    cmean += realize_on_path(spec, *ens.plan, mp);
  }
  cmean /= static_cast<double>(fit.n_paths);

  std::vector<Mat> coeffs(static_cast<std::size_t>(K));
  for (Index k = 0; k < K; ++k) {
    const Mat& full = phi[static_cast<std::size_t>(k)];
    // early steps have vanishing running integrals; fit only the features
    // that carry mass there
    std::vector<Index> active;
    const double scale = full.cwiseAbs().maxCoeff();
    for (Index b = 0; b < B; ++b)
      if (full.col(b).cwiseAbs().maxCoeff() > 1e-12 * std::max(1.0, scale))
        active.push_back(b);
    // normalize columns so the condition number measures collinearity, not
    // the scale spread of the monomials
    Mat sub(full.rows(), static_cast<Index>(active.size()));
    Vec colscale(static_cast<Index>(active.size()));
    for (std::size_t a = 0; a < active.size(); ++a) {
      const double cs = full.col(active[a]).norm();
      colscale[static_cast<Index>(a)] = cs;
      sub.col(static_cast<Index>(a)) = full.col(active[a]) / cs;
    }
    Eigen::BDCSVD<Mat> svd(sub, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto& sv = svd.singularValues();
    const double cond = sv[0] / std::max(sv[sv.size() - 1], 1e-300);
    if (cond > opt.max_condition)
      throw IllConditionedError(
          "clark_ocone_integrand: regression features ill-conditioned at step " +
              std::to_string(k),
          cond);
    const Mat csub = svd.solve(target[static_cast<std::size_t>(k)]);
    Mat cb = Mat::Zero(B, n);
    for (std::size_t a = 0; a < active.size(); ++a)
      cb.row(active[a]) =
          csub.row(static_cast<Index>(a)) / colscale[static_cast<Index>(a)];
    coeffs[static_cast<std::size_t>(k)] = std::move(cb);
  }

  IntegrandProcess ip;
  ip.c = cmean;
  ip.rule = std::make_shared<RegressionRule>(std::move(kernels), basis,
                                             std::move(coeffs), n);
  ip.backend = "regression";
  return ip;
}

}  // namespace

IntegrandProcess clark_ocone_integrand(const ClaimSpec& spec,
                                       const Ensemble& ens,
                                       const ClarkOconeOptions& opt) {
  check_truncation(spec, ens);
  IntegrandProcess ip;

  if (opt.force_regression) return regression_clark_ocone(spec, ens, opt);

  if (const auto* e = std::get_if<ExplicitIntegrand>(&spec.kind)) {
    ip.c = e->c;
    ip.rule = e->rule;
    ip.backend = "explicit";
    return ip;
  }

  if (const auto* e = std::get_if<ExponentialMartingale>(&spec.kind)) {
    ip.c = 1.0;
    ip.rule = std::make_shared<ExpMartRule>(e->h, 1.0);
    ip.backend = "analytic";
    return ip;
  }

  if (const auto* b = std::get_if<BinaryOption>(&spec.kind)) {
    if (!ens.plan->config().vol.deterministic())
      throw InvalidInput(
          "clark_ocone_integrand: the analytic binary backend needs "
          "deterministic volatility");
    auto rule = std::make_shared<BinaryAnalyticRule>(*b, *ens.plan);
    ip.c = rule->price0(*ens.plan);
    ip.profile_bound = rule->profile_bound();
    ip.rule = std::move(rule);
    ip.backend = "analytic";
    return ip;
  }

  if (const auto* c = std::get_if<CylinderClaim>(&spec.kind)) {
    if (c->f.degree() <= 1) {
      const Index L = static_cast<Index>(c->kernels.size());
      Vec w(L);
      for (Index l = 0; l < L; ++l)
        w[l] = c->f.partial(l).eval(Vec::Zero(L));
      double c0 = 0.0;
      for (const auto& t : c->f.terms) {
        bool constant = true;
        for (int e : t.exponents) constant = constant && e == 0;
        if (constant) c0 += t.coeff;
      }
      ip.c = c0;
      ip.rule = std::make_shared<KernelComboRule>(c->kernels, std::move(w));
      ip.backend = "analytic";
      return ip;
    }
    auto rule = std::make_shared<MomentsCylinderRule>(*c, *ens.plan);
    ip.c = gaussian_expect(
        c->f, Vec::Zero(static_cast<Index>(c->kernels.size())), rule->cov0());
    ip.rule = std::move(rule);
    ip.backend = "moments";
    return ip;
  }

  if (const auto* p = std::get_if<ProductClaim>(&spec.kind)) {
    const auto* ca = std::get_if<CylinderClaim>(&p->lhs->kind);
    const auto* cb = std::get_if<CylinderClaim>(&p->rhs->kind);
    if (ca && cb) {
      ClaimSpec merged;
      merged.kind = merge_cylinder_product(*ca, *cb);
      merged.name = spec.name;
      return clark_ocone_integrand(merged, ens, opt);
    }
    const auto* ea = std::get_if<ExponentialMartingale>(&p->lhs->kind);
    const auto* eb = std::get_if<ExponentialMartingale>(&p->rhs->kind);
    if (ea && eb && ea->h.time_mod.kind == TimeMod::Kind::None &&
        eb->h.time_mod.kind == TimeMod::Kind::None) {
      // E(h) E(g) = exp(int h.g dnu) E(h+g)
      const Index K = ens.plan->steps();
      const double dt = ens.plan->dt();
      double q = 0.0;
      for (Index k = 0; k < K; ++k) {
        const double t = ens.plan->time_at(k);
        const Index nmax = std::max(ea->h.factors(), eb->h.factors());
        for (Index i = 1; i <= nmax; ++i)
          q += ea->h.at(t, i) * eb->h.at(t, i) * dt;
      }
      KernelH sum;
      const Index nmax = std::max(ea->h.factors(), eb->h.factors());
      sum.factor_coeffs = Vec::Zero(nmax);
      sum.factor_coeffs.head(ea->h.factors()) += ea->h.factor_coeffs;
      sum.factor_coeffs.head(eb->h.factors()) += eb->h.factor_coeffs;
      const double scale = std::exp(q);
      ip.c = scale;
      ip.rule = std::make_shared<ExpMartRule>(std::move(sum), scale);
      ip.backend = "analytic";
      return ip;
    }
    return regression_clark_ocone(spec, ens, opt);
  }

  return regression_clark_ocone(spec, ens, opt);
}

// ---------------------------------------------------------------------------
// membership diagnostics

namespace {

std::vector<Index> make_sweep(Index lo, Index hi) {
  std::vector<Index> out;
  for (Index n = lo; n < hi; n *= 2) out.push_back(n);
  out.push_back(hi);
  return out;
}

bool flag_divergent(const std::vector<std::pair<Index, double>>& curve) {
  // The energy-vs-truncation curve of a representable claim flattens; an
  // escaping tail keeps climbing. Two complementary detectors: growth above
  // 10% per doubling at the top of the sweep, and a doubling-increment ratio
  // near or above one, which catches log-damped power tails whose
  // per-doubling growth is small but refuses to decay geometrically.
  const std::size_t n = curve.size();
  if (n < 3) return false;
  const double e0 = curve[n - 3].second;
  const double e1 = curve[n - 2].second;
  const double e2 = curve[n - 1].second;
  if (e2 <= 0.0) return false;
  if (e1 > 0.0 && (e2 - e1) / e1 > 0.10) return true;
  const double i1 = e2 - e1;
  const double i0 = e1 - e0;
  if (i0 <= 1e-9 * e2) return false;  // already flat
  return i1 / i0 >= 0.95;
}

struct SweepAccumulator {
  std::vector<Index> levels;
  std::vector<Vec> w2;  // per s, length sweep_max
  Index sweep_max = 0;

  SweepAccumulator(const DsDiagnosticOptions& opt, Index natural,
                   Index cap = Index(1) << 14) {
    sweep_max = opt.sweep_max > 0
                    ? opt.sweep_max
                    : std::min<Index>(4 * std::max<Index>(natural, 2), cap);
    sweep_max = std::max<Index>(sweep_max, 4);
    const Index sweep_min = opt.sweep_min > 0
                                ? opt.sweep_min
                                : std::max<Index>(2, sweep_max / 128);
    levels = make_sweep(sweep_min, sweep_max);
    for (double s : opt.s_values) {
      Vec w = weight_vector({s, opt.convention}, sweep_max);
      w2.push_back(w.cwiseProduct(w));
    }
  }

  Index slots() const {
    return static_cast<Index>(w2.size() * levels.size());
  }

  /// Accumulate dt * (partial weighted square sums of x) into acc.
  void add(const Vec& x, double dt, Eigen::Ref<Vec> acc) const {
    const std::size_t n_lvl = levels.size();
    for (std::size_t si = 0; si < w2.size(); ++si) {
      double run = 0.0;
      std::size_t li = 0;
      for (Index i = 0; i < sweep_max && li < n_lvl; ++i) {
        run += w2[si][i] * x[i] * x[i];
        while (li < n_lvl && i + 1 == levels[li]) {
          acc[static_cast<Index>(si * n_lvl + li)] += run * dt;
          ++li;
        }
      }
    }
  }
};

MembershipReport finalize_report(const DsDiagnosticOptions& opt,
                                 const SweepAccumulator& sweep,
                                 const Mat& totals, const Vec& x_terminal) {
  MembershipReport rep;
  rep.s_values = opt.s_values;
  rep.p_values = opt.p_values;
  const std::size_t n_lvl = sweep.levels.size();
  for (double p : opt.p_values) {
    if (p < 2.0) throw InvalidInput("ds_diagnostic: need p >= 2");
    const double lp_p = x_terminal.array().abs().pow(p).mean();
    for (std::size_t si = 0; si < opt.s_values.size(); ++si) {
      std::vector<std::pair<Index, double>> curve;
      for (std::size_t li = 0; li < n_lvl; ++li) {
        const double energy_p = totals.col(static_cast<Index>(si * n_lvl + li))
                                    .array()
                                    .pow(0.5 * p)
                                    .mean();
        curve.emplace_back(sweep.levels[li], std::pow(energy_p, 1.0 / p));
      }
      const double full = curve.back().second;
      const auto key = std::make_pair(opt.s_values[si], p);
      rep.norm_estimates[key] = std::pow(lp_p + std::pow(full, p), 1.0 / p);
      rep.divergence_flags[key] = flag_divergent(curve);
      rep.truncation_curves[key] = std::move(curve);
    }
  }
  return rep;
}

}  // namespace

MembershipReport ds_diagnostic(const IntegrandProcess& ip, const Ensemble& ens,
                               const DsDiagnosticOptions& opt) {
  SweepAccumulator sweep(opt, ip.rule->factors());
  Mat totals(ens.n_paths, sweep.slots());
  const double dt = ens.plan->dt();
  for_each_path(ens, [&](PathSimulator& sim) {
    auto rule = ip.rule->clone();
    rule->begin_path();
    Vec x(sweep.sweep_max);
    Vec acc = Vec::Zero(sweep.slots());
    while (!sim.done()) {
      rule->eval(sim.state(), x);
      sweep.add(x, dt, acc);
      rule->after_step(sim.state(), sim.dwq());
      sim.advance();
    }
    totals.row(sim.state().path) = acc.transpose();
  });
  const Vec x_terminal = reconstruct_claim(ip, ens);
  return finalize_report(opt, sweep, totals, x_terminal);
}

MembershipReport ds_diagnostic(const ClaimSpec& spec, const Ensemble& ens,
                               const DsDiagnosticOptions& opt) {
  if (opt.route == DsRoute::Representation) {
    const IntegrandProcess ip = clark_ocone_integrand(spec, ens);
    SweepAccumulator sweep(opt, ip.rule->factors());
    Mat totals(ens.n_paths, sweep.slots());
    const double dt = ens.plan->dt();
    for_each_path(ens, [&](PathSimulator& sim) {
      auto rule = ip.rule->clone();
      rule->begin_path();
      Vec x(sweep.sweep_max);
      Vec acc = Vec::Zero(sweep.slots());
      while (!sim.done()) {
        rule->eval(sim.state(), x);
        sweep.add(x, dt, acc);
        rule->after_step(sim.state(), sim.dwq());
        sim.advance();
      }
      totals.row(sim.state().path) = acc.transpose();
    });
    const Vec x_terminal = realize_claim(spec, ens);
    return finalize_report(opt, sweep, totals, x_terminal);
  }

  // Malliavin route: the pathwise derivative replaces the conditional-
  // expectation integrand; the sweep is capped at the market truncation.
  DsDiagnosticOptions mopt = opt;
  mopt.sweep_max =
      opt.sweep_max > 0 ? std::min(opt.sweep_max, ens.plan->factors())
                        : ens.plan->factors();
  mopt.sweep_max = std::max<Index>(mopt.sweep_max, 4);
  SweepAccumulator sweep(mopt, mopt.sweep_max);
  const Index K = ens.plan->steps();
  const double dt = ens.plan->dt();

  Mat totals(ens.n_paths, sweep.slots());
  Vec x_terminal(ens.n_paths);
  auto paths = simulate_paths(ens);
  parallel_for(ens.n_paths, [&](Index begin, Index end) {
    for (Index p = begin; p < end; ++p) {
      const auto& mp = paths[static_cast<std::size_t>(p)];
      const Mat d = malliavin_on_path(spec, *ens.plan, mp);
      Vec acc = Vec::Zero(sweep.slots());
      Vec x = Vec::Zero(sweep.sweep_max);
      for (Index k = 0; k < K; ++k) {
        const Index lim = std::min<Index>(sweep.sweep_max, d.cols());
        x.head(lim) = d.row(k).head(lim).transpose();
        x.tail(sweep.sweep_max - lim).setZero();
        sweep.add(x, dt, acc);
      }
      totals.row(p) = acc.transpose();
      x_terminal[p] = realize_on_path(spec, *ens.plan, mp);
    }
  });
  return finalize_report(mopt, sweep, totals, x_terminal);
}

}  // namespace bondlab
