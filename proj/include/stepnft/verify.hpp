#pragma once

// Self-checks of the step objective's algebra and of its statistical
// properties.
//
// Identity checks compare the library path (step_errors, ranking_loss,
// wmse_loss, affine_coefficients) against an independent recomputation from
// the termwise sampler update, the endpoint-weight coefficients, and explicit
// Gaussian log-densities. Their discrepancy is |a - b| / max(1, |terms|), i.e.
// absolute for O(1) quantities and relative to the largest compared term
// otherwise, so cancellation in E+ - E- is judged against E itself.
//
// Monte-Carlo checks state their tolerances next to the check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <numbers>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "stepnft/flow_solver.hpp"
#include "stepnft/objective.hpp"
#include "stepnft/policy_net.hpp"
#include "stepnft/rng.hpp"

namespace stepnft {

enum class CheckStatus { Pass, Fail, Skipped };

inline std::string to_string(CheckStatus s) {
  switch (s) {
    case CheckStatus::Pass: return "pass";
    case CheckStatus::Fail: return "fail";
    case CheckStatus::Skipped: return "skipped";
  }
  return "?";
}

struct CheckReport {
  std::string name;
  CheckStatus status = CheckStatus::Pass;
  double discrepancy = 0.0;
  double tolerance = 0.0;
  std::size_t samples = 0;
  std::uint64_t seed = 0;
  std::string note;

  bool passed() const { return status == CheckStatus::Pass; }
};

inline CheckReport make_report(std::string name, double discrepancy, double tolerance, std::size_t samples,
                               std::uint64_t seed, std::string note = {}) {
  CheckReport r{std::move(name), CheckStatus::Pass, discrepancy, tolerance, samples, seed, std::move(note)};
  // NaN discrepancies fail too.
  r.status = discrepancy <= tolerance ? CheckStatus::Pass : CheckStatus::Fail;
  return r;
}

namespace detail {

inline double scaled_gap(double a, double b, std::initializer_list<double> terms) {
  double scale = 1.0;
  for (double t : terms) scale = std::max(scale, std::abs(t));
  return std::abs(a - b) / scale;
}

struct RandomStep {
  Eigen::VectorXd x_t, v_old, v_theta, x_next;
  double beta = 1.0, t = 1.0, delta = 0.1, sigma = 0.2;
};

// Random transition with t in (0.05, 1], delta in (0, t] (delta = t every 7th
// trial), sigma in [0.05, 1], beta in [0.1, 2], state dimension 1..8.
inline RandomStep random_step(CounterRng& rng, std::size_t trial) {
  RandomStep s;
  const auto d = static_cast<Eigen::Index>(1 + rng.below(8));
  s.t = 0.05 + 0.95 * rng.uniform_open();
  s.delta = trial % 7 == 0 ? s.t : s.t * rng.uniform_open();
  s.sigma = rng.uniform(0.05, 1.0);
  s.beta = rng.uniform(0.1, 2.0);
  s.x_t = rng.normal_vector(d);
  s.v_old = rng.normal_vector(d);
  s.v_theta = s.v_old + rng.uniform(0.0, 1.0) * rng.normal_vector(d);
  const Eigen::VectorXd mu = sde_step_direct(s.x_t, s.v_old, s.t, s.delta, s.sigma, Eigen::VectorXd::Zero(d));
  s.x_next = mu + s.sigma * std::sqrt(s.delta) * rng.normal_vector(d);
  return s;
}

// Residual and displacement computed without the library's affine path.
struct IndependentTerms {
  Eigen::VectorXd e, d;
  double variance = 0.0;
};

inline IndependentTerms independent_terms(const RandomStep& s) {
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(s.x_t.size());
  const double b = affine_coefficients_from_endpoint_weights(s.t, s.delta, s.sigma).velocity;
  return {s.x_next - sde_step_direct(s.x_t, s.v_old, s.t, s.delta, s.sigma, zero),
          s.beta * b * (s.v_theta - s.v_old), s.sigma * s.sigma * s.delta};
}

inline double gaussian_log_density(const Eigen::VectorXd& x, const Eigen::VectorXd& mean, double variance) {
  const double n = static_cast<double>(x.size());
  return -0.5 * n * std::log(2.0 * std::numbers::pi * variance) - 0.5 * (x - mean).squaredNorm() / variance;
}

inline double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return a.dot(b) / (na * nb);
}

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

inline double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Identities

inline CheckReport check_affine_coefficients(std::size_t trials, std::uint64_t seed) {
  auto rng = CounterRng::keyed(seed, StreamTag::Verify, 1);
  double worst = 0.0;
  for (std::size_t i = 0; i < trials; ++i) {
    const double t = 0.01 + 0.99 * rng.uniform_open();
    const double delta = i % 7 == 0 ? t : t * rng.uniform_open();
    const double sigma = i % 10 == 0 ? 0.0 : rng.uniform(0.0, 2.0);
    const auto a = affine_coefficients(t, delta, sigma);
    const auto b = affine_coefficients_from_endpoint_weights(t, delta, sigma);
    double gap = std::max(std::abs(a.state - b.state), std::abs(a.velocity - b.velocity));
    if (sigma == 0.0) gap = std::max(gap, std::abs(a.state - 1.0) + std::abs(a.velocity + delta));
    if (!std::isfinite(a.state) || !std::isfinite(a.velocity)) gap = std::numeric_limits<double>::infinity();
    worst = std::max(worst, gap);
  }
  return make_report("affine_coefficients", worst, 1e-12, trials, seed);
}

inline CheckReport check_log_likelihood_ratio(std::size_t trials, std::uint64_t seed) {
  auto rng = CounterRng::keyed(seed, StreamTag::Verify, 2);
  double worst = 0.0;
  for (std::size_t i = 0; i < trials; ++i) {
    const auto s = detail::random_step(rng, i);
    const auto branches = mirror(s.v_old, s.v_theta, s.beta);
    const auto errors = step_errors(s.x_next, branches, s.x_t, s.t, s.delta, s.sigma);
    const Eigen::VectorXd zero = Eigen::VectorXd::Zero(s.x_t.size());
    const double var = s.sigma * s.sigma * s.delta;
    const double lp = detail::gaussian_log_density(
        s.x_next, sde_step_direct(s.x_t, branches.v_plus, s.t, s.delta, s.sigma, zero), var);
    const double lm = detail::gaussian_log_density(
        s.x_next, sde_step_direct(s.x_t, branches.v_minus, s.t, s.delta, s.sigma, zero), var);
    worst = std::max(worst, detail::scaled_gap(lp - lm, -0.5 * (errors.e_plus - errors.e_minus),
                                               {lp, lm, errors.e_plus, errors.e_minus}));
  }
  return make_report("log_likelihood_ratio", worst, 1e-10, trials, seed);
}

inline CheckReport check_error_difference(std::size_t trials, std::uint64_t seed) {
  auto rng = CounterRng::keyed(seed, StreamTag::Verify, 3);
  double worst = 0.0;
  for (std::size_t i = 0; i < trials; ++i) {
    const auto s = detail::random_step(rng, i);
    const auto errors = step_errors(s.x_next, mirror(s.v_old, s.v_theta, s.beta), s.x_t, s.t, s.delta, s.sigma);
    const auto ind = detail::independent_terms(s);
    const double rhs = -4.0 * ind.e.dot(ind.d) / ind.variance;
    worst = std::max(worst, detail::scaled_gap(errors.e_plus - errors.e_minus, rhs,
                                               {errors.e_plus, errors.e_minus}));
  }
  return make_report("error_difference", worst, 1e-12, trials, seed);
}

inline CheckReport check_wmse_decomposition(std::size_t trials, std::uint64_t seed) {
  auto rng = CounterRng::keyed(seed, StreamTag::Verify, 4);
  double worst = 0.0;
  for (std::size_t i = 0; i < trials; ++i) {
    const auto s = detail::random_step(rng, i);
    double r = rng.uniform();
    if (i % 5 == 0) r = 0.5;
    if (i % 5 == 1) r = static_cast<double>(i % 2);
    const auto errors = step_errors(s.x_next, mirror(s.v_old, s.v_theta, s.beta), s.x_t, s.t, s.delta, s.sigma);
    const auto ind = detail::independent_terms(s);
    const double y = 2.0 * r - 1.0;
    const double rhs =
        (ind.e.squaredNorm() - 2.0 * y * ind.e.dot(ind.d) + ind.d.squaredNorm()) / ind.variance;
    worst = std::max(worst, detail::scaled_gap(wmse_loss(errors, r), rhs, {errors.e_plus, errors.e_minus}));
  }
  return make_report("wmse_decomposition", worst, 1e-12, trials, seed);
}

// ---------------------------------------------------------------------------
// Gradient form: autodiff gradient of the ranking loss against the closed form
// sigma(z) y J^T B e / s, where -grad = 2 beta * closed form exactly.

struct GradientFormResult {
  CheckReport cosine;
  CheckReport ratio;
};

inline GradientFormResult gradient_form_checks(std::size_t trials, std::uint64_t seed) {
  auto rng = CounterRng::keyed(seed, StreamTag::Verify, 5);
  double worst_cos = 0.0, worst_ratio = 0.0;
  for (std::size_t i = 0; i < trials; ++i) {
    const std::size_t d = 1 + rng.below(4);
    const std::size_t c = rng.below(3);
    const auto arch = make_architecture(d, c, 0, {8, 8});
    const VelocityField old_field = init_field(arch, stream_id({seed, i}));
    VelocityField field = old_field;
    if (i % 10 != 0) {
      field.parameters() += 0.05 * rng.normal_vector(field.parameters().size());
    }
    const auto di = static_cast<Eigen::Index>(d);
    const Eigen::VectorXd x = rng.normal_vector(di);
    const Eigen::VectorXd ctx = rng.normal_vector(static_cast<Eigen::Index>(c));
    const Eigen::VectorXd obs(0);
    const double t = 0.1 + 0.9 * rng.uniform_open();
    const double delta = t * rng.uniform_open();
    const double sigma = rng.uniform(0.1, 1.0);
    const double beta = rng.uniform(0.2, 2.0);
    const double r = i % 10 == 1 ? 0.5 : rng.uniform();

    const Eigen::VectorXd v_old = forward(old_field, x, t, ctx, obs);
    const Eigen::VectorXd zero = Eigen::VectorXd::Zero(di);
    const Eigen::VectorXd x_next =
        sde_step_direct(x, v_old, t, delta, sigma, zero) + sigma * std::sqrt(delta) * rng.normal_vector(di);

    ForwardCache cache;
    const Eigen::VectorXd v = field.velocity_batch(x, t, ctx, obs, &cache).col(0);
    const auto branches = mirror(v_old, v, beta);
    const auto errors = step_errors(x_next, branches, x, t, delta, sigma);
    const auto value = evaluate_objective(ObjectiveKind::Ranking, errors, r, branches.delta_v, 0.0);
    const Eigen::VectorXd grad = field.backward(cache, value.velocity_gradient);

    const double b = affine_coefficients_from_endpoint_weights(t, delta, sigma).velocity;
    const double var = sigma * sigma * delta;
    const Eigen::VectorXd e = x_next - sde_step_direct(x, v_old, t, delta, sigma, zero);
    const double y = 2.0 * r - 1.0;
    const double z = -2.0 * y * e.dot(beta * b * (v - v_old)) / var;
    const Eigen::VectorXd closed = field.backward(cache, (sigmoid(z) * y * b / var) * e);

    if (y == 0.0) {
      // The directional term vanishes; the gradient must be exactly zero.
      if (grad.cwiseAbs().maxCoeff() != 0.0) worst_cos = worst_ratio = std::numeric_limits<double>::infinity();
      continue;
    }
    const double cos = detail::cosine(-grad, closed);
    worst_cos = std::max(worst_cos, std::isnan(cos) ? std::numeric_limits<double>::infinity() : 1.0 - cos);
    const double cmax = closed.cwiseAbs().maxCoeff();
    for (Eigen::Index k = 0; k < closed.size(); ++k) {
      if (std::abs(closed[k]) <= 1e-3 * cmax) continue;
      worst_ratio = std::max(worst_ratio, std::abs(-grad[k] / closed[k] / (2.0 * beta) - 1.0));
    }
  }
  return {make_report("gradient_form_cosine", worst_cos, 1e-8, trials, seed, "1 - min cosine"),
          make_report("gradient_form_ratio", worst_ratio, 1e-6, trials, seed, "max |ratio / (2 beta) - 1|")};
}

inline CheckReport check_gradient_form(std::size_t trials, std::uint64_t seed) {
  return gradient_form_checks(trials, seed).cosine;
}

inline CheckReport check_gradient_ratio(std::size_t trials, std::uint64_t seed) {
  return gradient_form_checks(trials, seed).ratio;
}

// ---------------------------------------------------------------------------
// Synthetic success oracle: o = 1 iff <w, x_next> > b. For a Gaussian one-step
// law N(mu, s I) the split only involves the coordinate u = <w_hat, x_next>,
// so alpha and the conditional means come from 1-D composite Simpson
// integration along w_hat; the orthogonal part of the mean is unchanged.

struct OracleSplit {
  double alpha = 0.0;
  Eigen::VectorXd mu_plus;
  Eigen::VectorXd mu_minus;
  Eigen::VectorXd delta_mu;  // mu_plus - mu_minus
  bool degenerate = false;
};

struct SyntheticOracle {
  Eigen::VectorXd w;
  double b = 0.0;

  bool success(const Eigen::VectorXd& x) const { return w.dot(x) > b; }

  OracleSplit split(const Eigen::VectorXd& mu, double variance, std::size_t intervals = 20000) const {
    detail::require_same_dim(mu.size(), w.size(), "oracle split");
    OracleSplit out;
    out.mu_plus = mu;
    out.mu_minus = mu;
    out.delta_mu = Eigen::VectorXd::Zero(mu.size());
    const double wn = w.norm();
    if (wn == 0.0) {
      out.alpha = 0.0 > b ? 1.0 : 0.0;
      out.degenerate = true;
      return out;
    }
    const Eigen::VectorXd w_hat = w / wn;
    const double m = w_hat.dot(mu), sd = std::sqrt(variance), tau = b / wn;
    // integral of f(u) * N(u; m, sd^2) over [lo, hi]
    auto simpson = [&](double lo, double hi, auto f) {
      if (!(hi > lo)) return 0.0;
      const std::size_t n = intervals + intervals % 2;
      const double h = (hi - lo) / static_cast<double>(n);
      double acc = 0.0;
      for (std::size_t k = 0; k <= n; ++k) {
        const double u = lo + h * static_cast<double>(k);
        const double wk = (k == 0 || k == n) ? 1.0 : (k % 2 ? 4.0 : 2.0);
        acc += wk * f(u) * detail::normal_pdf((u - m) / sd) / sd;
      }
      return acc * h / 3.0;
    };
    const double lo = m - 12.0 * sd, hi = m + 12.0 * sd;
    const double cut = std::clamp(tau, lo, hi);
    const double p1 = simpson(cut, hi, [](double) { return 1.0; });
    const double p0 = simpson(lo, cut, [](double) { return 1.0; });
    out.alpha = p1;
    if (p1 < 1e-12 || p0 < 1e-12) {
      out.degenerate = true;
      return out;
    }
    const double u1 = simpson(cut, hi, [](double u) { return u; }) / p1;
    const double u0 = simpson(lo, cut, [](double u) { return u; }) / p0;
    out.mu_plus = mu + (u1 - m) * w_hat;
    out.mu_minus = mu + (u0 - m) * w_hat;
    out.delta_mu = out.mu_plus - out.mu_minus;
    return out;
  }
};

// Mixture consistency of the oracle split: mu = alpha mu+ + (1 - alpha) mu-.
inline CheckReport check_oracle_mixture(const SyntheticOracle& oracle, const Eigen::VectorXd& mu, double variance,
                                        std::uint64_t seed = 0) {
  const auto s = oracle.split(mu, variance);
  if (s.degenerate) {
    CheckReport r{"oracle_mixture", CheckStatus::Skipped, 0.0, 1e-9, 0, seed, "degenerate split"};
    return r;
  }
  const double gap = (mu - (s.alpha * s.mu_plus + (1.0 - s.alpha) * s.mu_minus)).cwiseAbs().maxCoeff();
  return make_report("oracle_mixture", gap, 1e-9, 0, seed);
}

struct AlignmentSetup {
  std::size_t state_dim = 2;
  double t = 0.5;
  double delta = 0.05;
  double sigma = 0.5;
  double beta = 1.0;
};

struct AlignmentResult {
  CheckReport alignment;  // discrepancy 1 - cosine, tolerance 0.1
  CheckReport residual;   // discrepancy max |mean e| / standard error, tolerance 4
  double alpha = 0.0;
};

// Monte Carlo of E[-grad l | x_t] at theta = theta_old with o from the oracle,
// against J^T B Delta mu* / s. The field, x_t and context are drawn from the
// seed; the oracle is applied to states in absolute coordinates.
inline AlignmentResult small_step_alignment(const SyntheticOracle& oracle, std::size_t samples, std::uint64_t seed,
                                            const AlignmentSetup& setup = {}) {
  auto rng = CounterRng::keyed(seed, StreamTag::Verify, 6);
  const auto d = static_cast<Eigen::Index>(setup.state_dim);
  detail::require_same_dim(oracle.w.size(), setup.state_dim, "alignment oracle");
  const auto arch = make_architecture(setup.state_dim, 1, 0, {16, 16});
  const VelocityField field = init_field(arch, stream_id({seed, 6}));
  const Eigen::VectorXd x = 0.5 * rng.normal_vector(d);
  const Eigen::VectorXd ctx = rng.normal_vector(1);
  const Eigen::VectorXd obs(0);
  const Eigen::VectorXd v_old = forward(field, x, setup.t, ctx, obs);
  const auto model = step_transition_model(setup.t, setup.delta, setup.sigma);
  const Eigen::VectorXd mu = model.coefficients.state * x + model.coefficients.velocity * v_old;
  const double sd = std::sqrt(model.variance);
  const auto split = oracle.split(mu, model.variance);

  AlignmentResult res;
  res.alpha = split.alpha;
  if (split.degenerate) {
    const std::string why = "alpha = " + std::to_string(split.alpha) + ": degenerate split, no signal";
    res.alignment = {"small_step_alignment", CheckStatus::Skipped, 0.0, 0.1, samples, seed, why};
    res.residual = {"residual_zero_mean", CheckStatus::Skipped, 0.0, 4.0, samples, seed, why};
    return res;
  }

  // Per-sample autodiff in chunks of identical inputs.
  const std::size_t chunk = 4096;
  Eigen::VectorXd grad_sum = Eigen::VectorXd::Zero(field.parameters().size());
  Eigen::VectorXd e_sum = Eigen::VectorXd::Zero(d), e_sq = Eigen::VectorXd::Zero(d);
  for (std::size_t start = 0; start < samples; start += chunk) {
    const auto n = static_cast<Eigen::Index>(std::min(chunk, samples - start));
    ForwardCache cache;
    const Eigen::MatrixXd v = field.velocity_batch(x.replicate(1, n), setup.t, ctx.replicate(1, n),
                                                   Eigen::MatrixXd(0, n), &cache);
    Eigen::MatrixXd g(d, n);
    for (Eigen::Index k = 0; k < n; ++k) {
      const Eigen::VectorXd x_next = mu + sd * rng.normal_vector(d);
      const double r = oracle.success(x_next) ? 1.0 : 0.0;
      const auto branches = mirror(v_old, v.col(k), setup.beta);
      const auto errors = step_errors(x_next, branches, x, model);
      g.col(k) = evaluate_objective(ObjectiveKind::Ranking, errors, r, branches.delta_v, 0.0).velocity_gradient;
      e_sum += errors.residual;
      e_sq += errors.residual.cwiseAbs2();
    }
    grad_sum += field.backward(cache, g);
  }
  const double count = static_cast<double>(samples);
  const Eigen::VectorXd mc = -grad_sum / count;

  ForwardCache cache;
  field.velocity_batch(x, setup.t, ctx, obs, &cache);
  const Eigen::VectorXd expected =
      field.backward(cache, (model.coefficients.velocity / model.variance) * split.delta_mu);
  const double cos = detail::cosine(mc, expected);
  res.alignment = make_report("small_step_alignment", std::isnan(cos) ? 2.0 : 1.0 - cos, 0.1, samples, seed,
                              "1 - cosine; alpha = " + std::to_string(split.alpha));

  double worst = 0.0;
  for (Eigen::Index i = 0; i < d; ++i) {
    const double mean = e_sum[i] / count;
    const double var = std::max(0.0, e_sq[i] / count - mean * mean);
    const double se = std::sqrt(var / count);
    worst = std::max(worst, se > 0.0 ? std::abs(mean) / se : 0.0);
  }
  res.residual = make_report("residual_zero_mean", worst, 4.0, samples, seed, "max |mean e| / SE");
  return res;
}

inline CheckReport check_small_step_alignment(const SyntheticOracle& oracle, std::size_t samples,
                                              std::uint64_t seed, const AlignmentSetup& setup = {}) {
  return small_step_alignment(oracle, samples, seed, setup).alignment;
}

// Halfspace oracle through the one-step mean of the alignment setup for
// `seed`, so alpha = 1/2.
inline SyntheticOracle centered_oracle(std::uint64_t seed, const AlignmentSetup& setup = {}) {
  auto rng = CounterRng::keyed(seed, StreamTag::Verify, 6);
  const auto d = static_cast<Eigen::Index>(setup.state_dim);
  const auto arch = make_architecture(setup.state_dim, 1, 0, {16, 16});
  const VelocityField field = init_field(arch, stream_id({seed, 6}));
  const Eigen::VectorXd x = 0.5 * rng.normal_vector(d);
  const Eigen::VectorXd ctx = rng.normal_vector(1);
  const Eigen::VectorXd v_old = forward(field, x, setup.t, ctx, Eigen::VectorXd(0));
  const auto c = affine_coefficients(setup.t, setup.delta, setup.sigma);
  const Eigen::VectorXd mu = c.state * x + c.velocity * v_old;
  Eigen::VectorXd w = Eigen::VectorXd::LinSpaced(d, 1.0, 0.5);
  return {w, w.dot(mu)};
}

// ---------------------------------------------------------------------------
// Posterior monotonicity. With prior a = P(o = 1), b = 1 - a and likelihood
// ratio lambda, eta = a lambda / (a lambda + b).

inline double bayes_eta(double a, double b, double lambda) { return a * lambda / (a * lambda + b); }

struct BayesSetup {
  double mean_success = 1.0;
  double mean_failure = -1.0;
  double sd = 1.0;
};

struct BayesResult {
  CheckReport monotone;   // discrepancy = number of non-increasing grid steps
  CheckReport posterior;  // discrepancy = max |eta - direct posterior|
};

inline BayesResult bayes_checks(const std::vector<double>& grid, double prior, const BayesSetup& g = {}) {
  if (!(prior > 0.0 && prior < 1.0)) throw ContractError("bayes check: prior must lie in (0, 1)");
  const double a = prior, b = 1.0 - prior;
  double violations = 0.0, worst = 0.0;
  double prev = -1.0;
  for (double lambda : grid) {
    if (!(lambda > 0.0)) throw ContractError("bayes check: grid values must be > 0");
    const double eta = bayes_eta(a, b, lambda);
    if (!(eta > prev)) violations += 1.0;
    prev = eta;
    // The x whose likelihood ratio equals lambda, then the posterior from the densities.
    const double m1 = g.mean_success, m0 = g.mean_failure, s2 = g.sd * g.sd;
    const double x = (2.0 * s2 * std::log(lambda) - m0 * m0 + m1 * m1) / (2.0 * (m1 - m0));
    const double p1 = std::exp(-0.5 * (x - m1) * (x - m1) / s2);
    const double p0 = std::exp(-0.5 * (x - m0) * (x - m0) / s2);
    worst = std::max(worst, std::abs(eta - a * p1 / (a * p1 + b * p0)));
  }
  return {make_report("bayes_monotonicity", violations, 0.0, grid.size(), 0),
          make_report("bayes_posterior", worst, 1e-12, grid.size(), 0)};
}

inline CheckReport check_bayes_monotonicity(const std::vector<double>& grid, double prior) {
  return bayes_checks(grid, prior).monotone;
}

inline std::vector<double> log_grid(double lo, double hi, std::size_t n) {
  std::vector<double> g(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double f = n == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(n - 1);
    g[i] = std::exp(std::log(lo) + f * (std::log(hi) - std::log(lo)));
  }
  return g;
}

// ---------------------------------------------------------------------------
// Reverse pass against central differences

// Random tanh fields of varying shape; loss alternates between 0.5*|v|^2 and a
// random linear functional of v. Per-parameter error is
// |g - fd| / max(|g| + |fd|, 1e-6) with step 1e-5 * max(1, |theta_i|); the
// floor keeps near-zero gradients from being judged on round-off alone.
inline CheckReport check_backward_finite_difference(std::size_t instances, std::uint64_t seed) {
  auto rng = CounterRng::keyed(seed, StreamTag::Verify, 20);
  double worst = 0.0;
  std::size_t compared = 0;
  for (std::size_t k = 0; k < instances; ++k) {
    const std::size_t d = 1 + rng.below(3), c = rng.below(3), o = rng.below(3);
    const std::size_t h1 = 2 + rng.below(6), h2 = 2 + rng.below(6);
    const auto field = init_field(make_architecture(d, c, o, {h1, h2}), stream_id({seed, k}));
    const Eigen::VectorXd x = rng.normal_vector(static_cast<Eigen::Index>(d));
    const Eigen::VectorXd ctx = rng.normal_vector(static_cast<Eigen::Index>(c));
    const Eigen::VectorXd obs = rng.normal_vector(static_cast<Eigen::Index>(o));
    const double t = rng.uniform(0.05, 1.0);
    const Eigen::VectorXd w = rng.normal_vector(static_cast<Eigen::Index>(d));
    const bool quadratic = k % 2 == 0;
    const OutputLoss loss = [&](const Eigen::VectorXd& v) -> std::pair<double, Eigen::VectorXd> {
      if (quadratic) return {0.5 * v.squaredNorm(), v};
      return {w.dot(v), w};
    };
    const auto tape = backward(field, x, t, ctx, obs, loss);
    VelocityField probe = field;
    for (Eigen::Index i = 0; i < probe.parameters().size(); ++i) {
      const double base = field.parameters()[i];
      const double h = 1e-5 * std::max(1.0, std::abs(base));
      probe.parameters()[i] = base + h;
      const double up = loss(forward(probe, x, t, ctx, obs)).first;
      probe.parameters()[i] = base - h;
      const double down = loss(forward(probe, x, t, ctx, obs)).first;
      probe.parameters()[i] = base;
      const double fd = (up - down) / (2.0 * h);
      const double g = tape.gradient[i];
      worst = std::max(worst, std::abs(g - fd) / std::max(std::abs(g) + std::abs(fd), 1e-6));
      ++compared;
    }
  }
  auto r = make_report("backward_finite_difference", worst, 1e-4, instances, seed);
  r.note = std::to_string(compared) + " parameters compared";
  return r;
}

// ---------------------------------------------------------------------------
// Sampler marginals on an analytic flow

// Exact velocity of the straight-line interpolant x_t = t*x1 + (1-t)*a with
// x1 ~ N(0, I) and a ~ N(m, s^2 I): v(x, t) = E[x1 - a | x_t = x].
struct LinearGaussianFlow {
  Eigen::VectorXd m;
  double s = 1.0;

  Eigen::MatrixXd velocity_batch(const Eigen::MatrixXd& x, double t, const Eigen::MatrixXd&,
                                 const Eigen::MatrixXd&) const {
    const double var = t * t + (1.0 - t) * (1.0 - t) * s * s;
    const double gain = (t - (1.0 - t) * s * s) / var;
    return (gain * (x.colwise() - (1.0 - t) * m)).colwise() - m;
  }
};

struct MarginalSetup {
  Eigen::Vector2d m{1.0, -0.5};
  double s = 0.5;
  double sigma = 0.5;
  std::size_t steps = 200;  // fine grid so both discretizations sit near the exact marginal
};

// Terminal mean and per-coordinate variance of SDE vs ODE chains, each from
// its own x1 draws. Discrepancy is the largest |difference| / combined
// standard error over all coordinates and both moments; tolerance 4.
inline CheckReport check_sampler_marginals(std::size_t chains, std::uint64_t seed, const MarginalSetup& g = {}) {
  if (chains < 2) {
    auto r = make_report("sampler_marginals", 0.0, 4.0, chains, seed, "needs at least two chains");
    r.status = CheckStatus::Skipped;
    return r;
  }
  const LinearGaussianFlow flow{g.m, g.s};
  const auto dim = g.m.size();
  const auto n = static_cast<Eigen::Index>(chains);
  const Eigen::MatrixXd none(0, n);
  auto terminal = [&](SamplerMode mode, std::uint64_t stream) {
    auto rng = CounterRng::keyed(seed, StreamTag::Verify, 30, stream);
    Eigen::MatrixXd x(dim, n);
    for (Eigen::Index i = 0; i < n; ++i) x.col(i) = rng.normal_vector(dim);
    const auto schedule = SolverSchedule::uniform(g.steps, mode == SamplerMode::SDE ? g.sigma : 0.0);
    Eigen::MatrixXd eps(dim, n);
    for (std::size_t j = 0; j < g.steps; ++j) {
      const Eigen::MatrixXd v = flow.velocity_batch(x, schedule.time(j), none, none);
      if (mode == SamplerMode::SDE) {
        for (Eigen::Index i = 0; i < n; ++i) eps.col(i) = rng.normal_vector(dim);
      }
      x = advance_batch(x, v, schedule, j, mode, mode == SamplerMode::SDE ? &eps : nullptr);
    }
    return x;
  };
  const Eigen::MatrixXd sde = terminal(SamplerMode::SDE, 0);
  const Eigen::MatrixXd ode = terminal(SamplerMode::ODE, 1);
  const double nn = static_cast<double>(n);
  double worst = 0.0;
  for (Eigen::Index k = 0; k < dim; ++k) {
    const double ms = sde.row(k).mean(), mo = ode.row(k).mean();
    const double vs = (sde.row(k).array() - ms).square().sum() / (nn - 1.0);
    const double vo = (ode.row(k).array() - mo).square().sum() / (nn - 1.0);
    const double se_mean = std::sqrt(vs / nn + vo / nn);
    const double se_var = std::sqrt(2.0 / (nn - 1.0) * (vs * vs + vo * vo));
    worst = std::max({worst, std::abs(ms - mo) / se_mean, std::abs(vs - vo) / se_var});
  }
  auto r = make_report("sampler_marginals", worst, 4.0, chains, seed);
  r.note = "in standard errors";
  return r;
}

// ---------------------------------------------------------------------------
// Suite

struct VerifyOptions {
  std::uint64_t seed = 0;
  std::size_t trials = 10000;          // identity checks
  std::size_t gradient_trials = 100;   // gradient-form checks
  std::size_t samples = 1000000;       // alignment Monte Carlo
  std::size_t fd_instances = 50;       // reverse pass vs finite differences
  std::size_t chains = 100000;         // sampler marginal comparison
};

inline std::vector<CheckReport> run_verify_suite(const VerifyOptions& opt) {
  std::vector<CheckReport> out;
  out.push_back(check_affine_coefficients(opt.trials, opt.seed));
  out.push_back(check_log_likelihood_ratio(opt.trials, opt.seed));
  out.push_back(check_error_difference(opt.trials, opt.seed));
  out.push_back(check_wmse_decomposition(opt.trials, opt.seed));
  const auto grad = gradient_form_checks(opt.gradient_trials, opt.seed);
  out.push_back(grad.cosine);
  out.push_back(grad.ratio);
  out.push_back(check_backward_finite_difference(opt.fd_instances, opt.seed));
  out.push_back(check_sampler_marginals(opt.chains, opt.seed));
  const AlignmentSetup setup;
  const auto oracle = centered_oracle(opt.seed, setup);
  const auto align = small_step_alignment(oracle, opt.samples, opt.seed, setup);
  out.push_back(align.alignment);
  out.push_back(align.residual);
  out.push_back(check_oracle_mixture(oracle, Eigen::VectorXd::Constant(setup.state_dim, 0.3), 0.04, opt.seed));
  const auto bayes = bayes_checks(log_grid(1e-3, 1e3, 201), 0.3);
  out.push_back(bayes.monotone);
  out.push_back(bayes.posterior);
  return out;
}

inline bool all_passed(const std::vector<CheckReport>& reports) {
  return std::all_of(reports.begin(), reports.end(),
                     [](const CheckReport& r) { return r.status != CheckStatus::Fail; });
}

inline void write_report_csv(std::ostream& os, const std::vector<CheckReport>& reports) {
  const auto old_precision = os.precision(17);
  os << "name,status,discrepancy,tolerance,samples,seed\n";
  for (const auto& r : reports) {
    os << r.name << ',' << to_string(r.status) << ',' << r.discrepancy << ',' << r.tolerance << ',' << r.samples
       << ',' << r.seed << '\n';
  }
  os.precision(old_precision);
}

inline void write_report_summary(std::ostream& os, const std::vector<CheckReport>& reports) {
  for (const auto& r : reports) {
    os << std::left << std::setw(8) << to_string(r.status) << std::setw(24) << r.name << " discrepancy "
       << std::setprecision(3) << std::scientific << r.discrepancy << " (tol " << r.tolerance << ")"
       << std::defaultfloat;
    if (!r.note.empty()) os << "  " << r.note;
    os << '\n';
  }
}

}  // namespace stepnft
