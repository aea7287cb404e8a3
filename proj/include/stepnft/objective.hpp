#pragma once

// Mirrored-branch step objectives.
//
// Around the rollout velocity v_old the current prediction v_theta defines an
// update direction dv = v_theta - v_old and two mirrored candidates
// v_plus = v_old + beta dv, v_minus = v_old - beta dv. Under the affine one-step
// mean mu(v) = U x_t + B v with covariance s I, each candidate yields a step
// error E = ||x_next - mu(v)||^2 / s against the observed next state.
//
// The ranking loss is softplus(y (E_plus - E_minus) / 2) with y = 2r - 1.

#include <cmath>
#include <string>

#include <Eigen/Core>

#include "stepnft/errors.hpp"
#include "stepnft/flow_solver.hpp"

namespace stepnft {

inline double softplus(double z) {
  if (z > 30.0) return z + std::log1p(std::exp(-z));
  return std::log1p(std::exp(z));
}

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

struct MirroredBranches {
  Eigen::VectorXd v_old;
  Eigen::VectorXd v_theta;
  double beta = 1.0;
  Eigen::VectorXd v_plus;
  Eigen::VectorXd v_minus;
  Eigen::VectorXd delta_v;
};

inline MirroredBranches mirror(const Eigen::VectorXd& v_old, const Eigen::VectorXd& v_theta,
                               double beta) {
  detail::require_same_dim(v_old.size(), v_theta.size(), "mirror");
  if (!(beta > 0.0)) throw ContractError("mirror: beta must be > 0");
  MirroredBranches b;
  b.v_old = v_old;
  b.v_theta = v_theta;
  b.beta = beta;
  b.delta_v = v_theta - v_old;
  b.v_plus = (1.0 - beta) * v_old + beta * v_theta;
  b.v_minus = (1.0 + beta) * v_old - beta * v_theta;
  return b;
}

// Gaussian model of the supervised state: mean(v) = state * x_t + velocity * v,
// covariance variance * I.
struct TransitionModel {
  AffineCoefficients coefficients;
  double variance = 0.0;
};

inline TransitionModel step_transition_model(double t, double delta, double sigma) {
  return {affine_coefficients(t, delta, sigma), sigma * sigma * delta};
}

struct StepErrors {
  double e_plus = 0.0;
  double e_minus = 0.0;
  Eigen::VectorXd residual;      // e_t = x_next - mu_old
  Eigen::VectorXd displacement;  // d_t = mu_plus - mu_old
  double variance = 0.0;
  double velocity_coefficient = 0.0;  // B
  double beta = 1.0;
};

inline StepErrors step_errors(const Eigen::VectorXd& x_next, const MirroredBranches& branches,
                              const Eigen::VectorXd& x_t, const TransitionModel& model) {
  detail::require_same_dim(x_next.size(), x_t.size(), "step_errors state");
  detail::require_same_dim(branches.v_old.size(), x_t.size(), "step_errors velocity");
  if (!(model.variance > 0.0)) {
    throw DegenerateCovarianceError(
        "step covariance is zero; use the unit-covariance (ODE) objective path");
  }
  const auto& c = model.coefficients;
  const Eigen::VectorXd mu_old = c.state * x_t + c.velocity * branches.v_old;
  const Eigen::VectorXd mu_plus = c.state * x_t + c.velocity * branches.v_plus;
  const Eigen::VectorXd mu_minus = c.state * x_t + c.velocity * branches.v_minus;
  StepErrors out;
  out.e_plus = (x_next - mu_plus).squaredNorm() / model.variance;
  out.e_minus = (x_next - mu_minus).squaredNorm() / model.variance;
  out.residual = x_next - mu_old;
  out.displacement = mu_plus - mu_old;
  out.variance = model.variance;
  out.velocity_coefficient = c.velocity;
  out.beta = branches.beta;
  return out;
}

inline StepErrors step_errors(const Eigen::VectorXd& x_next, const MirroredBranches& branches,
                              const Eigen::VectorXd& x_t, double t, double delta, double sigma) {
  return step_errors(x_next, branches, x_t, step_transition_model(t, delta, sigma));
}

struct LossBreakdown {
  double ranking = 0.0;
  double trust_region = 0.0;
  double total = 0.0;
  double logit = 0.0;
  double label = 0.0;
};

inline void check_label(double y) {
  if (!std::isfinite(y) || y < -1.0 || y > 1.0) throw ContractError("label y must lie in [-1, 1]");
}

inline void check_reward(double r) {
  if (!std::isfinite(r) || r < 0.0 || r > 1.0) throw ContractError("reward r must lie in [0, 1]");
}

inline LossBreakdown ranking_loss(const StepErrors& errors, double y) {
  check_label(y);
  LossBreakdown l;
  l.label = y;
  l.logit = 0.5 * y * (errors.e_plus - errors.e_minus);
  l.ranking = softplus(l.logit);
  l.total = l.ranking;
  return l;
}

inline double wmse_loss(const StepErrors& errors, double r) {
  check_reward(r);
  return r * errors.e_plus + (1.0 - r) * errors.e_minus;
}

enum class Branch { PositiveOnly, NegativeOnly };

// PositiveOnly pulls the positive branch onto successful transitions (weight r);
// NegativeOnly pulls the negative branch onto failed ones (weight 1 - r), which
// pushes the positive branch away from them.
inline double single_branch_loss(const StepErrors& errors, double r, Branch branch) {
  check_reward(r);
  return branch == Branch::PositiveOnly ? r * errors.e_plus : (1.0 - r) * errors.e_minus;
}

inline LossBreakdown total_loss(LossBreakdown ranking, const Eigen::VectorXd& delta_v,
                                double lambda_tr) {
  if (!(lambda_tr >= 0.0)) throw ContractError("trust-region weight must be >= 0");
  ranking.trust_region = lambda_tr * delta_v.squaredNorm();
  ranking.total = ranking.ranking + ranking.trust_region;
  return ranking;
}

inline double label_from_reward(double r) {
  check_reward(r);
  return 2.0 * r - 1.0;
}

enum class ObjectiveKind { Ranking, WMSE, PositiveOnly, NegativeOnly };

inline std::string to_string(ObjectiveKind k) {
  switch (k) {
    case ObjectiveKind::Ranking: return "ranking";
    case ObjectiveKind::WMSE: return "wmse";
    case ObjectiveKind::PositiveOnly: return "positive_only";
    case ObjectiveKind::NegativeOnly: return "negative_only";
  }
  return "?";
}

inline ObjectiveKind parse_objective(const std::string& s) {
  if (s == "ranking") return ObjectiveKind::Ranking;
  if (s == "wmse") return ObjectiveKind::WMSE;
  if (s == "positive_only") return ObjectiveKind::PositiveOnly;
  if (s == "negative_only") return ObjectiveKind::NegativeOnly;
  throw ConfigError("unknown objective '" + s + "' (expected ranking|wmse|positive_only|negative_only)");
}

// Loss value and its gradient with respect to the network output v_theta.
struct ObjectiveValue {
  LossBreakdown breakdown;
  Eigen::VectorXd velocity_gradient;
};

// dE_plus/dv_theta = -2 beta B (e - d) / s and dE_minus/dv_theta = 2 beta B (e + d) / s,
// since x_next - mu_plus = e - d and x_next - mu_minus = e + d.
inline ObjectiveValue evaluate_objective(ObjectiveKind kind, const StepErrors& errors, double r,
                                         const Eigen::VectorXd& delta_v, double lambda_tr) {
  const double scale = 2.0 * errors.beta * errors.velocity_coefficient / errors.variance;
  const Eigen::VectorXd grad_plus = -scale * (errors.residual - errors.displacement);
  const Eigen::VectorXd grad_minus = scale * (errors.residual + errors.displacement);
  ObjectiveValue out;
  const double y = label_from_reward(r);
  switch (kind) {
    case ObjectiveKind::Ranking: {
      out.breakdown = ranking_loss(errors, y);
      out.velocity_gradient = sigmoid(out.breakdown.logit) * 0.5 * y * (grad_plus - grad_minus);
      break;
    }
    case ObjectiveKind::WMSE:
      out.breakdown.ranking = wmse_loss(errors, r);
      out.velocity_gradient = r * grad_plus + (1.0 - r) * grad_minus;
      break;
    case ObjectiveKind::PositiveOnly:
      out.breakdown.ranking = single_branch_loss(errors, r, Branch::PositiveOnly);
      out.velocity_gradient = r * grad_plus;
      break;
    case ObjectiveKind::NegativeOnly:
      out.breakdown.ranking = single_branch_loss(errors, r, Branch::NegativeOnly);
      out.velocity_gradient = (1.0 - r) * grad_minus;
      break;
  }
  out.breakdown.label = y;
  out.breakdown = total_loss(out.breakdown, delta_v, lambda_tr);
  out.velocity_gradient += 2.0 * lambda_tr * delta_v;
  return out;
}

}  // namespace stepnft
